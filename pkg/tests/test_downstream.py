import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unimiss.checkpoint import CheckpointError, save_backbone
from unimiss.config import AugmentConfig, ConfigError, FinetuneConfig, MiTConfig, mit_preset, serialize_config
from unimiss.data import make_downstream_task
from unimiss.downstream import (EvalReport, auc, build_classifier, build_segmenter, dice, evaluate, finetune,
                                select_labeled)
from unimiss.engine import build_state
from unimiss.mit import is_dimension_specific

from conftest import MICRO_MIT

AUG = AugmentConfig(patch_2d=(16, 16), patch_3d=(16, 16, 16))


@pytest.fixture(scope="module")
def backbone_file(tmp_path_factory):
    from conftest import micro_config

    cfg = micro_config()
    torch.manual_seed(11)
    state = build_state(cfg, seed=11)
    path = tmp_path_factory.mktemp("bb") / "backbone.mit"
    return save_backbone(path, state.teacher.backbone, serialize_config(cfg)), state


@pytest.fixture(scope="module")
def seg2d():
    return make_downstream_task("seg2d", 6, 4, seed=0, aug=AUG)


# --- model construction


def test_classifier_output_shape():
    model = build_classifier(3, MICRO_MIT)
    assert model(torch.randn(4, 1, 32, 32)).shape == (4, 3)
    assert model(torch.randn(2, 1, 16, 32, 32)).shape == (2, 3)


@pytest.mark.parametrize("shape", [(1, 1, 64, 64), (1, 1, 16, 64, 64)])
def test_segmenter_logits_match_input(shape):
    model = build_segmenter(5, mit_preset("mit-7-tiny")).eval()
    with torch.no_grad():
        out = model(torch.randn(shape))
    assert tuple(out.shape) == (1, 5, *shape[2:])


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([16, 32, 48]), st.sampled_from([16, 32]), st.integers(2, 4), st.booleans())
def test_segmenter_shape_property(h, w, n_classes, volumetric):
    model = build_segmenter(n_classes, MICRO_MIT).eval()
    shape = (1, 1, 16, h, w) if volumetric else (1, 1, h, w)
    with torch.no_grad():
        assert tuple(model(torch.randn(shape)).shape) == (1, n_classes, *shape[2:])


def test_random_init_reproducible():
    a, b = build_classifier(2, MICRO_MIT, seed=3), build_classifier(2, MICRO_MIT, seed=3)
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
    c = build_classifier(2, MICRO_MIT, seed=4)
    assert not all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), c.state_dict().values()))


def test_n_classes_validated():
    with pytest.raises(ValueError):
        build_classifier(1, MICRO_MIT)
    with pytest.raises(ValueError):
        build_segmenter(1, MICRO_MIT)


def test_transfer_by_name(backbone_file):
    path, state = backbone_file
    cls = build_classifier(2, MICRO_MIT, init=path)
    encoder = {n for n in state.teacher.backbone.state_dict() if n.startswith("encoder.") or n == "norm.weight"}
    assert encoder <= set(cls.transferred)
    src = state.teacher.backbone.state_dict()
    assert all(torch.equal(v, src[k]) for k, v in cls.backbone.state_dict().items())

    seg = build_segmenter(3, MICRO_MIT, init=path, seed=0)
    assert any(n.startswith("decoder.") for n in seg.transferred)
    assert not any(n.startswith("head.") for n in seg.transferred)
    fresh = build_segmenter(3, MICRO_MIT, init=None, seed=0)
    # head comes from the same seeded init whether or not the backbone is pretrained
    assert all(torch.equal(a, b) for a, b in zip(seg.head.state_dict().values(), fresh.head.state_dict().values()))


def test_transfer_rejects_config_mismatch(backbone_file, tmp_path):
    path, _ = backbone_file
    other = MiTConfig(embed_dims=(8, 16, 16, 32), num_heads=(1, 2, 2, 4), ffn_expansion=(2, 2, 2, 2))
    with pytest.raises(ConfigError):
        build_classifier(2, other, init=path)
    broken = tmp_path / "broken.mit"
    broken.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointError):
        build_classifier(2, MICRO_MIT, init=broken)


def test_purity_holds_for_segmenter():
    from unimiss.instrument import touched_parameters

    model = build_segmenter(3, MICRO_MIT)
    two = touched_parameters(model, model, torch.randn(1, 1, 32, 32))
    assert not any(is_dimension_specific(n) == "3d" for n in two)


# --- metrics


def test_dice_examples():
    gt = np.array([[0, 1], [1, 0]])
    assert dice(gt, gt, 2)[1] == 1.0
    assert dice(np.array([[1, 0], [0, 0]]), np.array([[0, 0], [0, 1]]), 2)[1] == 0.0
    pred = np.zeros((4, 4), int)
    truth = np.zeros((4, 4), int)
    pred.flat[[0, 1, 2, 3]] = 1
    truth.flat[[1, 2, 3, 4, 5, 6]] = 1
    assert abs(dice(pred, truth, 2)[1] - 0.6) < 1e-12


def test_dice_empty_class_convention():
    per, mean = dice(np.zeros((3, 3), int), np.zeros((3, 3), int), 3)
    assert list(per) == [1.0, 1.0]
    per, _ = dice(np.array([[2, 0]]), np.array([[0, 0]]), 3)
    assert list(per) == [1.0, 0.0]
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)), 2)


def test_auc_examples():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=6),
       st.sampled_from([np.exp, lambda x: x ** 3, lambda x: 2 * x + 7, np.arctan]))
def test_auc_invariant_to_monotone_transform(scores, fn):
    labels = [0, 1, 0, 1, 1, 0]
    s = np.array(scores)
    # keep the transform strictly monotone in floating point too
    t = fn(s)
    if len(np.unique(t)) != len(np.unique(s)):
        return
    assert auc(s, labels) == auc(t, labels)


def _brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg) / (len(pos) * len(neg))


@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=20))
def test_auc_matches_pairwise_count(items):
    s, y = zip(*items)
    if all(y) or not any(y):
        return
    assert abs(auc(s, y) - _brute_auc(s, y)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_dice_invariant_to_monotone_logit_transform(seed):
    logits = np.random.default_rng(seed).normal(size=(3, 5, 5))
    gt = np.random.default_rng(seed + 1).integers(0, 3, size=(5, 5))
    a = dice(logits.argmax(0), gt, 3)[1]
    b = dice(np.exp(logits).argmax(0), gt, 3)[1]
    assert a == b


# --- fine-tuning


@pytest.mark.parametrize("fraction, expected", [(0.2, 8), (0.4, 16), (1.0, 40), (0.25, 10), (0.21, 9)])
def test_label_fraction_selection(fraction, expected):
    idx = select_labeled(40, fraction, seed=1)
    assert len(idx) == expected == math.ceil(fraction * 40)
    assert np.array_equal(idx, select_labeled(40, fraction, seed=1))
    assert len(set(idx)) == expected


def test_label_grid_accepted():
    for f in (0.2, 0.4, 1.0):
        FinetuneConfig(label_fraction=f).validate()


def test_zero_steps_is_baseline(seg2d):
    model = build_segmenter(seg2d.n_classes, MICRO_MIT, seed=2)
    base = evaluate(model, seg2d)
    _, report = finetune(model, seg2d, FinetuneConfig(steps=0, label_fraction=1.0))
    assert report.value == base and report.metric == "dice" and report.init == "random"


def test_lr_zero_only_init_matters(seg2d, backbone_file):
    path, _ = backbone_file
    cfg = FinetuneConfig(steps=3, lr=0.0, label_fraction=0.4, seed=0)
    results = {}
    for init in (None, path):
        model = build_segmenter(seg2d.n_classes, MICRO_MIT, init=init, seed=5)
        base = evaluate(model, seg2d)
        _, rep = finetune(model, seg2d, cfg)
        assert rep.value == base
        results[init is None] = rep.value
    assert len(results) == 2


def test_finetune_improves_and_is_deterministic(seg2d):
    cfg = FinetuneConfig(steps=25, label_fraction=1.0, lr=3e-3, seed=0)
    runs = []
    for _ in range(2):
        model = build_segmenter(seg2d.n_classes, MICRO_MIT, seed=1)
        base = evaluate(model, seg2d)
        _, rep = finetune(model, seg2d, cfg)
        runs.append(rep.value)
    assert runs[0] == runs[1]
    assert runs[0] > base


def test_finetune_classification():
    ds = make_downstream_task("cls2d", 6, 6, seed=0, aug=AUG)
    model = build_classifier(2, MICRO_MIT)
    _, rep = finetune(model, ds, FinetuneConfig(task="cls2d", steps=2, label_fraction=1.0))
    assert rep.metric == "auc" and 0.0 <= rep.value <= 1.0


def test_finetune_rejects_head_mismatch(seg2d):
    with pytest.raises(ValueError, match="does not match task"):
        finetune(build_classifier(2, MICRO_MIT), seg2d, FinetuneConfig(steps=1))


def test_eval_report_roundtrip(tmp_path):
    reps = [EvalReport("seg3d", "dice", v, [s], [v], 0.2, "pretrained") for s, v in enumerate((0.4, 0.5, 0.6))]
    combined = EvalReport.combine(reps)
    assert combined.seeds == [0, 1, 2] and abs(combined.value - 0.5) < 1e-12
    path = combined.save(tmp_path / "r.json")
    assert EvalReport.load(path) == combined
