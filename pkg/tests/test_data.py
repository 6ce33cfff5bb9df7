import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from unimiss.checkpoint import load_arrays
from unimiss.config import AugmentConfig, DataConfig, PhantomConfig
from unimiss.data import (augment, build_pools, gen_volume, make_downstream_task, organ_background_gap,
                          pool_seeds, project_to_2d, render_ellipsoid, resize, task_seeds, write_pool_cache)
from unimiss.mit import DimTag

SMALL = PhantomConfig(shape=(16, 32, 32))
IDENTITY_AUG = AugmentConfig(patch_2d=(32, 32), patch_3d=(16, 32, 32), crop_scale=(1.0, 1.0), flip_prob=0.0,
                             jitter_prob=0.0, blur_prob=0.0, noise_prob=0.0)


def test_same_seed_bit_identical():
    a, b = gen_volume(7, SMALL), gen_volume(7, SMALL)
    assert np.array_equal(a.volume, b.volume) and np.array_equal(a.labelmap, b.labelmap)
    assert not np.array_equal(a.volume, gen_volume(8, SMALL).volume)


@pytest.mark.parametrize("seed", range(10))
def test_labels_contiguous(seed):
    ph = gen_volume(seed, SMALL)
    ids = np.unique(ph.labelmap)
    assert np.array_equal(ids, np.arange(ids.max() + 1))
    assert ids.max() >= 3
    assert ph.volume.dtype == np.float32 and 0.0 <= ph.volume.min() and ph.volume.max() <= 1.0


def test_lesion_flag_controls_lesion_label():
    pos, neg = gen_volume(3, SMALL, lesion=True), gen_volume(3, SMALL, lesion=False)
    assert (pos.labelmap == pos.n_organs + 1).any()
    assert not (neg.labelmap == neg.n_organs + 1).any()


def test_organ_background_gap_over_100_seeds():
    gaps = [organ_background_gap(gen_volume(s)) for s in range(100)]
    assert min(gaps) >= 0.1


def test_projection_of_constant_volume():
    img = project_to_2d(np.full((8, 12, 10), 0.37, dtype=np.float32))
    assert img.shape == (12, 10)
    np.testing.assert_allclose(img, 0.37, atol=1e-7)


@pytest.mark.parametrize("center", [(0.0, 0.0, 0.0), (0.2, -0.3, 0.4)])
def test_projection_peak_at_ellipsoid_center(center):
    shape = (16, 48, 40)
    vol = render_ellipsoid(shape, center, (0.4, 0.3, 0.35))
    img = project_to_2d(vol)
    assert img.shape == shape[1:]
    peak = np.unravel_index(np.argmax(img), img.shape)
    # analytic pixel coordinates of the center on the [-1, 1] grid
    expected = [(c + 1) / 2 * (n - 1) for c, n in zip(center[1:], shape[1:])]
    assert all(abs(p - e) <= 2 for p, e in zip(peak, expected))


def test_projection_rejects_other_axes():
    with pytest.raises(ValueError):
        project_to_2d(np.zeros((2, 2, 2)), axis="height")


@pytest.mark.parametrize("dim_tag, shape", [(DimTag.D2, (32, 32)), (DimTag.D3, (16, 32, 32))])
def test_identity_augmentation(dim_tag, shape):
    x = np.random.default_rng(0).random(shape, dtype=np.float32)
    pair = augment(x, 5, dim_tag, IDENTITY_AUG)
    assert np.array_equal(pair.view1, pair.view2)
    assert np.array_equal(pair.view1, resize(x, shape))


def test_identity_augmentation_with_resize():
    x = np.random.default_rng(0).random((48, 48), dtype=np.float32)
    pair = augment(x, 5, DimTag.D2, IDENTITY_AUG)
    assert np.array_equal(pair.view1, pair.view2)
    assert np.array_equal(pair.view1, resize(x, (32, 32)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_deterministic_and_in_range(seed):
    x = gen_volume(1, SMALL).volume
    cfg = AugmentConfig(patch_3d=(16, 16, 16))
    a, b = augment(x, seed, "3d", cfg), augment(x, seed, "3d", cfg)
    assert np.array_equal(a.view1, b.view1) and np.array_equal(a.view2, b.view2)
    assert a.view1.shape == (16, 16, 16)
    assert a.view1.min() >= 0.0 and a.view1.max() <= 1.0


def test_views_differ_under_default_augmentation():
    x = gen_volume(2, SMALL).volume
    pair = augment(x, 11, "3d", AugmentConfig(patch_3d=(16, 16, 16)))
    assert not np.array_equal(pair.view1, pair.view2)


def test_slices_reassemble_view():
    pair = augment(gen_volume(2, SMALL).volume, 3, "3d", AugmentConfig(patch_3d=(16, 16, 16)))
    assert len(pair.slices1) == 16
    assert np.array_equal(np.stack(pair.slices1), pair.view1)
    with pytest.raises(ValueError):
        augment(np.zeros((32, 32), np.float32), 0, "2d", AugmentConfig(patch_2d=(32, 32))).slices1


def test_full_scale_patch_sizes_accepted():
    cfg = AugmentConfig(patch_2d=(224, 224), patch_3d=(16, 96, 96))
    cfg.validate()
    pair = augment(np.zeros((256, 256), np.float32), 0, "2d", cfg)
    assert pair.view1.shape == (224, 224)
    pair = augment(np.zeros((24, 112, 112), np.float32), 0, "3d", cfg)
    assert pair.view1.shape == (16, 96, 96)


def test_augment_rejects_oversized_patch():
    with pytest.raises(ValueError, match="larger than source"):
        augment(np.zeros((16, 16), np.float32), 0, "2d", AugmentConfig(patch_2d=(32, 32)))
    with pytest.raises(ValueError):
        augment(np.zeros((16, 16), np.float32), 0, "3d")


@pytest.mark.parametrize("kind", ["seg2d", "seg3d"])
def test_seg_targets_have_two_classes(kind):
    aug = AugmentConfig(patch_2d=(32, 32), patch_3d=(16, 32, 32))
    ds = make_downstream_task(kind, 6, 4, seed=0, aug=aug)
    assert ds.n_classes == 9
    assert all(len(np.unique(y)) >= 2 for y in np.concatenate([ds.train_y, ds.test_y]))
    assert ds.train_x.shape[1:] == ((32, 32) if kind == "seg2d" else (16, 32, 32))
    assert ds.train_y.shape == ds.train_x.shape


def test_cls_balance_over_200_samples():
    aug = AugmentConfig(patch_2d=(32, 32))
    ds = make_downstream_task("cls2d", 100, 100, seed=0, aug=aug)
    frac = np.concatenate([ds.train_y, ds.test_y]).mean()
    assert 0.4 <= frac <= 0.6


def test_train_test_seeds_disjoint():
    for kind in ("seg3d", "cls3d", "seg2d", "cls2d"):
        tr, te = task_seeds(kind, 40, 20, seed=2)
        assert not set(tr) & set(te)
    tr0, te0 = task_seeds("seg3d", 40, 20, 0)
    tr1, te1 = task_seeds("seg3d", 40, 20, 1)
    assert not (set(tr0) | set(te0)) & (set(tr1) | set(te1))
    # pretraining pools never overlap downstream data
    assert not (set(pool_seeds("2d", 512)) | set(pool_seeds("3d", 64))) & set(tr0)


def test_unknown_task_rejected():
    with pytest.raises(ValueError, match="unknown task"):
        make_downstream_task("det3d", 2, 2, 0)


def test_pool_cache_roundtrip(tmp_path, monkeypatch):
    cfg = DataConfig(n_2d=3, n_3d=2, phantom=SMALL)
    assert write_pool_cache(tmp_path, cfg) == {"2d": 3, "3d": 2}
    arrays, meta = load_arrays(tmp_path / "3d" / f"{pool_seeds('3d', 1)[0]}.arr", "unimiss-sample-v1")
    assert arrays["x"].shape == (16, 32, 32)
    fresh = build_pools(cfg)
    monkeypatch.setenv("UNIMISS_CACHE", str(tmp_path))
    cached = build_pools(cfg)
    assert all(np.array_equal(a, b) for a, b in zip(fresh.images + fresh.volumes, cached.images + cached.volumes))


def test_resize_matches_torch_interpolate():
    x = np.random.default_rng(1).random((10, 12), dtype=np.float32)
    ref = torch.nn.functional.interpolate(torch.from_numpy(x)[None, None], size=(6, 6), mode="bilinear",
                                          align_corners=False)[0, 0].numpy()
    assert np.array_equal(resize(x, (6, 6)), ref)
