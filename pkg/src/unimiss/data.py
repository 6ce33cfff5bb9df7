"""Seeded synthetic phantoms, their 2D projections, the two-view augmentation and downstream tasks."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import AugmentConfig, DataConfig, PhantomConfig, TASK_KINDS
from .mit import DimTag

# (center z, y, x), (radius z, y, x) in normalized [-1, 1] coordinates
ORGAN_TEMPLATES = [
    ((0.0, 0.05, -0.45), (0.70, 0.40, 0.28)),
    ((0.0, 0.05, 0.45), (0.70, 0.40, 0.28)),
    ((0.0, -0.55, 0.0), (0.55, 0.22, 0.22)),
    ((0.0, 0.60, -0.05), (0.45, 0.22, 0.40)),
    ((-0.45, 0.05, 0.0), (0.30, 0.25, 0.14)),
    ((0.45, 0.05, 0.0), (0.30, 0.25, 0.14)),
    ((0.0, -0.20, -0.70), (0.50, 0.15, 0.12)),
    ((0.0, -0.20, 0.70), (0.50, 0.15, 0.12)),
]
# organ k draws its mean intensity from band k
INTENSITY_BANDS = [(0.36 + 0.07 * k, 0.40 + 0.07 * k) for k in range(8)]
LESION_INTENSITY = 1.0
EDGE_SOFTNESS = 0.08

POOL_2D_OFFSET = 1_000_000
POOL_3D_OFFSET = 2_000_000
TASK_OFFSET = 10_000_000


@dataclass
class Phantom3D:
    volume: np.ndarray  # [D, H, W] float32 in [0, 1]
    labelmap: np.ndarray  # organs 1..n, lesion n + 1
    seed: int
    organ_map: np.ndarray  # organs only; organ id k always comes from template k
    n_organs: int
    has_lesion: bool


def _grid(shape):
    axes = [np.linspace(-1.0, 1.0, n, dtype=np.float32) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid_distance(shape, center, radii) -> np.ndarray:
    """Normalized ellipsoid radius: < 1 inside, 1 on the surface."""
    grid = _grid(shape)
    return np.sqrt(sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)))


def render_ellipsoid(shape, center, radii, intensity: float = 1.0, background: float = 0.0) -> np.ndarray:
    d = ellipsoid_distance(shape, center, radii)
    w = 1.0 / (1.0 + np.exp(-(1.0 - d) / EDGE_SOFTNESS))
    return (background * (1.0 - w) + intensity * w).astype(np.float32)


def _background(rng: np.random.Generator, shape) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 4))
    field_ = ndimage.zoom(coarse, [s / 4 for s in shape], order=1)[: shape[0], : shape[1], : shape[2]]
    body = render_ellipsoid(shape, (0.0, 0.0, 0.0), (1.1, 0.95, 0.97), intensity=0.18, background=0.03)
    return body + 0.03 * field_


def gen_volume(seed: int, cfg: PhantomConfig | None = None, lesion: bool | None = None) -> Phantom3D:
    """Background field, 3-8 soft-edged organ ellipsoids and an optional bright lesion.

    ``lesion`` forces presence or absence; otherwise it is drawn with ``cfg.lesion_prob``.
    """
    cfg = PhantomConfig() if cfg is None else cfg
    cfg.validate()
    shape = tuple(cfg.shape)
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_organs, cfg.max_organs + 1))
    has_lesion = bool(rng.random() < cfg.lesion_prob) if lesion is None else bool(lesion)
    base = _background(rng, shape)

    # redraw jitter until every organ keeps visible voxels
    for _ in range(50):
        vol = base.copy()
        organ_map = np.zeros(shape, dtype=np.int64)
        geometry = []
        for k in range(n):
            c0, r0 = ORGAN_TEMPLATES[k]
            c = np.asarray(c0) + rng.uniform(-0.08, 0.08, size=3)
            r = np.asarray(r0) * rng.uniform(0.85, 1.15, size=3)
            lo, hi = INTENSITY_BANDS[k]
            level = rng.uniform(lo, hi)
            d = ellipsoid_distance(shape, c, r)
            w = 1.0 / (1.0 + np.exp(-(1.0 - d) / EDGE_SOFTNESS))
            vol = vol * (1.0 - w) + level * w
            organ_map[d < 1.0] = k + 1
            geometry.append((c, r))
        if len(np.unique(organ_map)) == n + 1:
            break
    else:
        raise RuntimeError(f"seed {seed}: could not place {n} organs without occlusion")

    labelmap = organ_map.copy()
    if has_lesion:
        for _ in range(50):
            host = int(rng.integers(n))
            c, r = geometry[host]
            lc = c + rng.uniform(-0.35, 0.35, size=3) * r
            lr = rng.uniform(0.15, 0.22, size=3)
            d = ellipsoid_distance(shape, lc, lr)
            if (d < 1.0).any():
                break
        w = 1.0 / (1.0 + np.exp(-(1.0 - d) / EDGE_SOFTNESS))
        vol = vol * (1.0 - w) + LESION_INTENSITY * w
        labelmap[d < 1.0] = n + 1

    if cfg.noise > 0:
        vol = vol + rng.normal(0.0, cfg.noise, size=shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return Phantom3D(vol, labelmap, seed, organ_map, n, has_lesion)


def project_to_2d(vol, axis: str = "depth") -> np.ndarray:
    """Attenuation-style mean projection along depth, contrast-stretched to [0, 1]."""
    if axis != "depth":
        raise ValueError(f"only depth projection is supported, got axis={axis!r}")
    arr = vol.volume if isinstance(vol, Phantom3D) else np.asarray(vol)
    img = arr.mean(axis=0)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo > 1e-6:
        img = (img - lo) / (hi - lo)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def project_labels(labelmap: np.ndarray, n_classes: int) -> np.ndarray:
    """Per pixel, the foreground label with the longest path through the depth axis."""
    counts = np.stack([(labelmap == k).sum(axis=0) for k in range(1, n_classes)])
    mask = counts.argmax(axis=0) + 1
    mask[counts.max(axis=0) == 0] = 0
    return mask.astype(np.int64)


# ---------------------------------------------------------------------------
# pretraining pools


def pool_seeds(pool: str, n: int, run_seed: int = 0) -> list[int]:
    offset = {"2d": POOL_2D_OFFSET, "3d": POOL_3D_OFFSET}[pool]
    return [offset + run_seed * 100_000 + i for i in range(n)]


def cache_dir() -> Path | None:
    root = os.environ.get("UNIMISS_CACHE")
    return Path(root) if root else None


def _load_cached(pool: str, seed: int):
    from .checkpoint import load_arrays

    root = cache_dir()
    if root is None:
        return None
    path = root / pool / f"{seed}.arr"
    if not path.exists():
        return None
    arrays, _ = load_arrays(path, expected_tag="unimiss-sample-v1")
    return arrays["x"]


def pool_sample(pool: str, seed: int, cfg: PhantomConfig) -> np.ndarray:
    cached = _load_cached(pool, seed)
    if cached is not None:
        return cached
    phantom = gen_volume(seed, cfg)
    return project_to_2d(phantom) if pool == "2d" else phantom.volume


def write_pool_cache(root: str | Path, data_cfg: DataConfig, run_seed: int = 0) -> dict[str, int]:
    """Materialize both pretraining pools as ``<pool>/<seed>.arr`` files."""
    from .checkpoint import save_arrays

    root = Path(root)
    counts = {}
    for pool, n in (("2d", data_cfg.n_2d), ("3d", data_cfg.n_3d)):
        (root / pool).mkdir(parents=True, exist_ok=True)
        for seed in pool_seeds(pool, n, run_seed):
            phantom = gen_volume(seed, data_cfg.phantom)
            x = project_to_2d(phantom) if pool == "2d" else phantom.volume
            save_arrays(root / pool / f"{seed}.arr", {"x": x}, {"pool": pool, "seed": seed},
                        tag="unimiss-sample-v1")
        counts[pool] = n
    return counts


@dataclass
class PretrainPools:
    images: list[np.ndarray]
    volumes: list[np.ndarray]
    seeds_2d: list[int]
    seeds_3d: list[int]


def build_pools(data_cfg: DataConfig, run_seed: int = 0) -> PretrainPools:
    s2 = pool_seeds("2d", data_cfg.n_2d, run_seed)
    s3 = pool_seeds("3d", data_cfg.n_3d, run_seed)
    images = [pool_sample("2d", s, data_cfg.phantom) for s in s2]
    volumes = [pool_sample("3d", s, data_cfg.phantom) for s in s3]
    return PretrainPools(images, volumes, s2, s3)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    dim_tag: DimTag
    aug_seed: int

    @property
    def slices1(self) -> list[np.ndarray]:
        return _slices(self.view1, self.dim_tag)

    @property
    def slices2(self) -> list[np.ndarray]:
        return _slices(self.view2, self.dim_tag)


def _slices(view: np.ndarray, dim_tag: DimTag) -> list[np.ndarray]:
    if dim_tag is not DimTag.D3:
        raise ValueError("slice stacks exist only for 3D views")
    return [view[i] for i in range(view.shape[0])]


def resize(x: np.ndarray, size) -> np.ndarray:
    """Linear (bi/tri) resize to ``size``; identity when shapes already match."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape) == size:
        return x.astype(np.float32, copy=True)
    mode = "bilinear" if x.ndim == 2 else "trilinear"
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None, None]
    return F.interpolate(t, size=size, mode=mode, align_corners=False)[0, 0].numpy()


def _one_view(x: np.ndarray, patch, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(*cfg.crop_scale)
    crop = [max(1, min(e, int(round(scale * e)))) for e in x.shape]
    starts = [int(rng.integers(0, e - c + 1)) for e, c in zip(x.shape, crop)]
    region = x[tuple(slice(s, s + c) for s, c in zip(starts, crop))]
    v = resize(region, patch)
    for axis in range(v.ndim):
        if rng.random() < cfg.flip_prob:
            v = np.flip(v, axis=axis)
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(-cfg.brightness, cfg.brightness)
        c = rng.uniform(1.0 - cfg.contrast, 1.0 + cfg.contrast)
        m = v.mean()
        v = (v - m) * c + m + b
    if rng.random() < cfg.blur_prob:
        v = ndimage.gaussian_filter(v, sigma=rng.uniform(*cfg.blur_sigma))
    if rng.random() < cfg.noise_prob:
        v = v + rng.normal(0.0, cfg.noise_std, size=v.shape)
    return np.ascontiguousarray(np.clip(v, 0.0, 1.0), dtype=np.float32)


def augment(x: np.ndarray, seed: int, dim_tag: DimTag | str, cfg: AugmentConfig | None = None) -> ViewPair:
    """Two independently sampled crop/zoom, flip, jitter, blur and noise compositions of ``x``."""
    cfg = AugmentConfig() if cfg is None else cfg
    dim_tag = DimTag(dim_tag)
    patch = tuple(cfg.patch_2d if dim_tag is DimTag.D2 else cfg.patch_3d)
    if x.ndim != dim_tag.ndim:
        raise ValueError(f"{dim_tag} augmentation expects a {dim_tag.ndim}-d array, got shape {x.shape}")
    if any(p > e for p, e in zip(patch, x.shape)):
        raise ValueError(f"patch {patch} larger than source {x.shape}")
    rng = np.random.default_rng(seed)
    v1 = _one_view(x, patch, cfg, rng)
    v2 = _one_view(x, patch, cfg, rng)
    return ViewPair(v1, v2, dim_tag, seed)


def collate(pairs: list[ViewPair]) -> tuple[torch.Tensor, torch.Tensor]:
    v1 = torch.from_numpy(np.stack([p.view1 for p in pairs]))[:, None]
    v2 = torch.from_numpy(np.stack([p.view2 for p in pairs]))[:, None]
    return v1, v2


# ---------------------------------------------------------------------------
# downstream tasks


@dataclass
class TaskDataset:
    kind: str
    dim_tag: DimTag
    n_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_seeds: list[int] = field(default_factory=list)
    test_seeds: list[int] = field(default_factory=list)


def task_seeds(kind: str, n_train: int, n_test: int, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint train/test seed ranges per (task, dataset seed)."""
    if n_train > 5000 or n_test > 5000:
        raise ValueError("at most 5000 samples per split")
    base = TASK_OFFSET + TASK_KINDS.index(kind) * 1_000_000 + seed * 10_000
    return [base + i for i in range(n_train)], [base + 5000 + i for i in range(n_test)]


def _task_phantom_cfg(kind: str, aug: AugmentConfig, phantom: PhantomConfig) -> PhantomConfig:
    if kind.endswith("3d"):
        shape = tuple(aug.patch_3d)
    else:
        shape = (phantom.shape[0], *aug.patch_2d)
    return PhantomConfig(shape=shape, min_organs=phantom.min_organs, max_organs=phantom.max_organs,
                         noise=phantom.noise, lesion_prob=phantom.lesion_prob)


def _task_sample(kind: str, seed: int, index: int, cfg: PhantomConfig, n_seg_classes: int):
    if kind.startswith("cls"):
        label = index % 2
        ph = gen_volume(seed, cfg, lesion=bool(label))
        x = ph.volume if kind == "cls3d" else project_to_2d(ph)
        return x, np.int64(label)
    ph = gen_volume(seed, cfg)
    if kind == "seg3d":
        return ph.volume, ph.organ_map
    return project_to_2d(ph), project_labels(ph.organ_map, n_seg_classes)


def make_downstream_task(kind: str, n_train: int, n_test: int, seed: int,
                         aug: AugmentConfig | None = None, phantom: PhantomConfig | None = None) -> TaskDataset:
    """Labeled synthetic dataset: organ segmentation or lesion classification, in 2D or 3D."""
    if kind not in TASK_KINDS:
        raise ValueError(f"unknown task {kind!r}; choose from {TASK_KINDS}")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    aug = AugmentConfig() if aug is None else aug
    phantom = PhantomConfig() if phantom is None else phantom
    cfg = _task_phantom_cfg(kind, aug, phantom)
    n_classes = 2 if kind.startswith("cls") else phantom.max_organs + 1
    train_seeds, test_seeds = task_seeds(kind, n_train, n_test, seed)

    def build(seeds):
        xs, ys = zip(*(_task_sample(kind, s, i, cfg, n_classes) for i, s in enumerate(seeds)))
        return np.stack(xs).astype(np.float32), np.stack(ys)

    tx, ty = build(train_seeds)
    vx, vy = build(test_seeds)
    dim_tag = DimTag.D3 if kind.endswith("3d") else DimTag.D2
    return TaskDataset(kind, dim_tag, n_classes, tx, ty, vx, vy, train_seeds, test_seeds)


def organ_background_gap(phantom: Phantom3D) -> float:
    """Mean organ intensity minus mean background intensity."""
    organ = phantom.organ_map > 0
    return float(phantom.volume[organ].mean() - phantom.volume[phantom.labelmap == 0].mean())
