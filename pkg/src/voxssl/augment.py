"""Multi-view augmentation for volumetric self-distillation.

Each source volume yields 2 global crops and L smaller local crops. For
every global crop the teacher sees a mildly intensity-jittered clean copy
and the student a strongly jittered copy plus a patch-aligned mask
descriptor (the mask itself is applied lazily by ``apply_mask``). Geometric
crop and flip choices are shared between the teacher and student copies of
a global view so patch tokens stay positionally aligned.

Pure functions of (volume, config, seed); parallel across volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volio import resize_trilinear


@dataclass(frozen=True)
class AugmentConfig:
    global_extent: tuple[int, int, int] = (16, 16, 16)
    local_extent: tuple[int, int, int] = (8, 8, 8)
    n_local: int = 4
    patch_extent: int = 4
    global_frac: tuple[float, float] = (0.75, 1.0)
    local_frac: tuple[float, float] = (0.3, 0.5)
    flip_prob: float = 0.5
    mask_ratio: float = 0.5
    mild_scale: tuple[float, float] = (0.95, 1.05)
    mild_shift: tuple[float, float] = (-0.02, 0.02)
    strong_scale: tuple[float, float] = (0.8, 1.2)
    strong_shift: tuple[float, float] = (-0.1, 0.1)
    strong_gamma: tuple[float, float] = (0.7, 1.5)

    def __post_init__(self):
        if any(e % self.patch_extent for e in self.global_extent):
            raise ValueError(f"global extent {self.global_extent} not divisible by patch {self.patch_extent}")
        if any(e % self.patch_extent for e in self.local_extent):
            raise ValueError(f"local extent {self.local_extent} not divisible by patch {self.patch_extent}")
        if not all(l < g for l, g in zip(self.local_extent, self.global_extent)):
            raise ValueError("local extent must be smaller than global extent")
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"mask ratio must be in (0,1), got {self.mask_ratio}")

    @property
    def n_views(self) -> int:
        return 2 + self.n_local

    def identity(self) -> "AugmentConfig":
        """Copy with all stochastic ranges collapsed (whole-volume crops, no jitter)."""
        from dataclasses import replace
        return replace(self, global_frac=(1.0, 1.0), flip_prob=0.0,
                       mild_scale=(1.0, 1.0), mild_shift=(0.0, 0.0),
                       strong_scale=(1.0, 1.0), strong_shift=(0.0, 0.0),
                       strong_gamma=(1.0, 1.0))


@dataclass(frozen=True)
class MaskDescriptor:
    """Which patches of a view get replaced, and how.

    ``fill_modes[i]`` is 0 (zeros) or 1 (unit-gaussian noise, clamped) for
    masked patch ``indices[i]``; indices are row-major over ``grid``.
    """

    grid: tuple[int, int, int]
    indices: np.ndarray
    fill_modes: np.ndarray
    noise_seed: int

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.grid))


@dataclass
class GlobalView:
    teacher: np.ndarray      # mild intensity, never masked
    student: np.ndarray      # strong intensity, mask applied separately
    mask: MaskDescriptor
    crop_box: tuple[tuple[int, int], ...]
    flips: tuple[bool, bool, bool]
    intensity: dict = field(default_factory=dict)


@dataclass
class ViewSet:
    global_views: list[GlobalView]
    local_views: list[np.ndarray]
    seed: int

    @property
    def n_views(self) -> int:
        return len(self.global_views) + len(self.local_views)


def sample_mask(grid: tuple[int, int, int], ratio: float,
                seed: int | np.random.Generator) -> MaskDescriptor:
    """Uniform sample (no replacement) of floor(ratio * patch count) patches."""
    count = int(np.prod(grid))
    if count == 0:
        raise ValueError("cannot mask a view with zero patches")
    if not 0 < ratio < 1:
        raise ValueError(f"mask ratio must be in (0,1), got {ratio}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_masked = int(np.floor(ratio * count))
    indices = np.sort(rng.choice(count, size=n_masked, replace=False))
    fill_modes = rng.integers(0, 2, size=n_masked)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return MaskDescriptor(grid=tuple(grid), indices=indices, fill_modes=fill_modes,
                          noise_seed=noise_seed)


def apply_mask(view: np.ndarray, m: MaskDescriptor) -> tuple[np.ndarray, np.ndarray]:
    """Replace masked patches wholly with zeros or clamped gaussian noise.

    Returns the masked copy and a boolean voxel mask marking exactly the
    replaced voxels. Unmasked voxels are bit-identical to the input.
    """
    p = [e // g for e, g in zip(view.shape, m.grid)]
    if tuple(g * s for g, s in zip(m.grid, p)) != tuple(view.shape):
        raise ValueError(f"mask grid {m.grid} does not tile view extent {view.shape}")
    out = view.copy()
    voxel_mask = np.zeros(view.shape, dtype=bool)
    rng = np.random.default_rng(m.noise_seed)
    for idx, mode in zip(m.indices, m.fill_modes):
        ix, rem = divmod(int(idx), m.grid[1] * m.grid[2])
        iy, iz = divmod(rem, m.grid[2])
        sl = (slice(ix * p[0], (ix + 1) * p[0]),
              slice(iy * p[1], (iy + 1) * p[1]),
              slice(iz * p[2], (iz + 1) * p[2]))
        if mode == 0:
            out[sl] = 0.0
        else:
            out[sl] = np.clip(rng.standard_normal(p), 0.0, 1.0).astype(view.dtype)
        voxel_mask[sl] = True
    return out, voxel_mask


def _sample_crop(rng: np.random.Generator, extent: tuple[int, ...],
                 frac: tuple[float, float]) -> tuple[tuple[int, int], ...]:
    box = []
    for e in extent:
        lo = min(int(np.ceil(frac[0] * e)), e)
        hi = min(int(np.floor(frac[1] * e)), e)
        if lo < 1 or hi < lo:
            raise ValueError(f"crop fraction {frac} unusable for extent {e}")
        side = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, e - side + 1))
        box.append((start, start + side))
    return tuple(box)


def _crop(data: np.ndarray, box) -> np.ndarray:
    return data[tuple(slice(a, b) for a, b in box)]


def _intensity(rng: np.random.Generator, data: np.ndarray, scale, shift,
               gamma=None) -> tuple[np.ndarray, dict]:
    rec = {}
    out = data
    if gamma is not None:
        g = rng.uniform(*gamma)
        rec["gamma"] = g
        if g != 1.0:
            out = np.clip(out, 0.0, 1.0) ** np.asarray(g, dtype=out.dtype)
    s = rng.uniform(*scale)
    b = rng.uniform(*shift)
    rec["scale"], rec["shift"] = s, b
    if s != 1.0 or b != 0.0:
        out = out * out.dtype.type(s) + out.dtype.type(b)
    out = np.clip(out, 0.0, 1.0)
    return out, rec


def make_views(volume: np.ndarray, cfg: AugmentConfig, seed: int) -> ViewSet:
    """Build the deterministic 2-global + L-local view set for one volume."""
    if any(c > e for c, e in zip(cfg.global_extent, volume.shape)):
        raise ValueError(f"global extent {cfg.global_extent} exceeds volume extent {volume.shape}")
    rng = np.random.default_rng(seed)
    grid = tuple(e // cfg.patch_extent for e in cfg.global_extent)

    global_views = []
    for _ in range(2):
        box = _sample_crop(rng, volume.shape, cfg.global_frac)
        crop = _crop(volume, box)
        flips = tuple(bool(rng.random() < cfg.flip_prob) for _ in range(3))
        for ax, f in enumerate(flips):
            if f:
                crop = np.flip(crop, axis=ax)
        crop = resize_trilinear(np.ascontiguousarray(crop), cfg.global_extent)
        teacher, mild_rec = _intensity(rng, crop, cfg.mild_scale, cfg.mild_shift)
        student, strong_rec = _intensity(rng, crop, cfg.strong_scale, cfg.strong_shift,
                                         cfg.strong_gamma)
        mask = sample_mask(grid, cfg.mask_ratio, rng)
        global_views.append(GlobalView(teacher=teacher, student=student, mask=mask,
                                       crop_box=box, flips=flips,
                                       intensity={"mild": mild_rec, "strong": strong_rec}))

    local_views = []
    for _ in range(cfg.n_local):
        box = _sample_crop(rng, volume.shape, cfg.local_frac)
        crop = resize_trilinear(np.ascontiguousarray(_crop(volume, box)), cfg.local_extent)
        local_views.append(crop)

    return ViewSet(global_views=global_views, local_views=local_views, seed=seed)
