"""Deterministic synthetic dental phantoms with landmark and lesion ground truth.

Teeth are bright ellipsoids on parabolic arches, one arch per jaw. The volume
z axis points from the skull towards the chin: upper-jaw teeth sit at small
z with their root tips towards -z, lower-jaw teeth mirror that. A lesion is
a dark sphere centred on the root tip of its tooth (the tooth itself stays
bright), so every lesion voxel lies within the lesion radius of a root tip.

Landmark slots 0-15 are upper-jaw teeth and 16-31 lower-jaw teeth, each
ordered along the arch from the patient's right to left.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    JAWS,
    NUM_TEETH,
    CaseRecord,
    DatasetManifest,
    LandmarkSet,
    SegMask,
    Volume3D,
    save_cuboids,
    save_landmarks,
    save_manifest,
    save_volume,
)

TEETH_PER_JAW_MAX = NUM_TEETH // 2


@dataclass(frozen=True)
class PhantomConfig:
    volume_shape: tuple = (128, 128, 128)
    spacing: tuple = (0.8, 0.8, 0.8)
    jaws: tuple = ("upper", "lower")
    teeth_per_jaw: int = 16
    # arch: x = cx + half_width * t, y = cy + depth * (t**2 - 1), t in [-1, 1]
    arch_center: tuple = (64.0, 100.0)
    arch_half_width: float = 40.0
    arch_depth: float = 60.0
    occlusal_z: float = 64.0
    jaw_gap: float = 2.0
    tooth_semi_axes_min: tuple = (2.5, 2.5, 6.0)
    tooth_semi_axes_max: tuple = (3.2, 3.2, 8.0)
    missing_probability: float = 0.05
    lesion_prevalence: float = 0.10
    lesion_radius_range: tuple = (2.0, 3.5)
    noise_std: float = 0.05
    blur_sigma: float = 0.6
    background_intensity: float = 0.4
    tooth_intensity: float = 1.0
    lesion_intensity: float = 0.1
    center_jitter: float = 3.0
    arch_scale_jitter: float = 0.05
    arch_rotation_jitter: float = 0.08
    min_tooth_spacing: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lesion_prevalence <= 1.0:
            raise ValueError("lesion_prevalence must lie in [0, 1]")
        if not 0.0 <= self.missing_probability <= 1.0:
            raise ValueError("missing_probability must lie in [0, 1]")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 1:
            raise ValueError("volume_shape must be three positive ints")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if not 1 <= self.teeth_per_jaw <= TEETH_PER_JAW_MAX:
            raise ValueError(f"teeth_per_jaw must lie in [1, {TEETH_PER_JAW_MAX}]")
        if not self.jaws or any(j not in JAWS for j in self.jaws):
            raise ValueError(f"jaws must be drawn from {JAWS}")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ValueError("lesion_radius_range must satisfy 0 < lo <= hi")
        if np.any(np.asarray(self.tooth_semi_axes_min) > np.asarray(self.tooth_semi_axes_max)):
            raise ValueError("tooth_semi_axes_min must not exceed tooth_semi_axes_max")
        if not self.tooth_intensity > self.background_intensity > self.lesion_intensity:
            raise ValueError("intensities must satisfy tooth > background > lesion")

    def with_(self, **kw) -> "PhantomConfig":
        return replace(self, **kw)


def localization_phantom_config(seed: int = 0) -> PhantomConfig:
    """Single upper arch of 16 teeth in a 128x128x64 volume (halves cleanly to 64x64x32)."""
    return PhantomConfig(volume_shape=(128, 128, 64), jaws=("upper",), occlusal_z=40.0,
                         arch_center=(64.0, 96.0), arch_half_width=40.0, arch_depth=56.0, seed=seed)


def segmentation_phantom_config(seed: int = 0) -> PhantomConfig:
    """Both arches; crops around each tooth feed the segmenter."""
    return PhantomConfig(seed=seed)


@dataclass
class PhantomCase:
    image: Volume3D
    landmarks: LandmarkSet
    lesion: SegMask
    record: CaseRecord
    cuboids: dict = field(default_factory=dict)
    root_tips: np.ndarray = None
    semi_axes: np.ndarray = None

    def __iter__(self):
        return iter((self.image, self.landmarks, self.lesion, self.record))


def _slot(jaw: str, i: int) -> int:
    return i if jaw == "upper" else TEETH_PER_JAW_MAX + i


def _arch_positions(n: int, cx: float, cy: float, half_width: float, depth: float, angle: float) -> np.ndarray:
    """``n`` points equally spaced by arc length along the arch, right to left."""
    t = np.linspace(-1.0, 1.0, 2001)
    x = half_width * t
    y = depth * (t**2 - 1.0)
    seg = np.hypot(np.diff(x), np.diff(y))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = (np.arange(n) + 0.5) / n * s[-1]
    px = np.interp(targets, s, x)
    py = np.interp(targets, s, y)
    c, si = np.cos(angle), np.sin(angle)
    return np.stack([cx + c * px - si * py, cy + si * px + c * py], axis=1)


def _ellipsoid_box(center, axes, shape):
    lo = np.maximum(np.floor(center - axes - 1).astype(int), 0)
    hi = np.minimum(np.ceil(center + axes + 1).astype(int) + 1, shape)
    return lo, hi


def generate_case(cfg: PhantomConfig, case_seed: int, case_id: str | None = None) -> PhantomCase:
    """Render one phantom; identical ``(cfg, case_seed)`` give identical output."""
    rng = np.random.default_rng([int(cfg.seed), int(case_seed)])
    shape = tuple(int(s) for s in cfg.volume_shape)
    case_id = case_id or f"case_{int(case_seed):04d}"

    coords = np.full((NUM_TEETH, 3), -1.0)
    axes = np.zeros((NUM_TEETH, 3))
    tips = np.full((NUM_TEETH, 3), -1.0)
    jaw_label = ["upper"] * TEETH_PER_JAW_MAX + ["lower"] * TEETH_PER_JAW_MAX
    has_lesion = [False] * NUM_TEETH
    lesion_radius = np.zeros(NUM_TEETH)

    cx = cfg.arch_center[0] + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    cy = cfg.arch_center[1] + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    for jaw in JAWS:
        if jaw not in cfg.jaws:
            continue
        scale = 1.0 + rng.uniform(-cfg.arch_scale_jitter, cfg.arch_scale_jitter)
        angle = rng.uniform(-cfg.arch_rotation_jitter, cfg.arch_rotation_jitter)
        pos = _arch_positions(cfg.teeth_per_jaw, cx, cy, cfg.arch_half_width * scale, cfg.arch_depth * scale, angle)
        for i in range(cfg.teeth_per_jaw):
            ax = rng.uniform(cfg.tooth_semi_axes_min, cfg.tooth_semi_axes_max)
            missing = rng.random() < cfg.missing_probability
            lesion = rng.random() < cfg.lesion_prevalence
            r = rng.uniform(*cfg.lesion_radius_range)
            dz = rng.uniform(-1.0, 1.0)
            if missing:
                continue
            k = _slot(jaw, i)
            sign = -1.0 if jaw == "upper" else 1.0  # direction from crown to root
            z = cfg.occlusal_z + sign * (ax[2] + 0.5 * cfg.jaw_gap) + dz
            coords[k] = (pos[i, 0], pos[i, 1], z)
            axes[k] = ax
            tips[k] = coords[k] + (0.0, 0.0, sign * ax[2])
            has_lesion[k] = bool(lesion)
            lesion_radius[k] = r if lesion else 0.0

    present = np.flatnonzero(np.any(coords != -1.0, axis=1))
    if len(present) > 1:
        p = coords[present]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() <= cfg.min_tooth_spacing:
            raise ValueError(f"infeasible phantom: teeth {d.min():.2f} voxels apart, "
                             f"minimum spacing {cfg.min_tooth_spacing}")
    upper = np.asarray(shape, dtype=np.float64)
    for k in present:
        if np.any(coords[k] - axes[k] < 0) or np.any(coords[k] + axes[k] > upper - 1):
            raise ValueError(f"infeasible phantom: tooth {k} leaves the volume")

    field_ = np.full(shape, cfg.background_intensity, dtype=np.float32)
    tooth_mask = np.zeros(shape, dtype=bool)
    lesion_mask = np.zeros(shape, dtype=bool)
    for k in present:
        lo, hi = _ellipsoid_box(coords[k], axes[k], shape)
        g = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
        q = (((g - coords[k]) / axes[k]) ** 2).sum(-1) <= 1.0
        tooth_mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= q
    for k in present:
        if not has_lesion[k]:
            continue
        r = lesion_radius[k]
        lo, hi = _ellipsoid_box(tips[k], np.full(3, r), shape)
        g = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), axis=-1)
        q = ((g - tips[k]) ** 2).sum(-1) <= r * r
        lesion_mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= q
    lesion_mask &= ~tooth_mask
    field_[lesion_mask] = cfg.lesion_intensity
    field_[tooth_mask] = cfg.tooth_intensity
    if cfg.blur_sigma > 0:
        field_ = ndimage.gaussian_filter(field_, cfg.blur_sigma)
    if cfg.noise_std > 0:
        field_ = field_ + rng.normal(0.0, cfg.noise_std, size=shape).astype(np.float32)

    cuboids = {}
    for k in present:
        # tooth bounding box, extended past the root tip to cover the periapical region
        sign = np.sign(tips[k][2] - coords[k][2])
        ext = np.array([0.0, 0.0, sign * 2.0 * cfg.lesion_radius_range[1]])
        lo = coords[k] - axes[k] + np.minimum(ext, 0)
        hi = coords[k] + axes[k] + np.maximum(ext, 0)
        corners = np.array([[a, b, c] for a in (lo[0], hi[0]) for b in (lo[1], hi[1]) for c in (lo[2], hi[2])])
        cuboids[int(k)] = corners

    record = CaseRecord(
        image_path=f"images/{case_id}.mha",
        landmarks_path=f"landmarks/{case_id}.csv",
        lesion_mask_path=f"masks/{case_id}.mha",
        jaw_label=tuple(jaw_label),
        has_lesion=tuple(has_lesion),
        cuboids_path=f"cuboids/{case_id}.json",
        case_id=case_id,
    )
    return PhantomCase(
        Volume3D(field_, cfg.spacing),
        LandmarkSet(coords, shape),
        SegMask.from_bool(lesion_mask, cfg.spacing),
        record,
        cuboids,
        tips,
        axes,
    )


def write_case(case: PhantomCase, root) -> None:
    root = Path(root)
    rec = case.record
    for rel in (rec.image_path, rec.landmarks_path, rec.lesion_mask_path, rec.cuboids_path):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    save_volume(case.image, root / rec.image_path)
    save_landmarks(case.landmarks, root / rec.landmarks_path)
    save_volume(case.lesion, root / rec.lesion_mask_path)
    save_cuboids(case.cuboids, root / rec.cuboids_path)


def generate_dataset(cfg: PhantomConfig, n_cases: int, out_dir=None, start: int = 0) -> DatasetManifest:
    """Generate ``n_cases`` phantoms; when ``out_dir`` is given, write them plus ``manifest.jsonl``."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    records = []
    root = Path(out_dir) if out_dir is not None else None
    for i in range(start, start + n_cases):
        case = generate_case(cfg, i)
        if root is not None:
            write_case(case, root)
        records.append(case.record)
    manifest = DatasetManifest(records, root)
    if root is not None:
        save_manifest(manifest, root / "manifest.jsonl")
        (root / "phantom_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    return manifest


def load_phantom_config(path) -> PhantomConfig:
    d = json.loads(Path(path).read_text())
    return PhantomConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
