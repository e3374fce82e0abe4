"""Resampling, intensity handling, augmentation and per-tooth crop extraction.

Geometry convention: transforms map *output* voxel coordinates to *input*
voxel coordinates (the sampling direction), and rotations/scalings act
about the volume center ``(n - 1) / 2`` unless a center is given.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import JAWS, LandmarkSet, SegMask, Volume3D, load_mask, load_volume, save_volume

CROP_SHAPE = (64, 64, 64)
CROP_SPACING = (0.4, 0.4, 0.4)
JAW_OFFSETS = {"upper": (0.0, 1.0, -9.0), "lower": (0.0, 3.0, -9.0)}
OFFSET_SPACING = 0.4


# ----------------------------------------------------------------- transforms


def rotation_matrix(angles) -> np.ndarray:
    """Rotation about x, then y, then z by the given radians."""
    ax, ay, az = (float(a) for a in angles)
    cx, sx, cy, sy, cz, sz = math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay), math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    r = rz @ ry @ rx
    # snap trig roundoff so right-angle rotations stay exact on the grid
    snapped = np.round(r)
    close = np.abs(r - snapped) < 1e-12
    r[close] = snapped[close]
    return r


@dataclass(frozen=True)
class AffineTransform:
    """Sampling map ``x_in = linear @ (x_out - c) + c + translation``.

    ``c`` is ``center`` or, when ``None``, the center of the volume the
    transform is applied to.
    """

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: tuple | None = None

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def from_params(cls, translation=(0, 0, 0), rotation=(0, 0, 0), scale=1.0, center=None) -> "AffineTransform":
        s = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
        return cls(rotation_matrix(rotation) @ np.diag(1.0 / s), np.asarray(translation, dtype=np.float64), center)

    def _center(self, shape) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=np.float64)
        return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0

    def matrix(self, shape) -> np.ndarray:
        """Homogeneous 4x4 sampling matrix for a volume of ``shape``."""
        c = self._center(shape)
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = c - self.linear @ c + self.translation
        return m

    def map_points(self, points, shape) -> np.ndarray:
        """Input coordinates sampled by output ``points``."""
        m = self.matrix(shape)
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return p @ m[:3, :3].T + m[:3, 3]

    def inverse_map_points(self, points, shape) -> np.ndarray:
        """Output coordinates at which input ``points`` land."""
        m = np.linalg.inv(self.matrix(shape))
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return p @ m[:3, :3].T + m[:3, 3]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.linear, np.eye(3)) and not self.translation.any())


@dataclass(frozen=True)
class AffineAugmentConfig:
    translation_range: tuple = (-10.0, 10.0)
    rotation_range: tuple = (-0.1, 0.1)
    scale_range: tuple = (0.9, 1.1)
    rotation_axes: tuple = (True, True, True)

    def __post_init__(self):
        for name in ("translation_range", "rotation_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi, got {(lo, hi)}")
        if self.scale_range[0] <= 0:
            raise ValueError("scale factors must be positive")


def sample_affine(cfg: AffineAugmentConfig, rng: np.random.Generator) -> AffineTransform:
    """Uniform translation per axis, rotation per enabled axis, isotropic scale."""
    t = rng.uniform(*cfg.translation_range, size=3)
    rot = rng.uniform(*cfg.rotation_range, size=3) * np.asarray(cfg.rotation_axes, dtype=np.float64)
    s = rng.uniform(*cfg.scale_range)
    return AffineTransform.from_params(t, rot, s)


def apply_transform(
    v: Volume3D,
    transform: AffineTransform,
    interpolation: str = "linear",
    pad_value: float | None = None,
    out_shape=None,
) -> Volume3D:
    """Resample ``v``; reads outside the input return ``pad_value`` (default: minimum)."""
    if interpolation not in ("linear", "nearest"):
        raise ValueError(f"interpolation must be 'linear' or 'nearest', got {interpolation!r}")
    out_shape = tuple(int(s) for s in (out_shape or v.shape))
    m = transform.matrix(v.shape)
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise ValueError("singular transform")
    pad = float(v.data.min()) if pad_value is None else float(pad_value)
    if transform.is_identity() and out_shape == v.shape and interpolation == "nearest":
        return v
    out = ndimage.affine_transform(
        np.asarray(v.data, dtype=np.float32),
        m,
        output_shape=out_shape,
        order=1 if interpolation == "linear" else 0,
        mode="constant",
        cval=pad,
        prefilter=False,
    )
    return Volume3D(out, v.spacing, v.origin)


# ------------------------------------------------------------------- resizing


def resize_factor(src_shape, target_shape, preserve_aspect: bool = True) -> np.ndarray:
    src = np.asarray(src_shape, dtype=np.float64)
    dst = np.asarray(target_shape, dtype=np.float64)
    if np.any(dst <= 0) or np.any(src <= 0):
        raise ValueError(f"shapes must be positive, got {tuple(src_shape)} -> {tuple(target_shape)}")
    ratio = dst / src
    return np.full(3, ratio.min()) if preserve_aspect else ratio


def resize_volume(v: Volume3D, target_shape, preserve_aspect: bool = True, order: int = 1, antialias: bool = True) -> Volume3D:
    """Scale into ``target_shape``; content anchored at index 0, remainder padded.

    Voxel ``j`` of the output samples input coordinate ``j / factor``, so
    landmarks map by plain multiplication (see :func:`resize_landmarks`).
    Padding uses the minimum intensity.
    """
    target_shape = tuple(int(s) for s in target_shape)
    f = resize_factor(v.shape, target_shape, preserve_aspect)
    data = np.asarray(v.data, dtype=np.float32)
    if antialias and np.any(f < 1):
        sig = np.where(f < 1, 0.5 * (1.0 / f - 1.0), 0.0)
        data = ndimage.gaussian_filter(data, sig, mode="nearest")
    if np.allclose(f, 1.0) and target_shape == v.shape:
        out = data.copy()
    else:
        pad = float(v.data.min())
        out = ndimage.affine_transform(
            data, np.diag(1.0 / f), output_shape=target_shape, order=order, mode="constant", cval=pad, prefilter=False
        )
        # voxels sampling beyond the last input center are padding, not extrapolation
        for axis in range(3):
            last = int(np.floor((v.shape[axis] - 1) * f[axis] + 1e-9))
            sl = [slice(None)] * 3
            sl[axis] = slice(last + 1, None)
            out[tuple(sl)] = pad
    spacing = tuple(float(s) / float(fi) for s, fi in zip(v.spacing, f))
    return Volume3D(out, spacing, v.origin)


def resize_landmarks(lms: LandmarkSet, src_shape, target_shape, preserve_aspect: bool = True) -> LandmarkSet:
    f = resize_factor(src_shape, target_shape, preserve_aspect)
    c = lms.coords.copy()
    valid = lms.valid
    c[valid] = np.minimum(c[valid] * f, np.nextafter(np.asarray(target_shape, dtype=np.float64), 0))
    return LandmarkSet(c, tuple(int(s) for s in target_shape))


def unresize_landmarks(lms: LandmarkSet, src_shape, target_shape, preserve_aspect: bool = True) -> LandmarkSet:
    """Inverse of :func:`resize_landmarks`: map from ``target_shape`` back to ``src_shape``."""
    f = resize_factor(src_shape, target_shape, preserve_aspect)
    c = lms.coords.copy()
    valid = lms.valid
    upper = np.nextafter(np.asarray(src_shape, dtype=np.float64), 0)
    c[valid] = np.clip(c[valid] / f, 0.0, upper)
    return LandmarkSet(c, tuple(int(s) for s in src_shape))


# ------------------------------------------------------------------ intensity


def scale_intensity(v: Volume3D, out_range=(-1.0, 1.0)) -> Volume3D:
    """Affine map of ``[min, max]`` onto ``out_range``; constant input maps to the midpoint."""
    lo, hi = (float(r) for r in out_range)
    d = np.asarray(v.data, dtype=np.float64)
    vmin, vmax = float(d.min()), float(d.max())
    if vmax <= vmin:
        return v.with_data(np.full(v.shape, (lo + hi) / 2.0, dtype=np.float32))
    out = lo + (d - vmin) * ((hi - lo) / (vmax - vmin))
    return v.with_data(out.astype(np.float32))


def shift_scale_intensity(v: Volume3D, factor: float = 0.6, rng: np.random.Generator | None = None,
                          scale: float | None = None, shift: float | None = None) -> Volume3D:
    """``clamp(a * v + b, 0, 1)`` with random gain ``a`` and offset ``b``.

    ``a ~ U(1 - factor*f1, 1 + factor*f1)`` and ``b ~ U(-factor*f2, factor*f2)``
    with ``f1, f2 ~ U(0, 1)``. Passing ``scale``/``shift`` fixes them.
    """
    rng = rng if rng is not None else np.random.default_rng()
    f1, f2 = rng.uniform(0.0, 1.0, size=2)
    a = rng.uniform(1.0 - factor * f1, 1.0 + factor * f1) if scale is None else float(scale)
    b = rng.uniform(-factor * f2, factor * f2) if shift is None else float(shift)
    out = np.clip(a * np.asarray(v.data, dtype=np.float64) + b, 0.0, 1.0)
    return v.with_data(out.astype(np.float32))


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_labels(label: SegMask | Volume3D, sigma: float = 0.1) -> Volume3D:
    """Soft label from a normalized separable Gaussian (``sigma`` in voxels)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    k = _gauss_kernel(sigma)
    out = np.asarray(label.data, dtype=np.float64)
    for axis in range(3):
        out = ndimage.convolve1d(out, k, axis=axis, mode="constant", cval=0.0)
    return Volume3D(np.clip(out, 0.0, 1.0).astype(np.float32), label.spacing, label.origin)


# ---------------------------------------------------------------------- crops


@dataclass(frozen=True)
class CropConfig:
    shape: tuple = CROP_SHAPE
    spacing: tuple = CROP_SPACING
    jaw_offsets: bool = True
    lower_rotation_axis: str = "x"
    # augmentation of the crop geometry, in crop voxels / radians / factors
    translation_range: tuple = (-1.0, 1.0)
    rotation_range: tuple = (-0.1, 0.1)
    scale_range: tuple = (0.8, 1.2)

    def augment_config(self) -> AffineAugmentConfig:
        return AffineAugmentConfig(self.translation_range, self.rotation_range, self.scale_range, (False, False, True))


@dataclass(frozen=True, eq=False)
class CropSample:
    image: Volume3D
    label: SegMask
    tooth_index: int
    jaw: str
    source_case: str
    has_lesion: bool
    transform: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.jaw not in JAWS:
            raise ValueError(f"jaw must be one of {JAWS}")
        if self.image.shape != self.label.shape:
            raise ValueError("image and label shapes differ")


def _jaw_rotation(jaw: str, axis: str) -> np.ndarray:
    if jaw == "upper":
        return np.eye(3)
    flips = {"x": (1.0, -1.0, -1.0), "y": (-1.0, 1.0, -1.0), "z": (-1.0, -1.0, 1.0)}
    if axis not in flips:
        raise ValueError(f"rotation axis must be x, y or z, got {axis!r}")
    return np.diag(flips[axis])


def crop_geometry(tooth_coord, jaw: str, in_spacing, cfg: CropConfig = CropConfig(),
                  augment: AffineTransform | None = None) -> np.ndarray:
    """4x4 map from crop voxel indices to source-image voxel coordinates.

    Crop voxel ``u`` is first centered (``u - n // 2``), passed through the
    optional augmentation, rotated 180 degrees for the lower jaw, shifted by
    the jaw offset (crop voxels), then scaled into source voxels around
    ``tooth_coord``.
    """
    center = np.asarray([n // 2 for n in cfg.shape], dtype=np.float64)
    to_src = np.asarray(cfg.spacing, dtype=np.float64) / np.asarray(in_spacing, dtype=np.float64)
    m = np.eye(4)
    m[:3, 3] = -center
    if augment is not None:
        a = np.eye(4)
        a[:3, :3] = augment.linear
        a[:3, 3] = augment.translation
        m = a @ m
    r = np.eye(4)
    r[:3, :3] = _jaw_rotation(jaw, cfg.lower_rotation_axis)
    m = r @ m
    if cfg.jaw_offsets:
        t = np.eye(4)
        # offsets are crop voxels at the reference spacing; keep their physical size
        t[:3, 3] = np.asarray(JAW_OFFSETS[jaw]) * OFFSET_SPACING / np.asarray(cfg.spacing, dtype=np.float64)
        m = t @ m
    s = np.eye(4)
    s[:3, :3] = np.diag(to_src)
    s[:3, 3] = np.asarray(tooth_coord, dtype=np.float64)
    return s @ m


def crop_tooth(
    image: Volume3D,
    lesion_mask: SegMask | None,
    tooth_coord,
    jaw: str,
    cfg: CropConfig = CropConfig(),
    augment: AffineTransform | None = None,
    tooth_index: int = -1,
    source_case: str = "",
    has_lesion: bool | None = None,
    pad_value: float | None = None,
) -> CropSample:
    """Resample a tooth-centered crop of ``image`` and the matching label."""
    c = np.asarray(tooth_coord, dtype=np.float64)
    if c.shape != (3,) or np.all(c == -1.0):
        raise ValueError("tooth coordinate is the missing sentinel")
    if jaw not in JAWS:
        raise ValueError(f"jaw must be one of {JAWS}, got {jaw!r}")
    m = crop_geometry(c, jaw, image.spacing, cfg, augment)
    pad = float(image.data.min()) if pad_value is None else float(pad_value)
    img = ndimage.affine_transform(
        np.asarray(image.data, dtype=np.float32), m, output_shape=cfg.shape, order=1,
        mode="constant", cval=pad, prefilter=False,
    )
    if lesion_mask is not None:
        lab = ndimage.affine_transform(
            np.asarray(lesion_mask.data, dtype=np.float32), m, output_shape=cfg.shape, order=0,
            mode="constant", cval=0.0, prefilter=False,
        )
    else:
        lab = np.zeros(cfg.shape, dtype=np.float32)
    label = SegMask(lab, cfg.spacing)
    if has_lesion is None:
        has_lesion = bool(label.count)
    info = {"matrix": m.tolist(), "tooth_coord": c.tolist()}
    return CropSample(Volume3D(img, cfg.spacing), label, int(tooth_index), jaw, str(source_case), bool(has_lesion), info)


def crop_region(region_src: SegMask, tooth_coord, jaw: str, cfg: CropConfig = CropConfig()) -> SegMask:
    """Carry a source-space mask (e.g. a cuboid region) into unaugmented crop space."""
    m = crop_geometry(tooth_coord, jaw, region_src.spacing, cfg)
    out = ndimage.affine_transform(
        np.asarray(region_src.data, dtype=np.float32), m, output_shape=cfg.shape, order=0,
        mode="constant", cval=0.0, prefilter=False,
    )
    return SegMask(out, cfg.spacing)


def cuboid_in_crop(points, tooth_coord, jaw: str, in_spacing, cfg: CropConfig = CropConfig()) -> SegMask:
    """Rasterize a source-space cuboid point cloud on the (unaugmented) crop grid."""
    from .geometry import delaunay, region_mask

    m = np.linalg.inv(crop_geometry(tooth_coord, jaw, in_spacing, cfg))
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = p @ m[:3, :3].T + m[:3, 3]
    return region_mask(delaunay(q), cfg.shape, cfg.spacing)


def extract_case_crops(image: Volume3D, landmarks: LandmarkSet, lesion: SegMask | None, jaw_label, has_lesion,
                       case_id: str, cfg: CropConfig = CropConfig(), cuboids: dict | None = None):
    """Crops for every present tooth of one case, plus cuboid regions when given.

    Returns ``(samples, regions)``; ``regions[i]`` is ``None`` for teeth
    without a cuboid.
    """
    samples, regions = [], []
    for k in np.flatnonzero(landmarks.valid):
        k = int(k)
        jaw = jaw_label[k]
        s = crop_tooth(image, lesion, landmarks.coords[k], jaw, cfg, tooth_index=k, source_case=case_id,
                       has_lesion=bool(has_lesion[k]))
        samples.append(s)
        if cuboids is not None and k in cuboids:
            regions.append(cuboid_in_crop(cuboids[k], landmarks.coords[k], jaw, image.spacing, cfg))
        else:
            regions.append(None)
    return samples, regions


def prepare_segmenter_input(sample: CropSample, rng: np.random.Generator | None = None,
                            intensity_factor: float = 0.6, label_sigma: float = 0.1,
                            augment_intensity: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a crop to ``[0, 1]``, optionally shift-scale it, and soften the label."""
    img = scale_intensity(sample.image, (0.0, 1.0))
    if augment_intensity and rng is not None and intensity_factor > 0:
        img = shift_scale_intensity(img, intensity_factor, rng)
    lab = smooth_labels(sample.label, label_sigma) if label_sigma > 0 else sample.label
    return np.asarray(img.data, dtype=np.float32), np.asarray(lab.data, dtype=np.float32)


# ---------------------------------------------------------- localizer inputs


def localizer_base(image: Volume3D, landmarks: LandmarkSet | None, target_shape=(64, 64, 32)):
    """Resize to ``target_shape`` (aspect kept) and scale intensities to ``[-1, 1]``."""
    small = scale_intensity(resize_volume(image, target_shape), (-1.0, 1.0))
    lms = None if landmarks is None else resize_landmarks(landmarks, image.shape, target_shape)
    return small, lms


def augment_localizer(small: Volume3D, lms: LandmarkSet, transform: AffineTransform | None):
    """Apply ``transform`` to a prepared volume; landmarks leaving the grid become missing."""
    if transform is None or transform.is_identity():
        return small, lms
    out = apply_transform(small, transform, "linear", pad_value=-1.0)
    coords = lms.coords.copy()
    valid = lms.valid
    moved = transform.inverse_map_points(coords[valid], small.shape)
    upper = np.asarray(small.shape, dtype=np.float64)
    inside = np.all((moved >= 0) & (moved < upper), axis=1)
    new = np.full_like(coords, -1.0)
    idx = np.flatnonzero(valid)
    new[idx[inside]] = moved[inside]
    return out, LandmarkSet(new, small.shape)


def prepare_localizer_input(
    image: Volume3D,
    landmarks: LandmarkSet,
    target_shape=(64, 64, 32),
    augment: AffineTransform | None = None,
) -> tuple[Volume3D, LandmarkSet]:
    """Resize, scale to ``[-1, 1]`` and optionally augment one training case."""
    small, lms = localizer_base(image, landmarks, target_shape)
    return augment_localizer(small, lms, augment)


# ----------------------------------------------------------------- crop cache


def save_crops(samples, directory, regions=None) -> Path:
    """Write crops as MetaImage pairs plus ``index.json``; optional per-crop region masks."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if regions is not None and len(regions) != len(samples):
        raise ValueError("regions must align with samples")
    index = []
    for i, s in enumerate(samples):
        stem = f"{s.source_case}_t{s.tooth_index:02d}"
        save_volume(s.image, d / f"{stem}_image.mha")
        save_volume(s.label, d / f"{stem}_label.mha")
        entry = {
            "case": s.source_case,
            "tooth": s.tooth_index,
            "jaw": s.jaw,
            "has_lesion": s.has_lesion,
            "image": f"{stem}_image.mha",
            "label": f"{stem}_label.mha",
            "transform": s.transform,
        }
        if regions is not None and regions[i] is not None:
            save_volume(regions[i], d / f"{stem}_region.mha")
            entry["region"] = f"{stem}_region.mha"
        index.append(entry)
    (d / "index.json").write_text(json.dumps(index))
    return d


def load_regions(directory) -> list:
    """Region masks aligned with :func:`load_crops`; ``None`` where absent."""
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    return [load_mask(d / e["region"]) if "region" in e else None for e in index]


def load_crops(directory) -> list[CropSample]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    out = []
    for e in index:
        out.append(CropSample(
            load_volume(d / e["image"]),
            load_mask(d / e["label"]),
            int(e["tooth"]),
            e["jaw"],
            e["case"],
            bool(e["has_lesion"]),
            e.get("transform", {}),
        ))
    return out


def transform_params(t: AffineTransform) -> dict:
    return {"linear": t.linear.tolist(), "translation": t.translation.tolist(),
            "center": None if t.center is None else list(t.center)}


__all__ = [
    "AffineTransform",
    "AffineAugmentConfig",
    "CropConfig",
    "CropSample",
    "apply_transform",
    "sample_affine",
    "resize_volume",
    "resize_landmarks",
    "unresize_landmarks",
    "scale_intensity",
    "shift_scale_intensity",
    "smooth_labels",
    "crop_tooth",
    "crop_region",
    "cuboid_in_crop",
    "extract_case_crops",
    "prepare_localizer_input",
    "localizer_base",
    "augment_localizer",
    "prepare_segmenter_input",
    "save_crops",
    "load_crops",
    "load_regions",
]
