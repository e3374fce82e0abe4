"""Fold construction, training loops and evaluation for both stages."""
from __future__ import annotations

import csv
import functools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .core import NUM_TEETH, DatasetManifest, LandmarkSet, SegMask, Volume3D, load_landmarks, load_volume
from .heatmap import LocalizationLossConfig, extract_coordinates, localization_loss, target_heatmaps_torch
from .losses import LOSS_NAMES, LossParams, get_loss
from .metrics import DEFAULT_RADII, EvalReport, aggregate, evaluate_tooth, localization_hits, point_error
from .phantom import PhantomConfig
from .pipeline import (
    AffineAugmentConfig,
    CropConfig,
    CropSample,
    apply_transform,
    augment_localizer,
    localizer_base,
    sample_affine,
    scale_intensity,
    shift_scale_intensity,
    smooth_labels,
    unresize_landmarks,
)
from .scn import SCN, SCNConfig, build_scn, scn_forward, weight_l2_norm
from .unet import UNet, UNetConfig, binarize, build_unet, unet_forward

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


# --------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldSpec:
    """``folds[i]`` lists the case ids of test fold ``i``."""

    folds: tuple
    seed: int = 0
    stratified: bool = True

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_ids(self, i: int) -> tuple:
        return tuple(self.folds[i])

    def train_ids(self, i: int) -> tuple:
        return tuple(c for j, f in enumerate(self.folds) if j != i for c in f)

    def fold_of(self, case_id: str) -> int:
        for i, f in enumerate(self.folds):
            if case_id in f:
                return i
        raise KeyError(case_id)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "stratified": self.stratified, "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(tuple(tuple(f) for f in d["folds"]), int(d.get("seed", 0)), bool(d.get("stratified", True)))


def _group_stats(items) -> dict:
    """case id -> [n_items, n_lesions] from a manifest or crop samples."""
    stats: dict[str, list] = {}
    if isinstance(items, DatasetManifest) or (items and hasattr(items[0], "jaw_label")):
        for rec in items:
            stats[rec.case_id] = [sum(1 for j in rec.jaw_label), int(sum(rec.has_lesion))]
    else:
        for s in items:
            st = stats.setdefault(s.source_case, [0, 0])
            st[0] += 1
            st[1] += int(bool(s.has_lesion))
    return stats


def make_folds(items, k: int = 4, stratify_on_lesions: bool = True, seed: int = 0) -> FoldSpec:
    """Deterministic case-grouped partition into ``k`` folds of near-equal size.

    ``items`` is a :class:`DatasetManifest` (cases) or a sequence of
    :class:`CropSample` (crops, grouped by source case so no case straddles
    folds). With stratification, cases are dealt greedily by lesion count and
    then swapped pairwise to bring each fold's lesion count towards its share.
    """
    stats = _group_stats(items)
    ids = list(stats)
    n = len(ids)
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} cases into {k} folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    cap = math.ceil(n / k)
    folds: list[list[str]] = [[] for _ in range(k)]
    if not stratify_on_lesions:
        for i, c in enumerate(order):
            folds[i % k].append(c)
        return FoldSpec(tuple(tuple(f) for f in folds), seed, False)

    order.sort(key=lambda c: -stats[c][1])
    lesions = [0] * k
    for c in order:
        open_ = [f for f in range(k) if len(folds[f]) < cap]
        f = min(open_, key=lambda f: (lesions[f], len(folds[f]), f))
        folds[f].append(c)
        lesions[f] += stats[c][1]

    total_items = sum(s[0] for s in stats.values())
    frac = sum(s[1] for s in stats.values()) / total_items if total_items else 0.0

    def cost(fs):
        return sum((sum(stats[c][1] for c in f) - frac * sum(stats[c][0] for c in f)) ** 2 for f in fs)

    best = cost(folds)
    improved = True
    while improved:
        improved = False
        for a in range(k):
            for b in range(a + 1, k):
                for i in range(len(folds[a])):
                    for j in range(len(folds[b])):
                        ca, cb = folds[a][i], folds[b][j]
                        if stats[ca] == stats[cb]:
                            continue
                        folds[a][i], folds[b][j] = cb, ca
                        c = cost(folds)
                        if c < best - 1e-12:
                            best = c
                            improved = True
                        else:
                            folds[a][i], folds[b][j] = ca, cb
    folds = [sorted(f) for f in folds]
    return FoldSpec(tuple(tuple(f) for f in folds), seed, True)


# -------------------------------------------------------------- configuration


@dataclass(frozen=True)
class LocalizerTrainConfig:
    learning_rate: float = 1e-6
    momentum: float = 0.99
    nesterov: bool = True
    iterations: int = 15000
    batch_size: int = 1
    weight_decay: float = 5e-5
    sigma_penalty: float = 100.0
    min_sigma: float = 1.0
    squared_distance: bool = True
    input_shape: tuple = (64, 64, 32)
    translation_range: tuple = (-10.0, 10.0)
    rotation_range: tuple = (-0.1, 0.1)
    scale_range: tuple = (0.9, 1.1)
    augment: bool = True
    grad_clip: float | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or self.iterations < 0 or self.batch_size < 1:
            raise ValueError("learning_rate and iterations must be >= 0, batch_size >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def augment_config(self) -> AffineAugmentConfig:
        return AffineAugmentConfig(self.translation_range, self.rotation_range, self.scale_range)


@dataclass(frozen=True)
class SegmenterTrainConfig:
    learning_rate: float = 1e-4
    iterations: int = 113000
    batch_size: int = 8
    loss_name: str = "focal"
    alpha: float = 0.9
    beta: float = 0.9
    gamma: float = 2.0
    delta: float = 0.5
    label_sigma: float = 0.1
    intensity_factor: float = 0.6
    augment: bool = True
    translation_range: tuple = (-1.0, 1.0)
    rotation_range: tuple = (-0.1, 0.1)
    scale_range: tuple = (0.8, 1.2)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.loss_name not in LOSS_NAMES:
            raise ValueError(f"loss_name must be one of {LOSS_NAMES}, got {self.loss_name!r}")
        if self.learning_rate < 0 or self.iterations < 0 or self.batch_size < 1:
            raise ValueError("learning_rate and iterations must be >= 0, batch_size >= 1")
        self.loss_params()

    def loss_params(self) -> LossParams:
        return LossParams(alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta)

    def augment_config(self) -> AffineAugmentConfig:
        return AffineAugmentConfig(self.translation_range, self.rotation_range, self.scale_range, (False, False, True))


_SECTIONS = {
    "phantom": PhantomConfig,
    "scn": SCNConfig,
    "localizer": LocalizerTrainConfig,
    "crop": CropConfig,
    "unet": UNetConfig,
    "segmenter": SegmenterTrainConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    scn: SCNConfig = field(default_factory=SCNConfig)
    localizer: LocalizerTrainConfig = field(default_factory=LocalizerTrainConfig)
    crop: CropConfig = field(default_factory=CropConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    segmenter: SegmenterTrainConfig = field(default_factory=SegmenterTrainConfig)
    folds: int = 4
    n_cases: int = 8

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = _plain(asdict(v)) if f.name in _SECTIONS else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            if name in d and d[name] is not None:
                sec = dict(d[name])
                bad = set(sec) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
                kw[name] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in sec.items()})
        for name in ("folds", "n_cases"):
            if name in d:
                kw[name] = int(d[name])
        return cls(**kw)

    def override(self, section: str, **kw) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **kw)})


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return ExperimentConfig.from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


PRESET_DIR = Path(__file__).parent / "configs"


def preset(name: str) -> ExperimentConfig:
    """Load a shipped preset (``toy``, ``paper``, ``paper_lr1e-7``)."""
    path = PRESET_DIR / f"{name}.yaml"
    if not path.exists():
        raise ValueError(f"unknown preset {name!r}; available: {sorted(p.stem for p in PRESET_DIR.glob('*.yaml'))}")
    return load_config(path)


# -------------------------------------------------------------------- helpers


def _setup_torch(seed: int, threads: int) -> None:
    torch.set_num_threads(max(1, int(threads)))
    torch.manual_seed(int(seed))


def _flush_subnormals(fn):
    """Run ``fn`` with subnormal floats flushed to zero.

    Subnormal activations late in training slow CPU convolutions
    several-fold. The flag is process-wide (it also affects numpy), so it is
    switched back off, the default, when ``fn`` returns.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)

    return wrapper


def smoothed(history: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    h = np.asarray(history, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(h)])
    idx = np.arange(1, len(h) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_loss_csv(history: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])


def read_loss_csv(path) -> list[float]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["loss"]) for r in rows]


def load_case(manifest: DatasetManifest, rec) -> tuple[Volume3D, LandmarkSet]:
    img = load_volume(manifest.resolve(rec.image_path))
    lms = load_landmarks(manifest.resolve(rec.landmarks_path), img.shape)
    return img, lms


# ---------------------------------------------------------------- localizer


@dataclass
class LocalizerSample:
    volume: Volume3D
    landmarks: LandmarkSet


def prepare_localizer_samples(cases, input_shape) -> list[LocalizerSample]:
    """``cases``: iterable of ``(image, landmarks)`` at original resolution."""
    out = []
    for img, lms in cases:
        small, slms = localizer_base(img, lms, input_shape)
        out.append(LocalizerSample(small, slms))
    return out


def _nan_guard(value: torch.Tensor, it: int, parts: dict) -> None:
    if not torch.isfinite(value.detach()).all():
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
        raise NonFiniteLossError(f"non-finite values at iteration {it}" + (f": {detail}" if detail else ""))


@_flush_subnormals
def train_localizer(train_cases, model_cfg: SCNConfig, cfg: LocalizerTrainConfig,
                    model: SCN | None = None, log_every: int = 0):
    """Optimize the heatmap network with Nesterov momentum.

    ``train_cases``: ``(image, landmarks)`` pairs at original resolution, or
    already prepared :class:`LocalizerSample` objects. Each iteration draws
    ``batch_size`` samples uniformly with replacement. Returns
    ``(model, history)`` with one loss value per iteration.
    """
    samples = list(train_cases)
    if not samples:
        raise ValueError("empty training set")
    if not isinstance(samples[0], LocalizerSample):
        samples = prepare_localizer_samples(samples, cfg.input_shape)
    if tuple(model_cfg.input_shape) != tuple(cfg.input_shape):
        raise ValueError("model and trainer input shapes differ")
    _setup_torch(cfg.seed, cfg.threads)
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else build_scn(model_cfg, cfg.seed)
    model = model.to(memory_format=torch.channels_last_3d)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, nesterov=cfg.nesterov)
    loss_cfg = LocalizationLossConfig(alpha=cfg.sigma_penalty, lam=cfg.weight_decay, squared_distance=cfg.squared_distance)
    aug = cfg.augment_config()
    n = model_cfg.num_landmarks
    shape = tuple(cfg.input_shape)
    history = []
    for it in range(cfg.iterations):
        xs, coords, valid = [], [], []
        for _ in range(cfg.batch_size):
            s = samples[int(rng.integers(len(samples)))]
            t = sample_affine(aug, rng) if cfg.augment else None
            vol, lms = augment_localizer(s.volume, s.landmarks, t)
            xs.append(np.asarray(vol.data, dtype=np.float32))
            coords.append(lms.coords[:n])
            valid.append(lms.valid[:n])
        x = torch.from_numpy(np.stack(xs)[:, None]).contiguous(memory_format=torch.channels_last_3d)
        _, _, h = model(x)
        sig = model.sigmas
        wn = weight_l2_norm(model)
        _nan_guard(h, it, {"weights": wn})
        data = 0.0
        for b in range(cfg.batch_size):
            tgt = target_heatmaps_torch(torch.tensor(coords[b]), torch.tensor(valid[b]), shape, sig,
                                        squared=cfg.squared_distance)
            data = data + localization_loss(h[b], tgt, sig, 0.0, LocalizationLossConfig(0.0, 0.0), valid[b])
        loss = data / cfg.batch_size + loss_cfg.alpha * torch.linalg.vector_norm(sig) + loss_cfg.lam * wn
        _nan_guard(loss, it, {"data": data, "weights": wn})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip or math.inf)
        opt.step()
        with torch.no_grad():
            model.sigmas.clamp_(min=cfg.min_sigma)
        history.append(float(loss.detach()))
        if log_every and (it + 1) % log_every == 0:
            log.info("localizer it %d loss %.4f sigma %.3f grad %.3g", it + 1, history[-1],
                     float(model.sigmas.detach().mean()), float(gnorm))
    model.eval()
    return model.to(memory_format=torch.contiguous_format), history


def predict_landmarks(model: SCN, image: Volume3D) -> LandmarkSet:
    """Landmarks in original voxel coordinates; slots beyond the model's channels are missing."""
    shape = tuple(model.cfg.input_shape)
    small, _ = localizer_base(image, None, shape)
    _, _, h = scn_forward(model, small)
    lms = extract_coordinates(h, shape)
    return unresize_landmarks(lms, image.shape, shape)


def evaluate_localizer(model: SCN, test_cases, radii=DEFAULT_RADII, spacing=None, label: str = "") -> EvalReport:
    """Point errors and radius accuracies over ``(image, landmarks)`` pairs.

    Distances use each image's spacing (mm) unless ``spacing`` overrides it,
    e.g. ``(1, 1, 1)`` for voxel units.
    """
    radii = tuple(sorted(float(r) for r in radii))
    pes: list[float] = []
    hits = {r: [0, 0] for r in radii}
    extra = 0
    for img, gt in test_cases:
        pred = predict_landmarks(model, img)
        sp = img.spacing if spacing is None else tuple(spacing)
        for i in range(NUM_TEETH):
            if pred.is_missing(i):
                continue
            if gt.is_missing(i):
                extra += 1
                continue
            pes.append(point_error(pred.coords[i], gt.coords[i], sp))
        for r in radii:
            c, e = localization_hits(pred, gt, r, sp)
            hits[r][0] += c
            hits[r][1] += e
    accuracy = {r: (c / e if e else None) for r, (c, e) in hits.items()}
    return aggregate([], pes, accuracy, extra, label)


# ---------------------------------------------------------------- segmenter


def _crop_arrays(crop: CropSample) -> tuple[np.ndarray, np.ndarray]:
    img = scale_intensity(crop.image, (0.0, 1.0))
    return np.asarray(img.data, dtype=np.float32), np.asarray(crop.label.data, dtype=np.float32)


def _segmenter_sample(img: np.ndarray, lab: np.ndarray, cfg: SegmenterTrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    v, m = Volume3D(img), SegMask(lab)
    if cfg.augment:
        t = sample_affine(cfg.augment_config(), rng)
        v = apply_transform(v, t, "linear", pad_value=0.0)
        m = SegMask(apply_transform(m, t, "nearest", pad_value=0.0).data)
        if cfg.intensity_factor > 0:
            v = shift_scale_intensity(v, cfg.intensity_factor, rng)
    soft = smooth_labels(m, cfg.label_sigma) if cfg.label_sigma > 0 else m
    return np.asarray(v.data, dtype=np.float32), np.asarray(soft.data, dtype=np.float32)


@_flush_subnormals
def train_segmenter(train_crops: Sequence[CropSample], model_cfg: UNetConfig, cfg: SegmenterTrainConfig,
                    model: UNet | None = None, log_every: int = 0):
    """Adam on batches of augmented crops; the loss sees ``sigmoid(logits)``."""
    crops = list(train_crops)
    if not crops:
        raise ValueError("empty training set")
    _setup_torch(cfg.seed, cfg.threads)
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else build_unet(model_cfg, cfg.seed)
    model = model.to(memory_format=torch.channels_last_3d)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    loss_fn = get_loss(cfg.loss_name, cfg.loss_params())
    arrays = [_crop_arrays(c) for c in crops]
    history = []
    for it in range(cfg.iterations):
        xs, ys = [], []
        for _ in range(cfg.batch_size):
            img, lab = arrays[int(rng.integers(len(arrays)))]
            x, y = _segmenter_sample(img, lab, cfg, rng)
            xs.append(x)
            ys.append(y)
        x = torch.from_numpy(np.stack(xs)[:, None]).contiguous(memory_format=torch.channels_last_3d)
        y = torch.from_numpy(np.stack(ys)[:, None])
        logits = model(x)
        _nan_guard(logits, it, {})
        probs = torch.sigmoid(logits)
        loss = loss_fn(probs, y)
        _nan_guard(loss, it, {"loss": loss})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and (it + 1) % log_every == 0:
            log.info("segmenter it %d loss %.5f", it + 1, history[-1])
    model.eval()
    return model.to(memory_format=torch.contiguous_format), history


def predict_crop(model: UNet, crop: CropSample) -> SegMask:
    img = scale_intensity(crop.image, (0.0, 1.0))
    return binarize(unet_forward(model, img))


def evaluate_segmenter(model: UNet, test_crops: Sequence[CropSample], regions=None,
                       label: str = "", folds: dict | None = None) -> EvalReport:
    """Binarize, optionally restrict to ``regions[i]``, classify and aggregate.

    ``folds`` maps case id to fold index for per-fold summaries.
    """
    results = []
    for i, crop in enumerate(test_crops):
        pred = predict_crop(model, crop)
        region = None if regions is None else regions[i]
        fold = 0 if folds is None else int(folds.get(crop.source_case, 0))
        results.append(evaluate_tooth(crop.source_case, crop.tooth_index, pred, crop.label, region, fold))
    return aggregate(results, label=label)


def save_run(run_dir, history: Sequence[float], report: EvalReport | None = None, extra: dict | None = None) -> Path:
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_loss_csv(history, d / "loss.csv")
    if report is not None:
        report.to_json(d / "report.json")
    if extra:
        (d / "run.json").write_text(json.dumps(extra, indent=2, default=str))
    return d
