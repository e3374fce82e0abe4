"""Localization and lesion detection/segmentation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import LandmarkSet, SegMask
from .geometry import restrict_prediction

OUTCOMES = ("TP", "FN", "TN", "FP")
DEFAULT_RADII = (2.0, 2.5, 3.0, 4.0)


def _is_sentinel(p) -> bool:
    return bool(np.all(np.asarray(p, dtype=np.float64) == -1.0))


def point_error(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Euclidean distance in mm between two voxel coordinates."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if _is_sentinel(pred) or _is_sentinel(gt):
        raise ValueError("point_error is undefined for a missing landmark")
    return float(np.linalg.norm((pred - gt) * np.asarray(spacing, dtype=np.float64)))


def localization_hits(pred: LandmarkSet, gt: LandmarkSet, radius_mm: float, spacing=(1.0, 1.0, 1.0)) -> tuple[int, int]:
    """``(correct, evaluated)`` for one case.

    A tooth is evaluated when both ground truth and prediction exist. It is
    correct when its own ground truth is the nearest of all present ground
    truths to the prediction and that distance is strictly below the radius.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    gvalid = gt.valid
    if not gvalid.any():
        return 0, 0
    gidx = np.flatnonzero(gvalid)
    gmm = gt.coords[gidx] * sp
    correct = evaluated = 0
    for i in np.flatnonzero(gvalid & pred.valid):
        d = np.linalg.norm(gmm - pred.coords[i] * sp, axis=1)
        evaluated += 1
        j = int(np.argmin(d))
        if gidx[j] == i and d[j] < radius_mm:
            correct += 1
    return correct, evaluated


def localization_accuracy(preds, gts, radius_mm: float, spacing=(1.0, 1.0, 1.0)) -> float:
    """Fraction of evaluated teeth localized within ``radius_mm``.

    ``preds``/``gts`` are single :class:`LandmarkSet` objects or equal-length
    sequences of them (teeth pooled over cases). ``spacing`` may be one
    triple or one per case.
    """
    if isinstance(preds, LandmarkSet):
        preds, gts, spacings = [preds], [gts], [spacing]
    else:
        preds, gts = list(preds), list(gts)
        sp = np.asarray(spacing, dtype=np.float64)
        spacings = [spacing] * len(preds) if sp.ndim == 1 else list(spacing)
    if len(preds) != len(gts) or len(spacings) != len(preds):
        raise ValueError("predictions, ground truths and spacings must pair up")
    correct = evaluated = 0
    for p, g, s in zip(preds, gts, spacings):
        c, e = localization_hits(p, g, radius_mm, s)
        correct += c
        evaluated += e
    if evaluated == 0:
        raise ValueError("no evaluable teeth")
    return correct / evaluated


def dice(x: SegMask, y: SegMask) -> float:
    """``2|X∩Y| / (|X| + |Y|)``, defined as 1 when both are empty."""
    a, b = _bools(x, y)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _bools(x, y):
    a = x.as_bool() if isinstance(x, SegMask) else np.asarray(x, dtype=bool)
    b = y.as_bool() if isinstance(y, SegMask) else np.asarray(y, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def classify_tooth(pred: SegMask, gt: SegMask, region: SegMask | None = None) -> str:
    """TP/FN for lesion teeth (any overlap counts), TN/FP for lesion-free ones.

    ``region`` restricts both masks before classification so neighbouring
    lesions inside the crop do not count.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if region is not None:
        pred = restrict_prediction(pred, region)
        gt = restrict_prediction(gt, region)
    if gt.count > 0:
        return "TP" if np.logical_and(pred.as_bool(), gt.as_bool()).any() else "FN"
    return "TN" if pred.count == 0 else "FP"


@dataclass
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("counts must be non-negative")

    def add(self, outcome: str) -> None:
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {outcome!r}")
        setattr(self, outcome.lower(), getattr(self, outcome.lower()) + 1)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fn + other.fn, self.tn + other.tn, self.fp + other.fp)

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def sensitivity(self) -> float | None:
        return self.tp / self.positives if self.positives else None

    @property
    def specificity(self) -> float | None:
        return self.tn / self.negatives if self.negatives else None

    @property
    def miss_rate(self) -> float | None:
        return self.fn / self.positives if self.positives else None

    @property
    def fallout(self) -> float | None:
        return self.fp / self.negatives if self.negatives else None


@dataclass(frozen=True)
class ToothResult:
    """Outcome for one evaluated tooth crop."""

    case_id: str
    tooth: int
    outcome: str
    dice: float
    fold: int = 0

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")


def evaluate_tooth(case_id: str, tooth: int, pred: SegMask, gt: SegMask, region: SegMask | None = None, fold: int = 0) -> ToothResult:
    if region is not None:
        pred_r, gt_r = restrict_prediction(pred, region), restrict_prediction(gt, region)
    else:
        pred_r, gt_r = pred, gt
    return ToothResult(case_id, int(tooth), classify_tooth(pred_r, gt_r), dice(pred_r, gt_r), int(fold))


def _mean_sd(values) -> tuple[float | None, float | None]:
    v = [float(x) for x in values if x is not None]
    if not v:
        return None, None
    a = np.asarray(v, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


@dataclass
class EvalReport:
    """Aggregated evaluation; every summary is recomputable from the lists."""

    point_errors: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)
    missing_predictions: int = 0
    confusion: ConfusionCounts = field(default_factory=ConfusionCounts)
    dice_tp: list = field(default_factory=list)
    dice_positive: list = field(default_factory=list)
    per_fold: dict = field(default_factory=dict)
    label: str = ""

    @property
    def sensitivity(self):
        return self.confusion.sensitivity

    @property
    def specificity(self):
        return self.confusion.specificity

    @property
    def pe_mean_sd(self):
        return _mean_sd(self.point_errors)

    @property
    def dice_tp_mean_sd(self):
        return _mean_sd(self.dice_tp)

    @property
    def dice_positive_mean_sd(self):
        return _mean_sd(self.dice_positive)

    def fold_mean_sd(self, key: str):
        return _mean_sd(f.get(key) for f in self.per_fold.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["accuracy"] = {str(k): v for k, v in self.accuracy.items()}
        d["per_fold"] = {str(k): v for k, v in self.per_fold.items()}
        d["summary"] = {
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "pe_mean_sd": self.pe_mean_sd,
            "dice_tp_mean_sd": self.dice_tp_mean_sd,
            "dice_positive_mean_sd": self.dice_positive_mean_sd,
            "fold_sensitivity_mean_sd": self.fold_mean_sd("sensitivity"),
            "fold_specificity_mean_sd": self.fold_mean_sd("specificity"),
            "fold_dice_tp_mean_sd": self.fold_mean_sd("dice_tp"),
        }
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            point_errors=list(d.get("point_errors", [])),
            accuracy={float(k): v for k, v in d.get("accuracy", {}).items()},
            missing_predictions=int(d.get("missing_predictions", 0)),
            confusion=ConfusionCounts(**d.get("confusion", {})),
            dice_tp=list(d.get("dice_tp", [])),
            dice_positive=list(d.get("dice_positive", [])),
            per_fold={int(k): v for k, v in d.get("per_fold", {}).items()},
            label=d.get("label", ""),
        )

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def render_table(self) -> str:
        return render_tables([self])


def aggregate(results: Sequence[ToothResult] = (), point_errors: Iterable[float] = (),
              accuracy: dict | None = None, missing_predictions: int = 0, label: str = "") -> EvalReport:
    """Pool tooth outcomes into an :class:`EvalReport` with per-fold summaries."""
    results = list(results)
    pes = [float(p) for p in point_errors]
    if not results and not pes:
        raise ValueError("nothing to aggregate")
    conf = ConfusionCounts()
    folds: dict[int, list[ToothResult]] = {}
    for r in results:
        conf.add(r.outcome)
        folds.setdefault(r.fold, []).append(r)
    per_fold = {}
    for k in sorted(folds):
        c = ConfusionCounts()
        for r in folds[k]:
            c.add(r.outcome)
        per_fold[k] = {
            "sensitivity": c.sensitivity,
            "specificity": c.specificity,
            "dice_tp": _mean_sd(r.dice for r in folds[k] if r.outcome == "TP")[0],
            "dice_positive": _mean_sd(r.dice for r in folds[k] if r.outcome in ("TP", "FN"))[0],
        }
    return EvalReport(
        point_errors=pes,
        accuracy=dict(accuracy or {}),
        missing_predictions=int(missing_predictions),
        confusion=conf,
        dice_tp=[r.dice for r in results if r.outcome == "TP"],
        dice_positive=[r.dice for r in results if r.outcome in ("TP", "FN")],
        per_fold=per_fold,
        label=label,
    )


def _fmt(ms, scale=1.0, digits=3):
    m, s = ms
    if m is None:
        return "n/a"
    return f"{m * scale:.{digits}f} ± {s * scale:.{digits}f}"


def render_tables(reports: Sequence[EvalReport]) -> str:
    """Text tables: localization (PE and radius accuracy) and segmentation."""
    lines = []
    loc = [r for r in reports if r.point_errors]
    if loc:
        radii = sorted({float(k) for r in loc for k in r.accuracy})
        head = ["model", "PE mm (mean ± SD)"] + [f"acc r={r:g}mm" for r in radii]
        lines.append(" | ".join(head))
        lines.append("-" * len(lines[-1]))
        for r in loc:
            acc = {float(k): v for k, v in r.accuracy.items()}
            row = [r.label or "-", _fmt(r.pe_mean_sd, digits=2)]
            row += [f"{100 * acc[x]:.1f}%" if x in acc else "n/a" for x in radii]
            lines.append(" | ".join(row))
        lines.append("")
    seg = [r for r in reports if r.confusion.positives + r.confusion.negatives]
    if seg:
        head = ["loss", "sensitivity", "specificity", "Dice (TP)", "Dice (all lesions)", "TP/FN/TN/FP"]
        lines.append(" | ".join(head))
        lines.append("-" * len(lines[-1]))
        for r in seg:
            many = len(r.per_fold) > 1
            sens = _fmt(r.fold_mean_sd("sensitivity")) if many else _fmt((r.sensitivity, 0.0))
            spec = _fmt(r.fold_mean_sd("specificity")) if many else _fmt((r.specificity, 0.0))
            c = r.confusion
            lines.append(" | ".join([
                r.label or "-", sens, spec, _fmt(r.dice_tp_mean_sd), _fmt(r.dice_positive_mean_sd),
                f"{c.tp}/{c.fn}/{c.tn}/{c.fp}",
            ]))
    return "\n".join(lines).rstrip() + "\n"
