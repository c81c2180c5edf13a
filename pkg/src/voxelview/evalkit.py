"""Alignment of predictions to ground truth, metrics and bias baselines."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCloud, DegenerateMean, InvalidParam, LengthMismatch
from .geometry import azimuth_error, normalize, vector_to_euler, viewpoint_error

RIDGE = 1e-6
ACCURACY_THRESHOLD_DEG = 30.0
SCATTER_HEADER = ("gt_azimuth_deg", "pred_azimuth_deg", "head")


def _pair(preds, gts, min_len=0):
    p = np.asarray(preds, dtype=float).reshape(-1, 3)
    g = np.asarray(gts, dtype=float).reshape(-1, 3)
    if p.shape[0] != g.shape[0]:
        raise LengthMismatch(f"{p.shape[0]} predictions vs {g.shape[0]} ground truths")
    if p.shape[0] < min_len:
        raise InvalidParam(f"need at least {min_len} pairs, got {p.shape[0]}")
    return p, g


@dataclass(frozen=True, eq=False)
class AlignmentTransform:
    """A global map applied to predicted viewpoints before scoring.

    ``kind`` is ``"rotation"`` (``rotation`` is a proper 3x3 rotation) or
    ``"linear"`` (``weights`` 3x3 and ``bias`` 3-vector, outputs
    renormalized to the sphere).
    """

    kind: str
    rotation: np.ndarray | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "rotation":
            r = np.asarray(self.rotation, dtype=float)
            if r.shape != (3, 3):
                raise InvalidParam("rotation must be 3x3")
            object.__setattr__(self, "rotation", r)
        elif self.kind == "linear":
            w = np.asarray(self.weights, dtype=float)
            b = np.asarray(self.bias, dtype=float)
            if w.shape != (3, 3) or b.shape != (3,):
                raise InvalidParam("linear alignment needs 3x3 weights and a 3-vector bias")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidParam("linear alignment must be finite")
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "bias", b)
        else:
            raise InvalidParam(f"unknown alignment kind {self.kind!r}")

    @classmethod
    def identity(cls):
        return cls("rotation", rotation=np.eye(3))

    def apply(self, preds):
        p = np.asarray(preds, dtype=float).reshape(-1, 3)
        if self.kind == "rotation":
            return p @ self.rotation.T
        out = p @ self.weights.T + self.bias
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        # an output that maps exactly to the origin has no direction; park it on +x
        dead = norms[:, 0] < 1e-300
        out[dead] = (1.0, 0.0, 0.0)
        norms[dead] = 1.0
        return out / norms

    def descriptor(self):
        if self.kind == "rotation":
            return {"kind": "rotation", "rotation": self.rotation.tolist()}
        return {"kind": "linear", "weights": self.weights.tolist(), "bias": self.bias.tolist()}


def procrustes_objective(r, preds, gts):
    p, g = _pair(preds, gts)
    return float(np.sum((p @ np.asarray(r).T - g) ** 2))


def procrustes_align(preds, gts):
    """Proper rotation ``R`` minimizing ``sum ||R p_i - g_i||^2``.

    Raises:
        DegenerateCloud: if the cross-covariance has rank below 2, when
            the rotation is not determined.
    """
    p, g = _pair(preds, gts, 3)
    h = g.T @ p
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateCloud("cross-covariance has rank < 2")
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return AlignmentTransform("rotation", rotation=r)


def linear_align(preds, gts, ridge=RIDGE):
    """Ridge least-squares fit of ``W p + b ~ g``."""
    p, g = _pair(preds, gts, 4)
    x = np.hstack([p, np.ones((p.shape[0], 1))])
    theta = np.linalg.solve(x.T @ x + ridge * np.eye(4), x.T @ g)
    return AlignmentTransform("linear", weights=theta[:3].T, bias=theta[3])


def lower_median(values):
    s = np.sort(np.asarray(values, dtype=float))
    if s.size == 0:
        return float("nan")
    return float(s[(s.size - 1) // 2])


@dataclass
class MetricsReport:
    accuracy_at_30: float
    median_error_deg: float
    dva: float
    confidence_index: float
    per_bin: list
    alignment: dict
    n_samples: int
    error_mode: str = "geodesic"
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "accuracy_at_30": self.accuracy_at_30,
            "alignment": self.alignment,
            "confidence_index": self.confidence_index,
            "dva": self.dva,
            "error_mode": self.error_mode,
            "median_error_deg": self.median_error_deg,
            "n_samples": self.n_samples,
            "per_bin": [{"bin_start_deg": b, "count": c, "accuracy": a} for b, c, a in self.per_bin],
        }
        d.update(self.extra)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def sample_errors(preds, gts, mode="geodesic"):
    """Per-sample errors in degrees (``mode`` geodesic or azimuth)."""
    p, g = _pair(preds, gts)
    if mode == "geodesic":
        errs = [viewpoint_error(a, b) for a, b in zip(p, g)]
    elif mode == "azimuth":
        errs = [azimuth_error(vector_to_euler(a)[0], vector_to_euler(b)[0]) for a, b in zip(p, g)]
    else:
        raise InvalidParam(f"unknown error mode {mode!r}")
    return np.degrees(np.array(errs, dtype=float))


def compute_metrics(preds, gts, alignment=None, bin_width=30.0, min_bin=10, mode="geodesic"):
    """Accuracy at 30 degrees, lower median error and azimuth-binned scores.

    Bins split ground-truth azimuth into ``ceil(360 / bin_width)``
    intervals.  ``dva`` averages the accuracy of every nonempty bin;
    ``confidence_index`` is the fraction of all bins holding more than
    ``min_bin`` samples.
    """
    p, g = _pair(preds, gts, 1)
    if not bin_width > 0:
        raise InvalidParam("bin_width must be positive")
    alignment = alignment or AlignmentTransform.identity()
    errs = sample_errors(alignment.apply(p), g, mode)
    ok = errs <= ACCURACY_THRESHOLD_DEG
    n_bins = math.ceil(360.0 / bin_width)
    az = np.array([math.degrees(vector_to_euler(v)[0]) for v in g])
    idx = np.minimum((az // bin_width).astype(int), n_bins - 1)
    per_bin = []
    accs = []
    populated = 0
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        acc = float(ok[sel].mean()) if count else 0.0
        per_bin.append((b * bin_width, count, acc))
        if count:
            accs.append(acc)
        if count > min_bin:
            populated += 1
    return MetricsReport(
        accuracy_at_30=float(ok.mean()),
        median_error_deg=lower_median(errs),
        dva=float(np.mean(accs)),
        confidence_index=populated / n_bins,
        per_bin=per_bin,
        alignment=alignment.descriptor(),
        n_samples=int(p.shape[0]),
        error_mode=mode,
    )


def constant_predictor(validation_gts):
    """Normalized mean of the validation viewpoints.

    Raises:
        DegenerateMean: if the mean vector (nearly) vanishes.
    """
    g = np.asarray(validation_gts, dtype=float).reshape(-1, 3)
    if g.shape[0] == 0:
        raise InvalidParam("need at least one viewpoint")
    m = g.sum(axis=0) / g.shape[0]
    if np.linalg.norm(m) <= 1e-6:
        raise DegenerateMean("mean viewpoint vanishes")
    return normalize(m)


def scatter_data(preds, gts, heads=None):
    """Rows ``(gt_azimuth_deg, pred_azimuth_deg, head)`` in input order."""
    p, g = _pair(preds, gts)
    heads = [0] * p.shape[0] if heads is None else list(heads)
    if len(heads) != p.shape[0]:
        raise LengthMismatch(f"{len(heads)} head indices for {p.shape[0]} predictions")
    return [
        (math.degrees(vector_to_euler(b)[0]), math.degrees(vector_to_euler(a)[0]), int(h))
        for a, b, h in zip(p, g, heads)
    ]


def write_scatter_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for gt, pred, head in rows:
            w.writerow([repr(float(gt)), repr(float(pred)), int(head)])


def shifted_line_fraction(rows, shift_deg=180.0, within_deg=15.0):
    """Fraction of scatter rows within ``within_deg`` of the diagonal shifted by ``shift_deg``."""
    if not rows:
        return 0.0
    hits = 0
    for gt, pred, _ in rows:
        d = (pred - gt - shift_deg) % 360.0
        hits += min(d, 360.0 - d) <= within_deg
    return hits / len(rows)
