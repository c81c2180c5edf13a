"""Command-line experiment runner.

Every command validates its inputs before writing anything and produces
byte-identical artifacts for identical flags.  Exit codes: 0 success,
1 failed check, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evalkit, renderer
from .errors import (
    BadMagic,
    ConfigError,
    DegenerateMean,
    InvalidParam,
    ResolutionMismatch,
    TruncatedFile,
    ValueOutOfRange,
    VoxelViewError,
)
from .estimator import (
    OptimizerConfig,
    TrainConfig,
    TrainedEstimator,
    estimate_by_optimization,
    image_features,
    train_multihead,
)
from .geometry import euler_to_vector, sample_band, vector_to_euler
from .gradcheck import REL_TOL, run_gradcheck
from .volume import OBJECT_KINDS, make_test_object, read_volume, write_volume

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_IO = 3


class ManifestError(VoxelViewError):
    """A dataset manifest is missing, malformed or inconsistent."""


class _UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a training run."""

    seed: int = 0
    resolution: int = 16
    camera_distance: float = renderer.DEFAULT_DISTANCE
    object_kind: str = "car"
    n_images: int = 500
    elev_min_deg: float = -20.0
    elev_max_deg: float = 40.0
    heads: int = 3
    epochs: int = 200
    learning_rate: float = 0.5
    lr_decay: float = 0.02
    cycle_weight: float = 0.0
    target_mode: str = "rgb"
    output_dir: str = "."

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a u64")
        if not 16 <= self.resolution <= 128:
            raise ConfigError("resolution must be in [16, 128]")
        if not (self.camera_distance > 1.0):
            raise ConfigError("camera_distance must exceed 1 (inf for orthographic)")
        if self.object_kind not in OBJECT_KINDS:
            raise ConfigError(f"object_kind must be one of {', '.join(OBJECT_KINDS)}")
        if not self.n_images >= 1:
            raise ConfigError("n_images must be >= 1")
        if not -90.0 < self.elev_min_deg < self.elev_max_deg < 90.0:
            raise ConfigError("elevation band must satisfy -90 < min < max < 90")
        # remaining fields are checked by TrainConfig
        self.train_config()

    def train_config(self):
        return TrainConfig(
            seed=self.seed,
            heads=self.heads,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            cycle_weight=self.cycle_weight,
            target_mode=self.target_mode,
            elevation_band_deg=(self.elev_min_deg, self.elev_max_deg),
        )

    def camera(self):
        return renderer.CameraModel(self.camera_distance)

    def to_json(self):
        d = asdict(self)
        if math.isinf(self.camera_distance):
            d["camera_distance"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("camera_distance") == "inf":
            d["camera_distance"] = math.inf
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def training_set(cfg):
    """Images of the configured object at viewpoints drawn from the band."""
    rng = np.random.default_rng(cfg.seed)
    vol = make_test_object(cfg.object_kind, cfg.resolution)
    gts = sample_band(rng, cfg.n_images, cfg.elev_min_deg, cfg.elev_max_deg)
    images = renderer.render_many(vol, gts, cfg.camera())
    return [(img, cfg.object_kind) for img in images], {cfg.object_kind: vol}, gts


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Dataset:
    volume_path: Path | None
    camera: renderer.CameraModel
    image_paths: list
    alpha_paths: list
    viewpoints: np.ndarray

    def load_images(self):
        out = []
        for img, alpha in zip(self.image_paths, self.alpha_paths):
            a = renderer.read_pgm(alpha) if alpha is not None else None
            out.append(renderer.read_ppm(img, a))
        return out


def _number(item, key, where):
    val = item.get(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        raise ManifestError(f"{where}: {key} must be a finite number")
    return float(val)


def read_manifest(path, need_images=True):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("items"), list):
        raise ManifestError(f"{path}: expected an object with an 'items' list")
    base = path.parent
    dist = doc.get("camera_distance", renderer.DEFAULT_DISTANCE)
    dist = math.inf if dist in ("inf", None) else dist
    try:
        camera = renderer.CameraModel(float(dist))
    except (InvalidParam, TypeError, ValueError):
        raise ManifestError(f"{path}: bad camera_distance {dist!r}") from None
    volume = doc.get("volume")
    images, alphas, vps = [], [], []
    for i, item in enumerate(doc["items"]):
        where = f"{path}: item {i}"
        if not isinstance(item, dict):
            raise ManifestError(f"{where}: expected an object")
        az = _number(item, "azimuth_deg", where)
        el = _number(item, "elevation_deg", where)
        if not -90.0 <= el <= 90.0:
            raise ManifestError(f"{where}: elevation out of range")
        vps.append(euler_to_vector(math.radians(az), math.radians(el)))
        if need_images:
            if not isinstance(item.get("image"), str):
                raise ManifestError(f"{where}: missing image path")
            img = base / item["image"]
            if not img.is_file():
                raise FileNotFoundError(f"{where}: image {img} not found")
            images.append(img)
            alpha = item.get("alpha")
            alphas.append(base / alpha if isinstance(alpha, str) else None)
    return Dataset(
        base / volume if isinstance(volume, str) else None,
        camera,
        images,
        alphas,
        np.array(vps).reshape(-1, 3),
    )


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _companion(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix)


def _split(n, calibration):
    """Calibration indices then evaluation indices.

    When there is nothing left after the calibration batch the whole set
    is evaluated.
    """
    k = min(calibration, n)
    cal = list(range(k))
    rest = list(range(k, n)) or list(range(n))
    return cal, rest


# ---------------------------------------------------------------------------
# commands


def cmd_gen_object(args):
    vol = make_test_object(args.kind, args.res)
    write_volume(vol, args.out)
    print(f"wrote {args.kind} at resolution {args.res} to {args.out}")
    return EXIT_OK


def cmd_render_dataset(args):
    if args.n < 1:
        raise InvalidParam("--n must be >= 1")
    vol = read_volume(args.volume)
    camera = renderer.CameraModel(args.camera_distance)
    rng = np.random.default_rng(args.seed)
    gts = sample_band(rng, args.n, args.elev_min, args.elev_max)
    images = renderer.render_many(vol, gts, camera)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(args.n - 1))
    items = []
    for i, (img, v) in enumerate(zip(images, gts)):
        name = f"img_{i:0{width}d}"
        renderer.write_ppm(out / f"{name}.ppm", img)
        renderer.write_pgm(out / f"{name}.pgm", img.alpha)
        az, el = vector_to_euler(v)
        items.append(
            {"image": f"{name}.ppm", "alpha": f"{name}.pgm", "azimuth_deg": math.degrees(az), "elevation_deg": math.degrees(el)}
        )
    manifest = {
        "volume": os.path.relpath(Path(args.volume).resolve(), out.resolve()),
        "camera_distance": "inf" if camera.orthographic else camera.distance,
        "items": items,
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {args.n} images and manifest.json to {out}")
    return EXIT_OK


def _dataset_volume(args, ds):
    path = args.volume or ds.volume_path
    if path is None:
        raise ManifestError("no volume given and the manifest names none")
    return read_volume(path)


def _emit_report(report, path, rows, scatter_path):
    Path(path).write_text(report.to_json())
    evalkit.write_scatter_csv(scatter_path or _companion(path, ".scatter.csv"), rows)


def cmd_recover(args):
    if args.starts < 1:
        raise InvalidParam("--starts must be >= 1")
    ds = read_manifest(args.dataset)
    vol = _dataset_volume(args, ds)
    images = ds.load_images()
    for img in images:
        if img.shape != (vol.resolution, vol.resolution):
            raise ResolutionMismatch(f"image is {img.shape}, volume resolution is {vol.resolution}")
    cfg = OptimizerConfig()
    preds = np.array([estimate_by_optimization(img, vol, ds.camera, args.starts, cfg)[0] for img in images])
    report = evalkit.compute_metrics(preds, ds.viewpoints, evalkit.AlignmentTransform.identity(), mode=args.mode)
    _emit_report(report, args.report, evalkit.scatter_data(preds, ds.viewpoints), args.scatter)
    print(f"recovered {len(images)} viewpoints: accuracy@30 {report.accuracy_at_30:.3f}, median {report.median_error_deg:.3f} deg")
    return EXIT_OK


def cmd_train(args):
    cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    data, volumes, _ = training_set(cfg)
    est = train_multihead(data, volumes, cfg.train_config(), cfg.camera())
    Path(args.out).write_text(est.to_json())
    loss_path = args.loss_csv or _companion(args.out, ".loss.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_recon_loss"])
        for i, loss in enumerate(est.history):
            w.writerow([i, repr(float(loss))])
    print(f"trained {cfg.heads} head(s) for {cfg.epochs} epochs; model in {args.out}")
    return EXIT_OK


def _fit_alignment(kind, preds, gts):
    if kind == "none":
        return evalkit.AlignmentTransform.identity()
    if kind == "procrustes":
        return evalkit.procrustes_align(preds, gts)
    return evalkit.linear_align(preds, gts)


def cmd_evaluate(args):
    if args.calibration < 0:
        raise InvalidParam("--calibration must be >= 0")
    try:
        est = TrainedEstimator.from_json(Path(args.model).read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.model}: not a usable model: {exc}") from None
    ds = read_manifest(args.dataset)
    images = ds.load_images()
    chosen = [est.predict_features(image_features(img)) for img in images]
    preds = np.array([v for v, _ in chosen]).reshape(-1, 3)
    heads = [m for _, m in chosen]
    cal, rest = _split(len(images), args.calibration)
    align = _fit_alignment(args.align, preds[cal], ds.viewpoints[cal])
    report = evalkit.compute_metrics(preds[rest], ds.viewpoints[rest], align, mode=args.mode)
    report.extra["calibration_size"] = len(cal)
    aligned = align.apply(preds[rest])
    rows = evalkit.scatter_data(aligned, ds.viewpoints[rest], [heads[i] for i in rest])
    _emit_report(report, args.report, rows, args.scatter)
    print(f"accuracy@30 {report.accuracy_at_30:.3f}, median {report.median_error_deg:.2f} deg, dva {report.dva:.3f}")
    return EXIT_OK


def cmd_bias_report(args):
    if args.calibration < 1:
        raise InvalidParam("--calibration must be >= 1")
    ds = read_manifest(args.gts, need_images=False)
    if ds.viewpoints.shape[0] == 0:
        raise ManifestError(f"{args.gts}: no items")
    cal, rest = _split(ds.viewpoints.shape[0], args.calibration)
    try:
        c = evalkit.constant_predictor(ds.viewpoints[cal])
    except DegenerateMean as exc:
        doc = {"error": f"DegenerateMean: {exc}", "n_samples": len(rest), "calibration_size": len(cal)}
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print("constant predictor undefined: mean viewpoint vanishes")
        return EXIT_OK
    gts = ds.viewpoints[rest]
    report = evalkit.compute_metrics(np.tile(c, (len(rest), 1)), gts, mode=args.mode)
    az, el = vector_to_euler(c)
    report.extra["calibration_size"] = len(cal)
    report.extra["constant_viewpoint"] = {"azimuth_deg": math.degrees(az), "elevation_deg": math.degrees(el)}
    Path(args.report).write_text(report.to_json())
    print(
        f"constant predictor: accuracy@30 {report.accuracy_at_30:.3f}, dva {report.dva:.3f}, "
        f"confidence index {report.confidence_index:.3f}"
    )
    return EXIT_OK


def cmd_gradcheck(args):
    res = run_gradcheck(args.res, args.trials, args.seed)
    failed = sum(e >= REL_TOL for e in res.errors)
    print(f"worst relative error {res.worst:.3e} over {len(res.errors)} trials ({res.redraws} redraws)")
    if failed:
        print(f"{failed} trial(s) at or above {REL_TOL:g}")
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _distance(text):
    return math.inf if text.strip().lower() == "inf" else float(text)


def build_parser():
    p = _Parser(prog="voxelview", description="Differentiable voxel rendering and viewpoint estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-object", help="write a procedural test volume")
    s.add_argument("--kind", required=True, choices=OBJECT_KINDS)
    s.add_argument("--res", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_object)

    s = sub.add_parser("render-dataset", help="render images at random band viewpoints")
    s.add_argument("--volume", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--elev-min", type=float, default=-20.0)
    s.add_argument("--elev-max", type=float, default=40.0)
    s.add_argument("--camera-distance", type=_distance, default=renderer.DEFAULT_DISTANCE)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_render_dataset)

    s = sub.add_parser("recover", help="recover each image's viewpoint by optimization")
    s.add_argument("--volume")
    s.add_argument("--dataset", required=True)
    s.add_argument("--starts", type=int, default=8)
    s.add_argument("--mode", choices=("geodesic", "azimuth"), default="geodesic")
    s.add_argument("--report", required=True)
    s.add_argument("--scatter")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("train", help="train the multi-head regressor")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a trained model on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--align", choices=("procrustes", "linear", "none"), default="procrustes")
    s.add_argument("--calibration", type=int, default=8)
    s.add_argument("--mode", choices=("geodesic", "azimuth"), default="geodesic")
    s.add_argument("--report", required=True)
    s.add_argument("--scatter")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bias-report", help="score the constant mean-viewpoint predictor")
    s.add_argument("--gts", required=True)
    s.add_argument("--calibration", type=int, default=8)
    s.add_argument("--mode", choices=("geodesic", "azimuth"), default="geodesic")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_bias_report)

    s = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    s.add_argument("--res", type=int, default=32)
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _validate_env():
    renderer.worker_count()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate_env()
        return args.func(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ManifestError, BadMagic, TruncatedFile, ValueOutOfRange) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvalidParam, ConfigError, ResolutionMismatch, VoxelViewError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
