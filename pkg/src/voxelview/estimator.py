"""Viewpoint estimation: direct optimization and a multi-head regressor."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from . import renderer
from .errors import ConfigError, DegenerateUp, EmptyHypotheses, InvalidParam
from .geometry import PARALLEL_TOL, UP, fibonacci_sphere, normalize, sample_band
from .volume import silhouette_of


@dataclass(frozen=True)
class HypothesisSet:
    hypotheses: np.ndarray
    recon_errors: np.ndarray
    selected: int

    @property
    def best(self):
        return self.hypotheses[self.selected]


def argmin_first(values):
    """Index of the smallest value, lowest index on ties."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EmptyHypotheses("no values")
    return int(np.flatnonzero(values == values.min())[0])


def select_best_head(hypotheses, volume, camera, target, u=UP):
    """Render every hypothesis and pick the lowest reconstruction error."""
    hyps = np.asarray(hypotheses, dtype=float).reshape(-1, 3)
    if hyps.shape[0] == 0:
        raise EmptyHypotheses("need at least one hypothesis")
    errors = np.array([renderer.render_loss(volume, h, target, camera, u) for h in hyps])
    return HypothesisSet(hyps, errors, argmin_first(errors))


# ---------------------------------------------------------------------------
# analysis by synthesis


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected gradient descent on the sphere with backtracking.

    Each start first descends a blurred loss (``coarse_blur`` pixels per
    32 pixels of image side, ``coarse_iters`` steps) to reach the right
    basin, then the plain loss for up to ``max_iters`` steps.  ``step``
    multiplies the gradient; it grows by ``grow`` after an accepted step
    and halves on each rejected trial, at most ``max_halvings`` times.
    Starting points are a Fibonacci spiral over ``seed_band_deg``.
    """

    max_iters: int = 20
    coarse_iters: int = 15
    coarse_blur: float = 2.0
    step: float = 10.0
    grow: float = 1.5
    max_step: float = 1000.0
    max_halvings: int = 20
    loss_tol: float = 1e-12
    seed_band_deg: tuple = (-20.0, 40.0)


@dataclass
class DescentTrace:
    """Result of one start; each phase's accepted losses are non-increasing."""

    viewpoint: np.ndarray
    loss: float
    losses: list
    coarse_losses: list


def _off_pole(v, u):
    """Move ``v`` 1e-3 rad past the edge of the pole region if it lies inside.

    The region |v.u| > 1 - 1e-6 has an angular radius of about 1.4e-3, so
    the iterate keeps its azimuth and is placed at that radius plus 1e-3.
    """
    c = float(v @ u)
    if abs(c) <= 1.0 - PARALLEL_TOL:
        return v
    t = v - c * u
    if np.linalg.norm(t) < 1e-12:
        t = np.cross(u, [1.0, 0.0, 0.0])
        if np.linalg.norm(t) < 1e-6:
            t = np.cross(u, [0.0, 1.0, 0.0])
    theta = math.acos(1.0 - PARALLEL_TOL) + 1e-3
    nudged = math.copysign(math.cos(theta), c) * u + math.sin(theta) * normalize(t)
    if not abs(float(nudged @ u)) <= 1.0 - PARALLEL_TOL:
        raise DegenerateUp("could not move iterate off the up axis")
    return nudged


def _descend_phase(target, volume, camera, v, iters, cfg, u, blur):
    loss, grad = renderer.render_loss_grad(volume, v, u, camera, target, blur=blur)
    losses = [loss]
    eta = cfg.step
    for _ in range(iters):
        if loss <= cfg.loss_tol or not np.any(grad):
            break
        for _ in range(cfg.max_halvings + 1):
            cand = _off_pole(normalize(v - eta * grad), u)
            cand_loss = renderer.render_loss(volume, cand, target, camera, u, blur=blur)
            if cand_loss <= loss:
                break
            eta *= 0.5
        else:
            break
        v = cand
        # keep the value the acceptance test compared; the gradient pass sums in another order
        _, grad = renderer.render_loss_grad(volume, v, u, camera, target, blur=blur)
        loss = cand_loss
        losses.append(loss)
        eta = min(eta * cfg.grow, cfg.max_step)
    return v, losses


def descend(target, volume, camera, v0, cfg=OptimizerConfig(), u=UP):
    """Coarse-to-fine projected-gradient run from ``v0``."""
    v = _off_pole(normalize(v0), u)
    coarse = []
    if cfg.coarse_iters > 0 and cfg.coarse_blur > 0:
        blur = cfg.coarse_blur * volume.resolution / 32.0
        v, coarse = _descend_phase(target, volume, camera, v, cfg.coarse_iters, cfg, u, blur)
    v, losses = _descend_phase(target, volume, camera, v, cfg.max_iters, cfg, u, 0.0)
    return DescentTrace(v, losses[-1], losses, coarse)


def seed_viewpoints(starts, cfg=OptimizerConfig()):
    lo, hi = cfg.seed_band_deg
    return fibonacci_sphere(starts, math.sin(math.radians(lo)), math.sin(math.radians(hi)))


def estimate_by_optimization(
    target, volume, camera, starts=8, cfg=OptimizerConfig(), u=UP, return_traces=False, seeds=None
):
    """Recover the viewpoint of ``target`` by multi-start descent.

    Starts from ``starts`` Fibonacci seeds over the band, or from the
    given ``seeds``.  Returns ``(viewpoint, loss)`` of the best start
    (lowest index on ties), plus the per-start traces when
    ``return_traces`` is set.
    """
    if seeds is None:
        if starts < 1:
            raise InvalidParam("starts must be >= 1")
        seeds = seed_viewpoints(starts, cfg)
    seeds = np.asarray(seeds, dtype=float).reshape(-1, 3)
    if seeds.shape[0] == 0:
        raise InvalidParam("need at least one start")
    traces = [descend(target, volume, camera, s, cfg, u) for s in seeds]
    best = argmin_first([t.loss for t in traces])
    out = (traces[best].viewpoint, traces[best].loss)
    return (*out, traces) if return_traces else out


# ---------------------------------------------------------------------------
# multi-head regressor

FEATURE_SIDE = 16


def image_features(image, side=FEATURE_SIDE):
    """Flattened ``side`` x ``side`` grayscale downsampling of an image.

    Sides that are a multiple of ``side`` are block averaged; others are
    resampled linearly.
    """
    g = image.gray()
    h, w = g.shape
    if h % side == 0 and w % side == 0:
        g = g.reshape(side, h // side, side, w // side).mean(axis=(1, 3))
    else:
        g = ndimage.zoom(g, (side / h, side / w), order=1, grid_mode=True, mode="nearest")
    return g.ravel()


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of :func:`train_multihead`.

    ``target_mode`` ``"silhouette"`` reconstructs the input's alpha mask
    with a white copy of the volume instead of its colours.  ``blur``
    smooths the reconstruction loss (pixels per 32 of image side).  The
    step size of epoch t is ``learning_rate / (1 + lr_decay * t)``.
    """

    seed: int = 0
    heads: int = 3
    epochs: int = 200
    learning_rate: float = 0.5
    lr_decay: float = 0.02
    hidden: int = 64
    cycle_weight: float = 0.0
    target_mode: str = "rgb"
    clip_norm: float = 1.0
    blur: float = 0.0
    bias_scale: float = 1.0
    elevation_band_deg: tuple = (-20.0, 40.0)

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_decay < 0:
            raise ConfigError("lr_decay must be >= 0")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if self.cycle_weight < 0:
            raise ConfigError("cycle_weight must be >= 0")
        if self.target_mode not in ("rgb", "silhouette"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.blur < 0:
            raise ConfigError("blur must be >= 0")
        lo, hi = self.elevation_band_deg
        if not -90.0 < lo < hi < 90.0:
            raise ConfigError("elevation band must satisfy -90 < lo < hi < 90")

    def to_dict(self):
        d = asdict(self)
        d["elevation_band_deg"] = list(self.elevation_band_deg)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "elevation_band_deg" in d:
            d["elevation_band_deg"] = tuple(d["elevation_band_deg"])
        return cls(**d)


_LAYER_NAMES = ("w1", "b1", "w2", "b2")


def _init_mlp(rng, n_in, hidden, n_out):
    return {
        "w1": rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(n_out, hidden)),
        "b2": np.zeros(n_out),
    }


def _mlp_forward(p, x):
    h = np.tanh(p["w1"] @ x + p["b1"])
    return p["w2"] @ h + p["b2"], h


def _mlp_backward(p, x, h, g_out):
    g_h = (p["w2"].T @ g_out) * (1.0 - h * h)
    return {"w1": np.outer(g_h, x), "b1": g_h, "w2": np.outer(g_out, h), "b2": g_out}


def _sgd_clipped(p, grads, lr, clip):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = lr * min(1.0, clip / norm) if norm > 0 else 0.0
    for k in _LAYER_NAMES:
        p[k] = p[k] - scale * grads[k]


def _head_viewpoint(raw):
    norm = float(np.linalg.norm(raw))
    if norm < 1e-12:
        # a dead output still has to be a valid viewpoint
        return np.array([1.0, 0.0, 0.0]), norm
    return raw / norm, norm


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class TrainedEstimator:
    """M viewpoint heads and a selection head over shared image features.

    Parameters are read-only once constructed.  ``history`` holds the mean
    reconstruction loss of each epoch.
    """

    heads: tuple
    selector: dict
    config: TrainConfig
    history: tuple = ()

    def __post_init__(self):
        for p in (*self.heads, self.selector):
            for a in p.values():
                a.flags.writeable = False

    @property
    def n_heads(self):
        return len(self.heads)

    def head_outputs(self, features):
        """(M, 3) unit viewpoints proposed by every head."""
        return np.array([_head_viewpoint(_mlp_forward(p, features)[0])[0] for p in self.heads])

    def logits(self, features):
        return _mlp_forward(self.selector, features)[0]

    def predict_features(self, features):
        """(viewpoint, head index) chosen by the selection head."""
        m = int(np.argmax(self.logits(features)))
        return _head_viewpoint(_mlp_forward(self.heads[m], features)[0])[0], m

    def to_json(self):
        def flat(p):
            return {k: {"shape": list(p[k].shape), "data": p[k].ravel().tolist()} for k in _LAYER_NAMES}

        doc = {
            "format": "voxelview-estimator-1",
            "features": FEATURE_SIDE * FEATURE_SIDE,
            "hidden": self.config.hidden,
            "heads": [flat(p) for p in self.heads],
            "selector": flat(self.selector),
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "history": [float(x) for x in self.history],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "voxelview-estimator-1":
            raise ConfigError("not a serialized estimator")

        def unflat(d):
            return {k: np.array(d[k]["data"], dtype=float).reshape(d[k]["shape"]) for k in _LAYER_NAMES}

        return cls(
            tuple(unflat(h) for h in doc["heads"]),
            unflat(doc["selector"]),
            TrainConfig.from_dict(doc["config"]),
            tuple(doc["history"]),
        )


def init_estimator(cfg):
    """Untrained estimator with weights drawn from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n_in = FEATURE_SIDE * FEATURE_SIDE
    heads = tuple(_init_mlp(rng, n_in, cfg.hidden, 3) for _ in range(cfg.heads))
    # each head starts out proposing a different band viewpoint
    lo, hi = cfg.elevation_band_deg
    starts = fibonacci_sphere(cfg.heads, math.sin(math.radians(lo)), math.sin(math.radians(hi)))
    for p, s in zip(heads, starts):
        p["b2"] = cfg.bias_scale * s
    selector = _init_mlp(rng, n_in, cfg.hidden, cfg.heads)
    return TrainedEstimator(heads, selector, cfg)


def predict(estimator, image):
    """Viewpoint from the head the selection head ranks highest."""
    return estimator.predict_features(image_features(image))[0]


def silhouette_target(image):
    """White-on-black mask image made from an input's alpha channel."""
    a = np.asarray(image.alpha, dtype=float)
    return renderer.RenderedImage(np.repeat(a[..., None], 3, axis=-1), a)


def cycle_loss(estimator, volume, camera, sampled_v, u=UP):
    """Distance between the prediction for a rendered view and its viewpoint."""
    v = normalize(sampled_v)
    img = renderer.render_view(volume, v, camera, u)
    return float(np.linalg.norm(predict(estimator, img) - v))


class _Trainer:
    """Mutable working copy of the parameters plus the per-step updates."""

    def __init__(self, cfg, volumes, camera, u):
        est = init_estimator(cfg)
        self.cfg = cfg
        self.heads = [{k: np.array(a) for k, a in p.items()} for p in est.heads]
        self.selector = {k: np.array(a) for k, a in est.selector.items()}
        self.camera = camera
        self.u = u
        if cfg.target_mode == "silhouette":
            volumes = {k: silhouette_of(v) for k, v in volumes.items()}
        self.volumes = volumes
        self.lr = cfg.learning_rate

    def _head_forward(self, m, x):
        raw, h = _mlp_forward(self.heads[m], x)
        v, norm = _head_viewpoint(raw)
        return _off_pole(v, self.u), norm, h

    def _update_head(self, m, x, h, norm, g_v):
        # tangent gradient through v = raw / |raw|
        if norm < 1e-12:
            return
        grads = _mlp_backward(self.heads[m], x, h, g_v / norm)
        _sgd_clipped(self.heads[m], grads, self.lr, self.cfg.clip_norm)

    def recon_step(self, x, target, volume):
        """Winner-take-all update; returns (winner, winning loss)."""
        blur = self.cfg.blur * volume.resolution / 32.0
        outs = [self._head_forward(m, x) for m in range(len(self.heads))]
        errors = [renderer.render_loss(volume, v, target, self.camera, self.u, blur=blur) for v, _, _ in outs]
        win = argmin_first(errors)
        v, norm, h = outs[win]
        _, g = renderer.render_loss_grad(volume, v, self.u, self.camera, target, blur=blur)
        self._update_head(win, x, h, norm, g)
        # selection head: cross-entropy against one-hot(win)
        logits, hs = _mlp_forward(self.selector, x)
        g_logits = _softmax(logits)
        g_logits[win] -= 1.0
        grads = _mlp_backward(self.selector, x, hs, g_logits)
        _sgd_clipped(self.selector, grads, self.lr, self.cfg.clip_norm)
        return win, errors[win]

    def cycle_step(self, volume, v_sampled):
        """Pull the selected head's prediction for a rendered view towards its viewpoint."""
        img = renderer.render_view(volume, v_sampled, self.camera, self.u)
        x = image_features(img)
        m = int(np.argmax(_mlp_forward(self.selector, x)[0]))
        v, norm, h = self._head_forward(m, x)
        d = v - v_sampled
        dist = float(np.linalg.norm(d))
        if dist < 1e-12:
            return m
        g = self.cfg.cycle_weight * d / dist
        g = g - (g @ v) * v
        self._update_head(m, x, h, norm, g)
        return m

    def freeze(self, history):
        heads = tuple({k: np.array(a) for k, a in p.items()} for p in self.heads)
        selector = {k: np.array(a) for k, a in self.selector.items()}
        return TrainedEstimator(heads, selector, self.cfg, tuple(history))


def _check_dataset(dataset, volumes):
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    for _, vid in dataset:
        if vid not in volumes:
            raise ConfigError(f"dataset names unknown volume {vid!r}")


def train_multihead(dataset, volumes, cfg=TrainConfig(), camera=renderer.CameraModel(), u=UP, on_epoch=None):
    """Train M heads from reconstruction error alone.

    ``dataset`` is a sequence of ``(image, volume_id)``.  Each sample
    renders every head's viewpoint, backpropagates the reconstruction loss
    into the lowest-error head only and trains the selection head towards
    that winner.  With ``cycle_weight`` > 0 every sample is followed by a
    separate cycle step on a view rendered at a random band viewpoint.
    ``on_epoch(epoch, mean_loss, snapshot)`` is called after each epoch;
    ``snapshot()`` returns the estimator as trained so far.
    """
    _check_dataset(dataset, volumes)
    trainer = _Trainer(cfg, volumes, camera, u)
    rng = np.random.default_rng(cfg.seed + 1)
    feats = [image_features(img) for img, _ in dataset]
    targets = [silhouette_target(img) if cfg.target_mode == "silhouette" else img for img, _ in dataset]
    lo, hi = cfg.elevation_band_deg
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        trainer.lr = cfg.learning_rate / (1.0 + cfg.lr_decay * epoch)
        total = 0.0
        for i in order:
            vol = trainer.volumes[dataset[i][1]]
            _, loss = trainer.recon_step(feats[i], targets[i], vol)
            total += loss
            if cfg.cycle_weight > 0:
                trainer.cycle_step(volumes[dataset[i][1]], sample_band(rng, 1, lo, hi)[0])
        history.append(total / len(dataset))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], lambda: trainer.freeze(history))
    return trainer.freeze(history)


def winning_heads(estimator, dataset, volumes, camera=renderer.CameraModel(), u=UP):
    """Index of the lowest reconstruction-error head for every sample."""
    _check_dataset(dataset, volumes)
    if estimator.config.target_mode == "silhouette":
        volumes = {k: silhouette_of(v) for k, v in volumes.items()}
    out = []
    for img, vid in dataset:
        target = silhouette_target(img) if estimator.config.target_mode == "silhouette" else img
        hyps = estimator.head_outputs(image_features(img))
        out.append(select_best_head(hyps, volumes[vid], camera, target, u).selected)
    return out
