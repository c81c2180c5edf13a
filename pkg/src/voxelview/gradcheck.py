"""Finite-difference verification of :func:`render_loss_grad`.

Trilinear sampling is only piecewise smooth, so a central difference is
exact to O(eps^2) only when no sample whose neighbourhood carries any
slope moves to another cell within the +-eps perturbation.  Configurations
that violate this are redrawn (and counted) rather than scored.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import renderer
from .errors import InvalidParam
from .geometry import UP, normalize, sample_band, view_rotation
from .volume import OBJECT_KINDS, make_test_object

FD_EPS = 1e-4
REL_TOL = 1e-3


def central_difference(fun, x, eps=FD_EPS):
    """Central-difference gradient of a scalar ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = eps
        g[k] = (fun(x + e) - fun(x - e)) / (2.0 * eps)
    return g


def fd_viewpoint_grad(volume, v, target, camera, u=UP, eps=FD_EPS):
    """Tangent-projected central difference of the render loss at ``v``."""
    g = central_difference(lambda x: renderer.render_loss(volume, x, target, camera, u), v, eps)
    vh = normalize(v)
    return g - (g @ vh) * vh


def crosses_cell_boundary(volume, v, u=UP, eps=FD_EPS):
    """True if a +-eps step in any coordinate of ``v`` moves a non-flat sample to another cell."""
    prep = renderer._prepare(volume, True)
    n = prep.n
    c = (n - 1) / 2.0
    t0 = c + prep.active_offsets @ view_rotation(v, u)
    cell = np.floor(t0)
    _, d0 = renderer._trilinear(prep.flat, n, t0, grad=True)
    slope0 = np.any(d0 != 0.0, axis=(1, 2))
    for k in range(3):
        for sign in (1.0, -1.0):
            e = np.zeros(3)
            e[k] = sign * eps
            t = c + prep.active_offsets @ view_rotation(np.asarray(v) + e, u)
            moved = np.any(np.floor(t) != cell, axis=1)
            if not moved.any():
                continue
            if slope0[moved].any():
                return True
            _, d1 = renderer._trilinear(prep.flat, n, t[moved], grad=True)
            if np.any(d1 != 0.0):
                return True
    return False


@dataclass
class GradcheckResult:
    errors: list = field(default_factory=list)
    redraws: int = 0
    seconds: float = 0.0

    @property
    def worst(self):
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self):
        return all(e < REL_TOL for e in self.errors)


def relative_error(analytic, reference):
    return float(np.linalg.norm(analytic - reference) / max(np.linalg.norm(reference), 1e-300))


def run_gradcheck(resolution=32, trials=50, seed=0, camera=None, eps=FD_EPS, max_redraws=10000):
    """Compare analytic and finite-difference gradients on random setups.

    Each trial draws a test object, a viewpoint in the default band and a
    target rendered from a perturbed viewpoint.
    """
    if trials < 1:
        raise InvalidParam("trials must be >= 1")
    if resolution < 16:
        raise InvalidParam("gradcheck needs resolution >= 16")
    camera = camera or renderer.CameraModel()
    rng = np.random.default_rng(seed)
    volumes = {k: make_test_object(k, resolution) for k in OBJECT_KINDS}
    result = GradcheckResult()
    start = time.perf_counter()
    for i in range(trials):
        vol = volumes[OBJECT_KINDS[i % len(OBJECT_KINDS)]]
        while True:
            v = sample_band(rng, 1)[0]
            target_v = normalize(v + 0.3 * rng.normal(size=3))
            if abs(target_v[2]) < 0.95 and not crosses_cell_boundary(vol, v, eps=eps):
                break
            result.redraws += 1
            if result.redraws > max_redraws:
                raise RuntimeError("could not find configurations clear of cell boundaries")
        target = renderer.render_view(vol, target_v, camera)
        _, g = renderer.render_loss_grad(vol, v, UP, camera, target)
        fd = fd_viewpoint_grad(vol, v, target, camera, eps=eps)
        result.errors.append(relative_error(g, fd))
    result.seconds = time.perf_counter() - start
    return result
