"""Differentiable rendering: rotate, perspective-warp, composite.

All three stages work on the (n, n, n, 4) channel stack of a
:class:`~voxelview.volume.VoxelVolume` (RGB then occupancy, indexed
``[x, y, z]``).  Rays run along +y; the front of every ray is ``y = -1``
(index 0), nearest the camera.  Images are (n, n) with row 0 at the top
(+z) and column 0 on the left (-x).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import gaussian_filter

from .errors import InvalidParam, ResolutionMismatch
from .geometry import UP, view_rotation, view_rotation_jacobian
from .volume import VoxelVolume

DEFAULT_DISTANCE = 2.5


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera on the -y side of the volume.

    ``distance`` is measured from the volume centre in half-extents;
    ``math.inf`` gives an orthographic camera.
    """

    distance: float = DEFAULT_DISTANCE

    def __post_init__(self):
        if not self.distance > 1.0:
            raise InvalidParam(f"camera distance must exceed 1, got {self.distance}")

    @property
    def orthographic(self):
        return math.isinf(self.distance)

    @classmethod
    def ortho(cls):
        return cls(math.inf)


@dataclass(frozen=True, eq=False)
class RenderedImage:
    """``rgb`` is (h, w, 3), ``alpha`` is (h, w); both in [0, 1]."""

    rgb: np.ndarray
    alpha: np.ndarray

    @property
    def shape(self):
        return self.alpha.shape

    def gray(self):
        return self.rgb @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# trilinear sampling


def _pad(data):
    """Zero-pad one voxel on each side and flatten to (P^3, C)."""
    padded = np.pad(data, ((1, 1), (1, 1), (1, 1), (0, 0)))
    return padded.reshape(-1, data.shape[-1])


def _trilinear(flat, n, t, grad=False, lo=None, hi=None):
    """Sample a zero-padded grid at voxel coordinates ``t`` (N, 3).

    ``flat`` comes from :func:`_pad`.  Returns values (N, C) and, when
    ``grad`` is set, d value / d t as (N, C, 3).  At cell boundaries the
    derivative is the one of the cell ``floor(t)``.  ``lo``/``hi`` are
    optional per-axis index bounds of the nonzero data; samples whose
    cell lies entirely outside them are skipped.
    """
    P = n + 2
    nc = flat.shape[1]
    out = np.zeros((t.shape[0], nc))
    dout = np.zeros((t.shape[0], nc, 3)) if grad else None
    lo = -1.0 if lo is None else np.asarray(lo) - 1.0
    hi = float(n) if hi is None else np.asarray(hi) + 1.0
    valid = np.all((t > lo) & (t < hi), axis=1)
    if not valid.any():
        return out, dout
    tv = t[valid]
    i0 = np.floor(tv).astype(np.int64)
    f = tv - i0
    b = ((i0[:, 0] + 1) * P + (i0[:, 1] + 1)) * P + (i0[:, 2] + 1)
    dx, dy = P * P, P
    v000, v001 = flat[b], flat[b + 1]
    v010, v011 = flat[b + dy], flat[b + dy + 1]
    v100, v101 = flat[b + dx], flat[b + dx + 1]
    v110, v111 = flat[b + dx + dy], flat[b + dx + dy + 1]
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    a00 = v000 * gz + v001 * fz
    a01 = v010 * gz + v011 * fz
    a10 = v100 * gz + v101 * fz
    a11 = v110 * gz + v111 * fz
    b0 = a00 * gy + a01 * fy
    b1 = a10 * gy + a11 * fy
    out[valid] = b0 * gx + b1 * fx
    if grad:
        d = np.empty((tv.shape[0], nc, 3))
        d[:, :, 0] = b1 - b0
        d[:, :, 1] = (a01 - a00) * gx + (a11 - a10) * fx
        d[:, :, 2] = ((v001 - v000) * gy + (v011 - v010) * fy) * gx + ((v101 - v100) * gy + (v111 - v110) * fy) * fx
        dout[valid] = d
    return out, dout


@lru_cache(maxsize=16)
def _offsets(n):
    """Grid points relative to the centre, voxel units, (n^3, 3) C-order."""
    c = (n - 1) / 2.0
    a = np.arange(n) - c
    g = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


class _Prepared:
    """Padded samples and the support radius of one volume.

    With ``for_render`` the support only covers what a rendered image can
    depend on: colour counts only where the warped occupancy is nonzero,
    and a perspective stencil reaches at most sqrt(2) from a rotated point
    whose own occupancy neighbourhood is nonzero.  Everything farther out
    is left at zero, which changes neither the image nor its gradient.
    """

    def __init__(self, volume, for_render=False):
        n = volume.resolution
        data = volume.channels()
        self.n = n
        self.flat = _pad(data)
        off = _offsets(n)
        nz3 = np.any(data != 0.0, axis=-1)
        if nz3.any():
            idx = np.argwhere(nz3)
            self.lo, self.hi = idx.min(axis=0).astype(float), idx.max(axis=0).astype(float)
        else:
            self.lo = self.hi = None
        margin = math.sqrt(3.0)
        if for_render:
            nz3 = data[..., 3] != 0.0
            margin += math.sqrt(2.0)
        nz = nz3.reshape(-1)
        radius = float(np.sqrt((off[nz] ** 2).sum(axis=1).max())) if nz.any() else -np.inf
        # output points farther than this only touch zero voxels (or colour nothing can see)
        self.active = np.flatnonzero((off**2).sum(axis=1) <= (radius + margin + 1e-9) ** 2)
        self.active_offsets = off[self.active]


@lru_cache(maxsize=16)
def _prepare(volume, for_render=False):
    return _Prepared(volume, for_render)


def _rotate_channels(prep, r, grad=False):
    """Rotated (n^3, 4) stack; optionally d/dt at the active points."""
    n = prep.n
    c = (n - 1) / 2.0
    t = c + prep.active_offsets @ r
    vals, dvals = _trilinear(prep.flat, n, t, grad, prep.lo, prep.hi)
    out = np.zeros((n**3, 4))
    out[prep.active] = vals
    return out, dvals


def rotate_volume(volume, r):
    """Resample ``volume`` so the output at ``x`` is the input at ``r^-1 x``.

    Trilinear with zero padding; the identity is reproduced bit for bit.
    """
    r = np.asarray(r, dtype=float)
    prep = _prepare(volume)
    out, _ = _rotate_channels(prep, r)
    n = prep.n
    return VoxelVolume.from_channels(np.clip(out.reshape(n, n, n, 4), 0.0, 1.0), volume.frame)


# ---------------------------------------------------------------------------
# perspective


@lru_cache(maxsize=16)
def perspective_operator(n, distance):
    """Sparse (n^3, n^3) matrix of the perspective warp.

    Output ``(x, y, z)`` samples the input at ``(x s, y, z s)`` with
    ``s = (d + y) / d`` in normalized coordinates.  Depth is untouched, so
    each row has at most four bilinear weights.
    """
    c = (n - 1) / 2.0
    idx = np.arange(n)
    s = (distance + (idx - c) / c) / distance
    i, j, k = np.meshgrid(idx, idx, idx, indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    tx = c + (i - c) * s[j]
    tz = c + (k - c) * s[j]
    rows, cols, vals = [], [], []
    x0 = np.floor(tx).astype(np.int64)
    z0 = np.floor(tz).astype(np.int64)
    fx, fz = tx - x0, tz - z0
    out_row = np.arange(n**3)
    for ox, wx in ((0, 1.0 - fx), (1, fx)):
        for oz, wz in ((0, 1.0 - fz), (1, fz)):
            xi, zi = x0 + ox, z0 + oz
            w = wx * wz
            ok = (xi >= 0) & (xi < n) & (zi >= 0) & (zi < n) & (w != 0.0)
            rows.append(out_row[ok])
            cols.append((xi[ok] * n + j[ok]) * n + zi[ok])
            vals.append(w[ok])
    rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    return sp.csr_matrix((vals, (rows, cols)), shape=(n**3, n**3))


def _warp(flat, n, camera):
    if camera.orthographic:
        return flat
    return perspective_operator(n, float(camera.distance)) @ flat


def apply_perspective(volume, camera):
    """Warp so that all camera rays become parallel to the depth axis."""
    n = volume.resolution
    if camera.orthographic:
        return volume
    out = _warp(volume.channels().reshape(-1, 4), n, camera)
    return VoxelVolume.from_channels(np.clip(out.reshape(n, n, n, 4), 0.0, 1.0), volume.frame)


# ---------------------------------------------------------------------------
# compositing


def _transmittance(q):
    """Probability of reaching each depth unblocked; rays along axis 0."""
    t = np.empty_like(q)
    t[0] = 1.0
    np.cumprod(1.0 - q[:-1], axis=0, out=t[1:])
    return t


def stopping_probabilities(q):
    """Per-depth stopping probability ``Q_k prod_{l<k} (1 - Q_l)`` along axis 0."""
    q = np.asarray(q, dtype=float)
    return q * _transmittance(q)


def _depth_major(data):
    """(x, y, z, c) -> contiguous (y, x, z, c) so each depth slice is one block."""
    return np.ascontiguousarray(data.transpose(1, 0, 2, 3))


def _composite_rays(rays):
    """(depth, x, z, 4) -> rgb (x, z, 3), alpha (x, z), transmittance."""
    q = rays[..., 3]
    trans = _transmittance(q)
    stop = q * trans
    rgb = (rays[..., :3] * stop[..., None]).sum(axis=0)
    return rgb, stop.sum(axis=0), trans


def _to_image(rgb_raw, alpha_raw):
    return RenderedImage(np.ascontiguousarray(rgb_raw[:, ::-1].transpose(1, 0, 2)), np.ascontiguousarray(alpha_raw[:, ::-1].T))


def _from_image(img):
    return img.rgb[::-1].transpose(1, 0, 2)


def composite(volume):
    """Front-to-back compositing along the depth axis."""
    rgb, alpha, _ = _composite_rays(_depth_major(volume.channels()))
    return _to_image(rgb, alpha)


def _composite_backward(rays, trans, g_rgb):
    """d loss / d (C, Q) for depth-major ``rays`` given d loss / d rgb."""
    colors, q = rays[..., :3], rays[..., 3]
    g = np.zeros_like(rays)
    occupied = np.flatnonzero(q.any(axis=(1, 2)))
    if occupied.size == 0:
        return g
    first, last = occupied[0], occupied[-1]
    stop = q * trans
    g[..., :3] = stop[..., None] * g_rgb
    # behind[k] = light gathered strictly behind depth k, as seen from k
    behind = np.zeros_like(colors)
    for k in range(last - 1, max(first - 1, 0) - 1, -1):
        qk = q[k + 1, ..., None]
        behind[k] = colors[k + 1] * qk + (1.0 - qk) * behind[k + 1]
    if first > 0:
        behind[: first - 1] = behind[first - 1]
    g[..., 3] = trans * ((colors - behind) * g_rgb).sum(axis=-1)
    return g


def _blur(img, sigma):
    """Gaussian blur over the two image axes with zero padding (a symmetric operator)."""
    if sigma <= 0:
        return img
    return gaussian_filter(img, (sigma, sigma, 0), mode="constant")


# ---------------------------------------------------------------------------
# full pipeline


def render(volume, r, camera=CameraModel()):
    """Composite of the perspective-warped, rotated volume."""
    r = np.asarray(r, dtype=float)
    prep = _prepare(volume, True)
    n = prep.n
    rotated, _ = _rotate_channels(prep, r)
    rgb, alpha, _, _ = _warp_and_composite(rotated, n, camera)
    return _to_image(rgb, alpha)


def _warp_and_composite(rotated, n, camera):
    # clip is a no-op for in-range data; keeps rounding from leaking out of [0, 1]
    data = np.clip(_warp(rotated, n, camera), 0.0, 1.0).reshape(n, n, n, 4)
    rays = _depth_major(data)
    rgb, alpha, trans = _composite_rays(rays)
    return rgb, alpha, rays, trans


def render_view(volume, v, camera=CameraModel(), u=UP):
    """Render with the camera placed along viewpoint ``v``."""
    return render(volume, view_rotation(v, u), camera)


def render_many(volume, viewpoints, camera=CameraModel(), u=UP):
    """Render a batch of viewpoints; results follow input order.

    Uses up to ``VOXELVIEW_THREADS`` worker threads (0 or unset: one per
    CPU).
    """
    vs = list(np.asarray(viewpoints, dtype=float).reshape(-1, 3))
    workers = worker_count()
    _prepare(volume, True)
    if workers <= 1 or len(vs) < 2:
        return [render_view(volume, v, camera, u) for v in vs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: render_view(volume, v, camera, u), vs))


def worker_count():
    raw = os.environ.get("VOXELVIEW_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParam(f"VOXELVIEW_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise InvalidParam("VOXELVIEW_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def image_mse(a, b):
    return float(np.mean((a.rgb - b.rgb) ** 2))


def _check_target(volume, target):
    n = volume.resolution
    if target.rgb.shape != (n, n, 3):
        raise ResolutionMismatch(f"target is {target.rgb.shape[:2]}, renders are {(n, n)}")


def render_loss(volume, v, target, camera=CameraModel(), u=UP, blur=0.0):
    """Mean squared RGB error of the view from ``v`` against ``target``.

    With ``blur`` > 0 both images are first smoothed by a Gaussian of that
    many pixels, which widens the basins of the loss.
    """
    _check_target(volume, target)
    img = render_view(volume, v, camera, u)
    if blur <= 0:
        return image_mse(img, target)
    return float(np.mean((_blur(img.rgb, blur) - _blur(target.rgb, blur)) ** 2))


def render_loss_grad(volume, v, u, camera, target, blur=0.0):
    """Loss and its gradient with respect to the viewpoint.

    Returns ``(loss, grad)``: the mean squared RGB error of
    ``render_view(volume, v)`` against ``target`` and its derivative in
    ``v``, projected on the tangent plane of the sphere at ``v``.  The
    chain rule runs through compositing, the (fixed, linear) perspective
    warp, trilinear rotation sampling and the orthogonalization.
    """
    _check_target(volume, target)
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    m, dm = view_rotation_jacobian(v, u)
    prep = _prepare(volume, True)
    n = prep.n
    rotated, dvals = _rotate_channels(prep, m, grad=True)
    rgb, _, rays, trans = _warp_and_composite(rotated, n, camera)
    diff = _blur(rgb, blur) - _blur(_from_image(target), blur)
    loss = float(np.mean(diff**2))
    g_rgb = _blur(2.0 * diff / diff.size, blur)
    g_data = _composite_backward(rays, trans, g_rgb).transpose(1, 0, 2, 3).reshape(-1, 4)
    if not camera.orthographic:
        g_data = perspective_operator(n, float(camera.distance)).T @ g_data
    g_t = np.einsum("pc,pck->pk", g_data[prep.active], dvals)
    g_m = prep.active_offsets.T @ g_t
    grad = np.einsum("ab,abk->k", g_m, dm)
    vh = v / np.linalg.norm(v)
    grad = grad - (grad @ vh) * vh
    return loss, grad


# ---------------------------------------------------------------------------
# image files


def _to_bytes(a):
    # np.rint rounds half to even
    return np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image):
    """Binary P6, maxval 255."""
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(image.rgb).tobytes())


def write_pgm(path, alpha):
    """Binary P5 of a single channel in [0, 1]."""
    alpha = np.asarray(alpha)
    h, w = alpha.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_to_bytes(alpha).tobytes())


def _read_netpbm(path, magic, channels):
    raw = open(path, "rb").read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidParam(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise InvalidParam(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidParam(f"{path}: only maxval 255 is supported")
    count = w * h * channels
    if len(raw) - pos < count:
        raise InvalidParam(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos)
    return data.reshape(h, w, channels).astype(float) / 255.0


def read_ppm(path, alpha=None):
    """Read a P6 file as a :class:`RenderedImage`.

    Alpha is not stored in PPM; it is taken from ``alpha`` when given,
    otherwise set to 1 wherever any channel is nonzero.
    """
    rgb = _read_netpbm(path, b"P6", 3)
    if alpha is None:
        alpha = (rgb.max(axis=-1) > 0).astype(float)
    return RenderedImage(rgb, np.asarray(alpha, dtype=float))


def read_pgm(path):
    return _read_netpbm(path, b"P5", 1)[..., 0]
