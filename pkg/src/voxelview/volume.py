"""Textured occupancy volumes, the Gaussian shape prior and test objects.

Arrays are indexed ``[x, y, z]`` with index ``i`` at normalized
coordinate ``-1 + 2 i / (n - 1)``, so the volume spans ``[-1, 1]^3`` and
the half-extent is 1 in normalized units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BadMagic, InvalidParam, ResolutionMismatch, TruncatedFile, ValueOutOfRange

MAGIC = b"VXV1"
_HEADER = struct.Struct("<4sII")

# occupancy of solid voxels in the procedural objects
Q_SOLID = 1.0

DEFAULT_PRIOR_SIGMA = 0.25
DEFAULT_PRIOR_AMPLITUDE = 0.5


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """RGB colour plus occupancy on a cubic grid.

    Attributes:
        colors: (n, n, n, 3) array in [0, 1].
        occupancy: (n, n, n) array in [0, 1].
        frame: axis convention tag of the canonical pose.
    """

    colors: np.ndarray
    occupancy: np.ndarray
    frame: str = "x-right,y-forward,z-up"

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=float)
        q = np.asarray(self.occupancy, dtype=float)
        n = q.shape[0]
        if q.ndim != 3 or q.shape != (n, n, n):
            raise InvalidParam(f"occupancy must be a cubic grid, got {q.shape}")
        if n < 2:
            raise InvalidParam("resolution must be at least 2")
        if c.shape != (n, n, n, 3):
            raise InvalidParam(f"colors must have shape {(n, n, n, 3)}, got {c.shape}")
        for name, a in (("colors", c), ("occupancy", q)):
            if not (np.all(a >= 0.0) and np.all(a <= 1.0)):
                raise ValueOutOfRange(f"{name} must lie in [0, 1]")
        c.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "occupancy", q)

    @property
    def resolution(self):
        return self.occupancy.shape[0]

    def channels(self):
        """(n, n, n, 4) array: RGB then occupancy."""
        return np.concatenate([self.colors, self.occupancy[..., None]], axis=-1)

    @classmethod
    def from_channels(cls, data, frame="x-right,y-forward,z-up"):
        data = np.asarray(data, dtype=float)
        return cls(data[..., :3], data[..., 3], frame)

    @classmethod
    def empty(cls, resolution):
        n = resolution
        return cls(np.zeros((n, n, n, 3)), np.zeros((n, n, n)))

    def equals(self, other):
        """Bit-exact comparison of contents."""
        return (
            self.resolution == other.resolution
            and np.array_equal(self.colors, other.colors)
            and np.array_equal(self.occupancy, other.occupancy)
        )


def grid_coords(resolution):
    """Normalized coordinate of each index along one axis."""
    n = resolution
    return (2.0 * np.arange(n) - (n - 1)) / (n - 1)


def shape_prior(resolution, sigma=DEFAULT_PRIOR_SIGMA, amplitude=DEFAULT_PRIOR_AMPLITUDE):
    """Isotropic Gaussian occupancy prior centred on the grid.

    ``sigma`` is a fraction of the half-extent.  The peak value is
    ``amplitude`` (reached exactly at the centre voxel for odd
    resolutions).
    """
    if resolution < 2:
        raise InvalidParam("resolution must be at least 2")
    if not sigma > 0:
        raise InvalidParam("sigma must be positive")
    if not 0 < amplitude <= 1:
        raise InvalidParam("amplitude must be in (0, 1]")
    t = grid_coords(resolution)
    r2 = t[:, None, None] ** 2 + t[None, :, None] ** 2 + t[None, None, :] ** 2
    return amplitude * np.exp(-r2 / (2.0 * sigma**2))


def apply_prior(residual, prior):
    """Occupancy from a signed residual on top of the prior, clamped to [0, 1]."""
    residual = np.asarray(residual, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if residual.shape != prior.shape:
        raise ResolutionMismatch(f"residual {residual.shape} vs prior {prior.shape}")
    return np.clip(prior + residual, 0.0, 1.0)


def silhouette_of(volume):
    """Same occupancy with every voxel coloured white.

    Empty voxels are whitened too, so interpolated colour is exactly 1
    wherever interpolated occupancy is nonzero and the rendered RGB equals
    the rendered alpha (a clean mask, no grey rim).
    """
    return VoxelVolume(np.ones_like(volume.colors), volume.occupancy, volume.frame)


# ---------------------------------------------------------------------------
# procedural objects
#
# Bounds are exact rationals compared against integer index arithmetic, so
# the voxelization does not depend on floating-point evaluation order.


def _span(n, lo, hi):
    """Mask of indices whose normalized coordinate lies in [lo, hi]."""
    lo, hi = Fraction(lo), Fraction(hi)
    a = 2 * np.arange(n, dtype=np.int64) - (n - 1)
    m = n - 1
    return (a * lo.denominator >= lo.numerator * m) & (a * hi.denominator <= hi.numerator * m)


def _box(n, xs, ys, zs):
    return _span(n, *xs)[:, None, None] & _span(n, *ys)[None, :, None] & _span(n, *zs)[None, None, :]


def _f32(rgb):
    # exactly representable in the f32 file payload
    return np.asarray(rgb, dtype=np.float32).astype(float)


def _car(n):
    body = _box(n, ("-0.32", "0.32"), ("-0.6", "0.6"), ("-0.3", "0.02"))
    cabin = _box(n, ("-0.26", "0.26"), ("-0.28", "0.28"), ("0.02", "0.26"))
    parts = [(body, (0.15, 0.3, 0.75)), (cabin, (0.55, 0.75, 0.9))]
    ys = np.flatnonzero(body.any(axis=(0, 2)))
    lamp_xz = _span(n, "0.1", "0.32")[:, None] | _span(n, "-0.32", "-0.1")[:, None]
    lamp_xz = lamp_xz & _span(n, "-0.2", "0.02")[None, :]
    for layers, rgb in ((ys[-2:], (1.0, 1.0, 1.0)), (ys[:2], (0.9, 0.05, 0.05))):
        lamp = np.zeros_like(body)
        for j in layers:
            lamp[:, j, :] = lamp_xz
        parts.append((lamp & body, rgb))
    return parts


def _chair(n):
    seat = _box(n, ("-0.3", "0.3"), ("-0.3", "0.3"), ("-0.12", "0.02"))
    back = _box(n, ("-0.3", "0.3"), ("-0.3", "-0.18"), ("0.02", "0.55"))
    legs = np.zeros_like(seat)
    for xs in (("-0.3", "-0.18"), ("0.18", "0.3")):
        for ys in (("-0.3", "-0.18"), ("0.18", "0.3")):
            legs |= _box(n, xs, ys, ("-0.55", "-0.12"))
    return [(seat, (0.7, 0.45, 0.2)), (back, (0.45, 0.25, 0.1)), (legs, (0.35, 0.35, 0.35))]


def _plane(n):
    fuselage = _box(n, ("-0.09", "0.09"), ("-0.58", "0.58"), ("-0.09", "0.09"))
    wings = _box(n, ("-0.58", "0.58"), ("-0.05", "0.2"), ("-0.07", "0.07"))
    stab = _box(n, ("-0.25", "0.25"), ("-0.58", "-0.42"), ("-0.07", "0.07"))
    fin = _box(n, ("-0.07", "0.07"), ("-0.58", "-0.4"), ("0.09", "0.4"))
    nose = _box(n, ("-0.09", "0.09"), ("0.45", "0.58"), ("-0.09", "0.09"))
    return [
        (fuselage, (0.85, 0.85, 0.85)),
        (wings, (0.45, 0.5, 0.6)),
        (stab, (0.45, 0.5, 0.6)),
        (fin, (0.85, 0.1, 0.1)),
        (nose, (0.2, 0.2, 0.25)),
    ]


def _cube(n):
    solid = _box(n, ("-0.5", "0.5"), ("-0.5", "0.5"), ("-0.5", "0.5"))
    idx = [np.flatnonzero(solid.any(axis=tuple(a for a in range(3) if a != k))) for k in range(3)]
    # (axis, side) -> colour; side +1 is the outermost layer on the positive end
    face_colors = {
        (0, +1): (1.0, 0.0, 0.0),
        (0, -1): (0.0, 1.0, 1.0),
        (1, +1): (0.0, 0.8, 0.0),
        (1, -1): (1.0, 0.0, 1.0),
        (2, +1): (0.0, 0.0, 1.0),
        (2, -1): (1.0, 1.0, 0.0),
    }
    parts = [(solid, (0.5, 0.5, 0.5))]
    for (axis, side), rgb in face_colors.items():
        face = np.zeros_like(solid)
        sl = [slice(None)] * 3
        sl[axis] = idx[axis][-1] if side > 0 else idx[axis][0]
        face[tuple(sl)] = True
        parts.append((face & solid, rgb))
    return parts


_OBJECTS = {"car": _car, "chair": _chair, "plane": _plane, "cube": _cube}
OBJECT_KINDS = tuple(_OBJECTS)


def make_test_object(kind, resolution):
    """Deterministic procedural object centred in the grid.

    Later parts paint over earlier ones.  The car's occupancy is mirror
    symmetric front/back and left/right; only its lamp colours (white at
    +y, red at -y) tell front from back.
    """
    if kind not in _OBJECTS:
        raise InvalidParam(f"unknown object kind {kind!r}; choose from {', '.join(OBJECT_KINDS)}")
    if resolution < 16:
        raise InvalidParam("test objects need resolution >= 16")
    n = resolution
    colors = np.zeros((n, n, n, 3))
    occ = np.zeros((n, n, n))
    for mask, rgb in _OBJECTS[kind](n):
        colors[mask] = _f32(rgb)
        occ[mask] = Q_SOLID
    return VoxelVolume(colors, occ)


# ---------------------------------------------------------------------------
# VXV1 files


def write_volume(volume, path):
    """Write a VXV1 file: header then channel-planar f32, x fastest.

    Values are stored as float32.
    """
    n = volume.resolution
    data = volume.channels().transpose(3, 2, 1, 0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, 4))
        fh.write(data.tobytes())


def read_volume(path):
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: not a VXV1 file")
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, n, ch = _HEADER.unpack_from(raw)
    if ch != 4:
        raise InvalidParam(f"{path}: expected 4 channels, got {ch}")
    if n < 2:
        raise InvalidParam(f"{path}: resolution {n} too small")
    need = _HEADER.size + 4 * ch * n**3
    if len(raw) < need:
        raise TruncatedFile(f"{path}: payload has {len(raw) - _HEADER.size} bytes, header declares {need - _HEADER.size}")
    data = np.frombuffer(raw, dtype="<f4", count=ch * n**3, offset=_HEADER.size)
    data = data.reshape(ch, n, n, n).transpose(3, 2, 1, 0).astype(float)
    if not (np.all(data >= 0.0) and np.all(data <= 1.0)):
        raise ValueOutOfRange(f"{path}: voxel values outside [0, 1]")
    return VoxelVolume.from_channels(data)
