"""Viewpoints on the unit sphere, rotation construction and comparison.

Conventions (fixed for the whole package):

* object frame: x right, y forward, z up; the default up vector is +z
  (zero camera tilt);
* a viewpoint ``v`` is the unit direction from the object centre towards
  the camera, ``v = (cos e cos a, cos e sin a, sin e)`` for azimuth ``a``
  measured about +z from +x and elevation ``e`` towards +z;
* rotation matrices act on column vectors.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import DegenerateUp, InvalidParam

UP = np.array([0.0, 0.0, 1.0])

# |v . u| above this is treated as parallel
PARALLEL_TOL = 1e-6

# Row permutation taking the frame (v, u', w) to the renderer frame
# (x = right = -w, y = depth = -v, z = image up = u').  det = +1.
_VIEW_PERM = np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def normalize(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def _skew(a):
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def _normalize_jac(a):
    n = np.linalg.norm(a)
    e = a / n
    return e, (np.eye(3) - np.outer(e, e)) / n


def vector_to_rotation(v, u=UP):
    """Orthogonalize a viewpoint against an up vector.

    Returns the proper rotation with columns ``(v, u', w)`` where
    ``w = normalize(v x u)`` and ``u' = normalize(w x v)``.  Column 0 is
    ``v`` as given, so ``v`` should already be unit length.

    Raises:
        DegenerateUp: if ``v`` and ``u`` are (nearly) parallel.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if abs(float(v @ u)) > 1.0 - PARALLEL_TOL:
        raise DegenerateUp(f"viewpoint {v.tolist()} is parallel to up {u.tolist()}")
    w = normalize(np.cross(v, u))
    up = normalize(np.cross(w, v))
    return np.column_stack([v, up, w])


def view_rotation(v, u=UP):
    """Object-to-renderer rotation for a camera placed along ``v``.

    The renderer composites along its +y axis with the front face at
    y = -1 and image up along +z.  This maps ``v`` to -y (towards the
    camera), ``u'`` to +z and ``-w`` to +x, so the image is a proper,
    unmirrored pinhole view.
    """
    return _VIEW_PERM @ vector_to_rotation(normalize(v), u).T


def view_rotation_jacobian(v, u=UP):
    """``view_rotation`` of ``v`` plus its derivative.

    Returns ``(M, dM)`` where ``dM[a, b, k] = dM[a, b] / dv[k]``.  ``v``
    need not be unit length; the map only depends on its direction.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    vh, jv = _normalize_jac(v)
    if abs(float(vh @ u)) > 1.0 - PARALLEL_TOL:
        raise DegenerateUp(f"viewpoint {vh.tolist()} is parallel to up {u.tolist()}")
    w_raw = np.cross(vh, u)
    w, jn_w = _normalize_jac(w_raw)
    jw = jn_w @ (-_skew(u)) @ jv
    up_raw = np.cross(w, vh)
    up, jn_up = _normalize_jac(up_raw)
    jup = jn_up @ (-_skew(vh) @ jw + _skew(w) @ jv)
    m = np.stack([-w, -vh, up])
    dm = np.stack([-jw, -jv, jup])
    return m, dm


def euler_to_vector(azimuth, elevation):
    """Unit viewpoint for ``(azimuth, elevation)`` in radians."""
    ce = math.cos(elevation)
    return np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])


def vector_to_euler(v):
    """Inverse of :func:`euler_to_vector`.

    Azimuth is in ``[0, 2pi)`` and defined as 0 at the poles.
    """
    v = np.asarray(v, dtype=float)
    z = min(1.0, max(-1.0, float(v[2])))
    elevation = math.asin(z)
    if abs(z) > 1.0 - 1e-9:
        return 0.0, elevation
    azimuth = math.atan2(float(v[1]), float(v[0])) % (2.0 * math.pi)
    # atan2 of a tiny negative angle wraps to exactly 2pi after the modulo
    if azimuth >= 2.0 * math.pi:
        azimuth = 0.0
    return azimuth, elevation


def geodesic_error(r1, r2):
    """Angle in radians of the relative rotation ``r1^T r2``, in [0, pi].

    Equal to ``arccos((trace - 1) / 2)`` but evaluated as ``atan2`` of the
    sine (from the skew part) and cosine, which keeps full precision near
    0 and pi where the arccos form loses about 8 digits.
    """
    r = np.asarray(r1).T @ np.asarray(r2)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2)
    return math.atan2(s, min(1.0, max(-1.0, float(c))))


def viewpoint_error(v1, v2, u=UP):
    """Geodesic distance between the zero-tilt rotations of two viewpoints.

    Where either viewpoint is parallel to ``u`` the rotation is undefined
    and the angle between the two vectors is returned instead.
    """
    a = normalize(v1)
    b = normalize(v2)
    try:
        return geodesic_error(vector_to_rotation(a, u), vector_to_rotation(b, u))
    except DegenerateUp:
        return math.acos(min(1.0, max(-1.0, float(a @ b))))


def rotation_about_axis(axis, angle):
    """Rodrigues rotation by ``angle`` radians about the unit ``axis``."""
    k = _skew(np.asarray(axis, dtype=float))
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def azimuth_error(a1, a2):
    """Wrapped absolute azimuth difference in [0, pi]."""
    d = (a1 - a2) % (2.0 * math.pi)
    return min(abs(d), 2.0 * math.pi - abs(d))


def sample_band(rng, n, elev_min_deg=-20.0, elev_max_deg=40.0):
    """Draw ``n`` viewpoints uniformly over a band of the sphere.

    Azimuth is uniform on [0, 2pi) and sin(elevation) uniform over the
    band, which is the uniform surface measure restricted to the band.

    Returns:
        (n, 3) array of unit vectors.
    """
    if not elev_min_deg < elev_max_deg:
        raise InvalidParam("elevation band is empty")
    if elev_min_deg <= -90.0 or elev_max_deg >= 90.0:
        raise InvalidParam("elevation band must stay inside (-90, 90) degrees")
    az = rng.uniform(0.0, 2.0 * math.pi, size=n)
    z = rng.uniform(math.sin(math.radians(elev_min_deg)), math.sin(math.radians(elev_max_deg)), size=n)
    r = np.sqrt(1.0 - z * z)
    return np.column_stack([r * np.cos(az), r * np.sin(az), z])


def fibonacci_sphere(n, z_min=-1.0, z_max=1.0):
    """Deterministic, nearly even spread of ``n`` unit vectors.

    Points lie on a golden-angle spiral whose heights are evenly spaced
    over ``[z_min, z_max]``; pass the sines of an elevation band to
    restrict the spread to that band.
    """
    if n < 1:
        raise InvalidParam("need at least one point")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(n)
    z = z_max - (z_max - z_min) * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = golden * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


# ---------------------------------------------------------------------------
# pose files


def read_pose_csv(path):
    """Read ``azimuth_deg,elevation_deg`` lines into an (n, 3) array.

    A first line that does not parse as numbers is treated as a header.
    """
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh)):
            if not rec or not "".join(rec).strip():
                continue
            try:
                az, el = float(rec[0]), float(rec[1])
            except (ValueError, IndexError):
                if lineno == 0:
                    continue
                raise InvalidParam(f"{path}:{lineno + 1}: expected azimuth_deg,elevation_deg")
            rows.append(euler_to_vector(math.radians(az), math.radians(el)))
    return np.array(rows).reshape(-1, 3)


def write_pose_csv(path, viewpoints):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["azimuth_deg", "elevation_deg"])
        for v in np.asarray(viewpoints, dtype=float).reshape(-1, 3):
            az, el = vector_to_euler(v)
            writer.writerow([repr(math.degrees(az)), repr(math.degrees(el))])


def read_pose_json(path):
    """Read a JSON array of 3-vectors; each is normalized on load."""
    data = json.loads(Path(path).read_text())
    arr = np.asarray(data, dtype=float).reshape(-1, 3)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < 1e-12):
        raise InvalidParam(f"{path}: zero-length viewpoint")
    return arr / norms[:, None]


def write_pose_json(path, viewpoints):
    arr = np.asarray(viewpoints, dtype=float).reshape(-1, 3)
    Path(path).write_text(json.dumps(arr.tolist()) + "\n")
