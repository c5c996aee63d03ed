"""Spherical geometry for equirectangular panoramas.

Pixel-center convention throughout: pixel (i, j) sits at longitude
2*pi*(j+0.5)/W - pi and latitude pi/2 - pi*(i+0.5)/H. Row 0 is the top of
the image, longitude increases to the right and wraps at the left/right
seam. The perspective window around a bounding field-of-view is a gnomonic
(tangent-plane) projection, so straight rays in the window correspond to
great circles on the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmptyMaskError, ProjectionError, ShapeError

DEG = math.pi / 180.0
FOV_MIN = 2.0 * DEG
FOV_MAX = 150.0 * DEG

NEAREST = "nearest"
BILINEAR = "bilinear"


@dataclass(frozen=True)
class ErpGrid:
    """Equirectangular raster; width is exactly twice the height."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 2:
            raise ShapeError("grid height must be >= 2")
        if self.w != 2 * self.h:
            raise ShapeError(f"ERP grid must be 2:1, got {self.h}x{self.w}")

    @property
    def shape(self):
        return (self.h, self.w)

    @property
    def diagonal(self):
        return math.hypot(self.h, self.w)


@dataclass(frozen=True)
class SphericalCoord:
    """Direction on the unit sphere; lon in [-pi, pi), lat in [-pi/2, pi/2]."""

    lon: object
    lat: object


@dataclass(frozen=True)
class BFoV:
    """Bounding field-of-view: center direction plus angular extents."""

    lon_c: float
    lat_c: float
    fov_h: float
    fov_v: float

    def __post_init__(self):
        if not (-math.pi / 2 <= self.lat_c <= math.pi / 2):
            raise ProjectionError(f"center latitude {self.lat_c} out of range")
        for name, fov in (("fov_h", self.fov_h), ("fov_v", self.fov_v)):
            if not (0.0 < fov <= FOV_MAX + 1e-12):
                raise ProjectionError(f"{name}={fov} outside (0, 150deg]")


def wrap_lon(lon):
    """Fold longitudes into [-pi, pi)."""
    return (np.asarray(lon) + math.pi) % (2.0 * math.pi) - math.pi


def erp_to_sphere(i, j, grid):
    """Spherical direction of pixel centers (i, j); accepts arrays."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(i >= grid.h) or np.any(j < 0) or np.any(j >= grid.w):
        raise ShapeError("pixel index outside the grid")
    lon = 2.0 * math.pi * (j + 0.5) / grid.w - math.pi
    lat = math.pi / 2 - math.pi * (i + 0.5) / grid.h
    return SphericalCoord(lon, lat)


def sphere_to_erp(coord, grid):
    """Continuous pixel coordinates of a direction; centers land on i+0.5.

    Longitude wraps, so the returned column lies in [0, W).
    """
    lon = wrap_lon(coord.lon)
    i = (math.pi / 2 - np.asarray(coord.lat)) * grid.h / math.pi
    j = (lon + math.pi) * grid.w / (2.0 * math.pi)
    return i, j


def unit_vectors(lon, lat):
    """Cartesian unit vectors [..., 3] for spherical directions."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)


def vectors_to_sphere(v):
    """Inverse of unit_vectors (input need not be normalized)."""
    v = np.asarray(v, dtype=np.float64)
    lon = np.arctan2(v[..., 1], v[..., 0])
    lat = np.arcsin(np.clip(v[..., 2] / np.linalg.norm(v, axis=-1), -1.0, 1.0))
    return SphericalCoord(wrap_lon(lon), lat)


@lru_cache(maxsize=8)
def _grid_units(h, w):
    # per-pixel unit vectors [H, W, 3] for an ERP grid, cached by size
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sc = erp_to_sphere(ii, jj, ErpGrid(h, w))
    return unit_vectors(sc.lon, sc.lat)


def grid_unit_vectors(grid):
    """Per-pixel unit vectors [H, W, 3]; cached, treat as read-only."""
    return _grid_units(grid.h, grid.w)


def _frame(bfov):
    # orthonormal (forward, right, up) at the window center; right points
    # east, up toward increasing latitude
    f = unit_vectors(bfov.lon_c, bfov.lat_c)
    r = np.array([-math.sin(bfov.lon_c), math.cos(bfov.lon_c), 0.0])
    u = np.cross(f, r)
    return f, r, u


def estimate_bfov(mask, grid, margin=1.2):
    """Fit a view window around a mask's foreground.

    The center is the normalized mean of the foreground unit vectors; each
    extent is margin times the full angular spread along the corresponding
    tangent axis, clamped to [2deg, 150deg].
    """
    mask = np.asarray(mask)
    if mask.shape != grid.shape:
        raise ShapeError(f"mask {mask.shape} does not match grid {grid.shape}")
    fg = np.nonzero(mask)
    if fg[0].size == 0:
        raise EmptyMaskError("cannot fit a view window to an empty mask")
    v = grid_unit_vectors(grid)[fg]
    m = v.mean(axis=0)
    norm = np.linalg.norm(m)
    if norm < 1e-12:
        raise ProjectionError("mask has no well-defined center direction")
    f = m / norm
    center = vectors_to_sphere(f)
    lon_c, lat_c = float(center.lon), float(center.lat)
    r = np.array([-math.sin(lon_c), math.cos(lon_c), 0.0])
    u = np.cross(f, r)
    z = v @ f
    dev_h = np.arctan2(np.abs(v @ r), z).max()
    dev_v = np.arctan2(np.abs(v @ u), z).max()
    fov_h = min(max(2.0 * margin * dev_h, FOV_MIN), FOV_MAX)
    fov_v = min(max(2.0 * margin * dev_v, FOV_MIN), FOV_MAX)
    return BFoV(lon_c, lat_c, fov_h, fov_v)


def _check_fov(bfov):
    if bfov.fov_h >= math.pi or bfov.fov_v >= math.pi:
        raise ProjectionError("tangent-plane window requires fov < 180deg")


def bfov_project(src, bfov, out_h, out_w, interp=NEAREST):
    """Resample an ERP field into the perspective window of a BFoV.

    Each output pixel casts a ray through the tangent plane at the window
    center; the source lookup wraps in longitude. Use nearest for masks and
    bilinear for real-valued fields.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 * src.shape[0]:
        raise ShapeError(f"source must be a 2:1 ERP field, got {src.shape}")
    if out_h < 2 or out_w < 2:
        raise ShapeError("window size must be at least 2x2")
    _check_fov(bfov)
    grid = ErpGrid(*src.shape)

    f, r, u = _frame(bfov)
    tan_h = math.tan(bfov.fov_h / 2)
    tan_v = math.tan(bfov.fov_v / 2)
    xt = (2.0 * (np.arange(out_w) + 0.5) / out_w - 1.0) * tan_h
    yt = (1.0 - 2.0 * (np.arange(out_h) + 0.5) / out_h) * tan_v
    rays = (f[None, None, :]
            + xt[None, :, None] * r[None, None, :]
            + yt[:, None, None] * u[None, None, :])
    sc = vectors_to_sphere(rays)
    i_cont, j_cont = sphere_to_erp(sc, grid)

    if interp == NEAREST:
        ii = np.clip(np.floor(i_cont).astype(int), 0, grid.h - 1)
        jj = np.floor(j_cont).astype(int) % grid.w
        return src[ii, jj]
    if interp == BILINEAR:
        ui = i_cont - 0.5
        uj = j_cont - 0.5
        i0 = np.floor(ui).astype(int)
        j0 = np.floor(uj).astype(int)
        fi = ui - i0
        fj = uj - j0
        i0c = np.clip(i0, 0, grid.h - 1)
        i1c = np.clip(i0 + 1, 0, grid.h - 1)
        j0c = j0 % grid.w
        j1c = (j0 + 1) % grid.w
        return ((1 - fi) * (1 - fj) * src[i0c, j0c]
                + (1 - fi) * fj * src[i0c, j1c]
                + fi * (1 - fj) * src[i1c, j0c]
                + fi * fj * src[i1c, j1c])
    raise ValueError(f"unknown interpolation {interp!r}")


def bfov_unproject(values, bfov, grid, fill=0.0):
    """Paint a perspective window back onto the ERP grid.

    Every ERP pixel whose ray falls inside the window frustum samples the
    window (nearest); everything else takes ``fill``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError("window values must be 2-D")
    _check_fov(bfov)
    h, w = values.shape
    f, r, u = _frame(bfov)
    v = grid_unit_vectors(grid)
    z = v @ f
    with np.errstate(divide="ignore", invalid="ignore"):
        xt = (v @ r) / z
        yt = (v @ u) / z
    tan_h = math.tan(bfov.fov_h / 2)
    tan_v = math.tan(bfov.fov_v / 2)
    inside = (z > 0) & (np.abs(xt) <= tan_h) & (np.abs(yt) <= tan_v)

    out = np.full(grid.shape, float(fill))
    if not inside.any():
        return out
    b = np.clip(np.floor((xt[inside] / tan_h + 1.0) * 0.5 * w).astype(int), 0, w - 1)
    a = np.clip(np.floor((1.0 - yt[inside] / tan_v) * 0.5 * h).astype(int), 0, h - 1)
    out[inside] = values[a, b]
    return out


@dataclass(frozen=True)
class DistanceField:
    """Per-pixel Euclidean distances (pixel units) with their maximum."""

    data: np.ndarray
    d_max: float


def _edt_1d_sq(f):
    """Lower-envelope pass: min over q of f[q] + (p-q)^2, for every p.

    f holds squared distances and may contain +inf (no source in that
    column). Parabolas rooted at inf never enter the envelope.
    """
    n = f.size
    d = np.full(n, np.inf)
    v = np.zeros(n, dtype=int)
    z = np.zeros(n + 1)
    k = -1
    for q in range(n):
        fq = f[q]
        if not np.isfinite(fq):
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = (fq + q * q - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        return d
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        d[p] = (p - v[k]) ** 2 + f[v[k]]
    return d


def distance_transform(mask):
    """Exact Euclidean distance from every pixel to the nearest foreground.

    Two-pass formulation: per-column 1-D distances, then a lower-envelope
    scan per row over their squares. Foreground pixels map to 0.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ShapeError("distance transform expects a 2-D mask")
    if not mask.any():
        raise EmptyMaskError("distance transform needs at least one foreground pixel")
    h, w = mask.shape

    g = np.where(mask, 0.0, np.inf)
    for i in range(1, h):
        g[i] = np.minimum(g[i], g[i - 1] + 1.0)
    for i in range(h - 2, -1, -1):
        g[i] = np.minimum(g[i], g[i + 1] + 1.0)

    sq = g * g
    out = np.empty((h, w))
    for i in range(h):
        out[i] = _edt_1d_sq(sq[i])
    out = np.sqrt(out)
    return DistanceField(out, float(out.max()))
