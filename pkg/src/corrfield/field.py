"""Explicit voxel-grid radiance field.

Raw density and color parameters live on a regular grid over an axis-aligned
bounding box; queries trilinearly interpolate the raw values and then apply
activations (softplus for density, logistic for color). Voxel centers sit at
bbox_min + (i + 0.5) * voxel_size. Queries outside the bbox return zero
density. Color is either view-independent RGB ("rgb") or view-dependent with
degree-0/1 spherical-harmonic coefficients per channel ("sh1": raw value =
c0 + c1*dx + c2*dy + c3*dz for unit view direction d).

Snapshots are little-endian binary: an 8-byte magic, version, color model,
resolution, bbox, then the raw float32 parameter arrays in C order. In-memory
parameters are float64 (gradient checks need the headroom); round trips are
bit-exact at the file level.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VOXFIELD"
FORMAT_VERSION = 1

COLOR_RGB = "rgb"
COLOR_SH1 = "sh1"

_MODEL_CODES = {COLOR_RGB: 0, COLOR_SH1: 1}
_MODEL_NAMES = {v: k for k, v in _MODEL_CODES.items()}


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    """x with softplus(x) = y, for y > 0. Stable at both extremes."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inverse requires positive input")
    # small y: log(expm1(y)) keeps full precision where 1 - e^-y cancels;
    # large y: y + log1p(-e^-y) avoids expm1 overflow
    small = y < 1.0
    out = np.empty_like(y)
    out[small] = np.log(np.expm1(y[small]))
    out[~small] = y[~small] + np.log1p(-np.exp(-y[~small]))
    return out if out.ndim else float(out)


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class FieldQuery:
    """A single field query: world position, optional unit view direction."""

    position: np.ndarray
    view_direction: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.view_direction is not None:
            d = np.asarray(self.view_direction, dtype=np.float64).reshape(3)
            n = np.linalg.norm(d)
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"view direction must be unit norm, got |d| = {n!r}")
            self.view_direction = d


@dataclass
class RadianceField:
    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density_raw: np.ndarray  # (nx, ny, nz)
    color_raw: np.ndarray  # (nx, ny, nz, 3) or (nx, ny, nz, 3, 4)
    color_model: str = COLOR_RGB

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if any(n < 1 for n in self.resolution):
            raise ValueError(f"resolution must be >= 1 per axis, got {self.resolution}")
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        if self.color_model not in _MODEL_CODES:
            raise ValueError(f"unknown color model {self.color_model!r}")
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.color_raw = np.ascontiguousarray(self.color_raw, dtype=np.float64)
        if self.density_raw.shape != self.resolution:
            raise ValueError(f"density_raw shape {self.density_raw.shape} != {self.resolution}")
        want = self.resolution + ((3,) if self.color_model == COLOR_RGB else (3, 4))
        if self.color_raw.shape != want:
            raise ValueError(f"color_raw shape {self.color_raw.shape}, expected {want}")

    @classmethod
    def zeros(cls, resolution, bbox_min, bbox_max, color_model=COLOR_RGB,
              density_init=-4.0, color_init=0.0) -> "RadianceField":
        resolution = tuple(int(n) for n in resolution)
        cshape = resolution + ((3,) if color_model == COLOR_RGB else (3, 4))
        return cls(
            resolution=resolution,
            bbox_min=bbox_min,
            bbox_max=bbox_max,
            density_raw=np.full(resolution, float(density_init)),
            color_raw=np.full(cshape, float(color_init)),
            color_model=color_model,
        )

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.array(self.resolution, dtype=np.float64)

    def voxel_centers(self):
        """Meshgrid arrays of voxel-center coordinates, shape resolution + (3,)."""
        vs = self.voxel_size
        axes = [self.bbox_min[a] + (np.arange(self.resolution[a]) + 0.5) * vs[a] for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass
class FieldGradients:
    """Dense buffers matching the field's raw parameter arrays."""

    density: np.ndarray
    color: np.ndarray

    @classmethod
    def zeros_like(cls, f: RadianceField) -> "FieldGradients":
        return cls(np.zeros_like(f.density_raw), np.zeros_like(f.color_raw))

    def add(self, other: "FieldGradients"):
        self.density += other.density
        self.color += other.color
        return self

    def scale(self, s: float):
        self.density *= s
        self.color *= s
        return self


def _interp_setup(f: RadianceField, positions: np.ndarray):
    """Trilinear corner indices and weights for positions (N, 3).

    Returns (inside (N,), corners (N, 8) flat indices, weights (N, 8)).
    Corner indices are clamped to the grid, which extends the edge values by
    half a voxel inside the bbox; outside the bbox is handled by `inside`.
    """
    positions = np.asarray(positions, dtype=np.float64)
    inside = np.all((positions >= f.bbox_min) & (positions <= f.bbox_max), axis=-1)
    g = (positions - f.bbox_min) / f.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    nx, ny, nz = f.resolution
    res = np.array([nx, ny, nz], dtype=np.int64)
    lo = np.clip(i0, 0, res - 1)
    hi = np.clip(i0 + 1, 0, res - 1)
    w1 = frac
    w0 = 1.0 - frac

    # 8 corners in (x, y, z) bit order
    corners = np.empty(positions.shape[:-1] + (8,), dtype=np.int64)
    weights = np.empty(positions.shape[:-1] + (8,), dtype=np.float64)
    for c in range(8):
        ix = hi[..., 0] if c & 4 else lo[..., 0]
        iy = hi[..., 1] if c & 2 else lo[..., 1]
        iz = hi[..., 2] if c & 1 else lo[..., 2]
        corners[..., c] = (ix * ny + iy) * nz + iz
        wx = w1[..., 0] if c & 4 else w0[..., 0]
        wy = w1[..., 1] if c & 2 else w0[..., 1]
        wz = w1[..., 2] if c & 1 else w0[..., 2]
        weights[..., c] = wx * wy * wz
    return inside, corners, weights


def _sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-0/1 direction basis [1, dx, dy, dz] for dirs (..., 3)."""
    ones = np.ones(dirs.shape[:-1] + (1,), dtype=np.float64)
    return np.concatenate([ones, dirs], axis=-1)


def sample_many(f: RadianceField, positions: np.ndarray, view_dirs: np.ndarray | None = None):
    """Batched field query for positions (N, 3).

    view_dirs (N, 3) or a single (3,) is required for the sh1 color model and
    ignored for rgb. Returns (sigma (N,), color (N, 3)); zeros outside the bbox.
    """
    positions = np.asarray(positions, dtype=np.float64)
    inside, corners, weights = _interp_setup(f, positions)
    flat_density = f.density_raw.reshape(-1)
    raw_d = np.sum(flat_density[corners] * weights, axis=-1)
    sigma = np.where(inside, softplus(raw_d), 0.0)

    if f.color_model == COLOR_RGB:
        flat_color = f.color_raw.reshape(-1, 3)
        raw_c = np.sum(flat_color[corners] * weights[..., None], axis=-2)
    else:
        if view_dirs is None:
            raise ValueError("sh1 color model requires view directions")
        view_dirs = np.broadcast_to(
            np.asarray(view_dirs, dtype=np.float64), positions.shape
        )
        flat_color = f.color_raw.reshape(-1, 3, 4)
        coef = np.sum(flat_color[corners] * weights[..., None, None], axis=-3)  # (N, 3, 4)
        basis = _sh_basis(view_dirs)  # (N, 4)
        raw_c = np.sum(coef * basis[..., None, :], axis=-1)
    color = np.where(inside[..., None], logistic(raw_c), 0.0)
    return sigma, color


def sample(f: RadianceField, q: FieldQuery):
    """Single query; see `sample_many`. Returns (sigma: float, color (3,))."""
    if f.color_model == COLOR_SH1 and q.view_direction is None:
        raise ValueError("sh1 color model requires a view direction")
    dirs = None if q.view_direction is None else q.view_direction[None, :]
    sigma, color = sample_many(f, q.position[None, :], dirs)
    return float(sigma[0]), color[0]


def backprop_samples(f: RadianceField, positions: np.ndarray,
                     view_dirs: np.ndarray | None,
                     d_sigma: np.ndarray, d_color: np.ndarray,
                     grads: FieldGradients):
    """Accumulate dLoss/d(raw params) for a batch of queries into `grads`.

    d_sigma (N,) and d_color (N, 3) are upstream gradients with respect to the
    activated outputs of `sample_many` at `positions`. Touches at most 8
    voxels per query; contributions outside the bbox are zero.
    """
    positions = np.asarray(positions, dtype=np.float64)
    inside, corners, weights = _interp_setup(f, positions)
    d_sigma = np.where(inside, np.asarray(d_sigma, dtype=np.float64), 0.0)
    d_color = np.where(inside[..., None], np.asarray(d_color, dtype=np.float64), 0.0)

    flat_density = f.density_raw.reshape(-1)
    raw_d = np.sum(flat_density[corners] * weights, axis=-1)
    # d softplus(x) / dx = logistic(x)
    dd_raw = d_sigma * logistic(raw_d)
    np.add.at(grads.density.reshape(-1), corners.reshape(-1),
              (dd_raw[..., None] * weights).reshape(-1))

    if f.color_model == COLOR_RGB:
        flat_color = f.color_raw.reshape(-1, 3)
        raw_c = np.sum(flat_color[corners] * weights[..., None], axis=-2)
        act = logistic(raw_c)
        dc_raw = d_color * act * (1.0 - act)  # (N, 3)
        contrib = dc_raw[..., None, :] * weights[..., :, None]  # (N, 8, 3)
        np.add.at(grads.color.reshape(-1, 3), corners.reshape(-1), contrib.reshape(-1, 3))
    else:
        if view_dirs is None:
            raise ValueError("sh1 color model requires view directions")
        view_dirs = np.broadcast_to(np.asarray(view_dirs, dtype=np.float64), positions.shape)
        flat_color = f.color_raw.reshape(-1, 3, 4)
        coef = np.sum(flat_color[corners] * weights[..., None, None], axis=-3)
        basis = _sh_basis(view_dirs)  # (N, 4)
        raw_c = np.sum(coef * basis[..., None, :], axis=-1)
        act = logistic(raw_c)
        dc_raw = d_color * act * (1.0 - act)  # (N, 3)
        d_coef = dc_raw[..., :, None] * basis[..., None, :]  # (N, 3, 4)
        contrib = d_coef[..., None, :, :] * weights[..., :, None, None]  # (N, 8, 3, 4)
        np.add.at(grads.color.reshape(-1, 3, 4), corners.reshape(-1),
                  contrib.reshape(-1, 3, 4))
    return grads


def sample_gradient(f: RadianceField, q: FieldQuery,
                    d_sigma: float, d_color: np.ndarray) -> FieldGradients:
    """Gradient of a scalar loss through one query; nonzero on <= 8 voxels."""
    grads = FieldGradients.zeros_like(f)
    dirs = None if q.view_direction is None else q.view_direction[None, :]
    backprop_samples(f, q.position[None, :], dirs,
                     np.array([d_sigma]), np.asarray(d_color, dtype=np.float64)[None, :],
                     grads)
    return grads


def save_field(f: RadianceField, path):
    """Write the snapshot format described in the module docstring."""
    nx, ny, nz = f.resolution
    header = MAGIC + struct.pack(
        "<IIIII6f",
        FORMAT_VERSION,
        _MODEL_CODES[f.color_model],
        nx, ny, nz,
        *np.concatenate([f.bbox_min, f.bbox_max]).astype(np.float32),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.density_raw.astype("<f4").tobytes(order="C"))
        fh.write(f.color_raw.astype("<f4").tobytes(order="C"))


def load_field(path) -> RadianceField:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a field snapshot (magic {magic!r})")
        version, model_code, nx, ny, nz = struct.unpack("<IIIII", fh.read(20))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        if model_code not in _MODEL_NAMES:
            raise ValueError(f"{path}: unknown color model code {model_code}")
        bbox = struct.unpack("<6f", fh.read(24))
        model = _MODEL_NAMES[model_code]
        n_vox = nx * ny * nz
        n_col = n_vox * (3 if model == COLOR_RGB else 12)
        data = fh.read()
    expected = 4 * (n_vox + n_col)
    if len(data) != expected:
        raise ValueError(f"{path}: truncated snapshot ({len(data)} payload bytes, want {expected})")
    density = np.frombuffer(data[: 4 * n_vox], dtype="<f4").astype(np.float64).reshape(nx, ny, nz)
    cshape = (nx, ny, nz, 3) if model == COLOR_RGB else (nx, ny, nz, 3, 4)
    color = np.frombuffer(data[4 * n_vox:], dtype="<f4").astype(np.float64).reshape(cshape)
    return RadianceField(
        resolution=(nx, ny, nz),
        bbox_min=np.array(bbox[:3], dtype=np.float64),
        bbox_max=np.array(bbox[3:], dtype=np.float64),
        density_raw=density,
        color_raw=color,
        color_model=model,
    )
