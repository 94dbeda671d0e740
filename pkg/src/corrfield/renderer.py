"""Volume rendering along rays: quadrature, compositing, and gradients.

Quadrature places K sample points at the left edges of K equal strata of
[t_near, t_far] (stratified mode jitters each point uniformly within its
stratum). With delta_k = t_{k+1} - t_k and delta_K = t_far - t_K:

    alpha_k = 1 - exp(-sigma_k * delta_k)
    T_k     = exp(-sum_{j<k} sigma_j * delta_j)      (T_1 = 1, non-increasing)
    w_k     = T_k * alpha_k
    color   = sum_k w_k * c_k
    depth   = sum_k w_k * t_k                        (expected termination distance)

sum_k w_k + residual = 1 with residual = T_{K+1}, the probability the ray
escapes. Depths here are distances along the unit ray direction, not camera
z-depths; see geometry.ray_z_scale for the conversion.

The backward pass (`composite_gradients`) is hand-derived: with
a_k = sigma_k * delta_k and u_k the upstream gradient on w_k,

    dL/da_k = u_k * T_k * exp(-a_k) - sum_{j>k} u_j * w_j

which the implementation evaluates with an exclusive suffix sum.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import field as field_mod
from .geometry import Ray, generate_rays

EMPTY_RAY_EPS = 1e-4


class EmptyRayError(Exception):
    """Raised when a ray's total absorbed mass is at or below the emptiness threshold."""

    def __init__(self, mass: float):
        super().__init__(f"ray absorbed mass {mass:.3e} <= {EMPTY_RAY_EPS}")
        self.mass = mass


@dataclass
class RaySamples:
    """Quadrature samples along one ray, field values already queried."""

    t: np.ndarray  # (K,)
    delta: np.ndarray  # (K,)
    sigma: np.ndarray  # (K,)
    color: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        k = self.t.shape[0]
        if k < 2:
            raise ValueError("need at least two samples")
        if self.delta.shape != (k,) or self.sigma.shape != (k,) or self.color.shape != (k, 3):
            raise ValueError("inconsistent sample array shapes")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample positions must be strictly increasing")
        if np.any(self.delta <= 0):
            raise ValueError("deltas must be positive")
        if np.any(self.sigma < 0):
            raise ValueError("densities must be non-negative")


@dataclass
class DepthDistribution:
    """Per-stratum termination probabilities for one ray."""

    t: np.ndarray  # (K,)
    w: np.ndarray  # (K,) unnormalized weights, sum <= 1
    residual: float  # escape probability, 1 - sum(w)
    w_normalized: np.ndarray  # (K,) sums to 1

    def sample_index(self, rng: np.random.Generator) -> int:
        """Draw a stratum index from w_normalized (inverse CDF on one uniform)."""
        cdf = np.cumsum(self.w_normalized)
        cdf[-1] = 1.0
        idx = int(np.searchsorted(cdf, rng.random(), side="right"))
        idx = min(idx, self.w_normalized.shape[0] - 1)
        # a draw landing exactly on a cdf step could select a zero-mass stratum
        while self.w_normalized[idx] <= 0 and idx + 1 < self.w_normalized.shape[0]:
            idx += 1
        return idx

    def expectation(self) -> float:
        """Unnormalized expected termination distance, sum_k w_k t_k (residual counts as zero)."""
        return float(np.sum(self.w * self.t))


@dataclass
class BatchRays:
    """A bundle of rays sharing a depth range."""

    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit norm
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origins = np.ascontiguousarray(self.origins, dtype=np.float64)
        self.dirs = np.ascontiguousarray(self.dirs, dtype=np.float64)
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")


@dataclass
class BatchSamples:
    """Batched quadrature: arrays shaped (N, K) / (N, K, 3)."""

    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    rays: BatchRays

    def positions(self) -> np.ndarray:
        """(N, K, 3) world-space sample positions."""
        return self.rays.origins[:, None, :] + self.t[:, :, None] * self.rays.dirs[:, None, :]


def sample_positions(n_rays: int, k: int, t_near: float, t_far: float,
                     stratified: bool = False, rng: np.random.Generator | None = None):
    """Sample distances for n_rays rays: t (N, K) and delta (N, K).

    Deterministic mode uses stratum left edges, so all deltas equal the
    stratum width. Stratified mode needs an rng and keeps each t_k inside its
    stratum, so t stays strictly increasing and delta_K = t_far - t_K > 0.
    """
    if k < 2:
        raise ValueError("K must be >= 2")
    width = (t_far - t_near) / k
    offsets = np.arange(k, dtype=np.float64)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling requires an rng")
        u = rng.random((n_rays, k))
        t = t_near + (offsets[None, :] + u) * width
    else:
        t = np.broadcast_to(t_near + offsets * width, (n_rays, k)).copy()
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = t_far - t[:, -1]
    return t, delta


def march_many(f: field_mod.RadianceField, rays: BatchRays, k: int,
               stratified: bool = False, rng: np.random.Generator | None = None) -> BatchSamples:
    """Sample the field along a bundle of rays."""
    n = rays.origins.shape[0]
    t, delta = sample_positions(n, k, rays.t_near, rays.t_far, stratified, rng)
    pos = rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
    dirs = np.broadcast_to(rays.dirs[:, None, :], pos.shape)
    sigma, color = field_mod.sample_many(f, pos.reshape(-1, 3), dirs.reshape(-1, 3))
    return BatchSamples(t=t, delta=delta,
                        sigma=sigma.reshape(n, k),
                        color=color.reshape(n, k, 3),
                        rays=rays)


def march(f: field_mod.RadianceField, ray: Ray, k: int,
          stratified: bool = False, rng: np.random.Generator | None = None) -> RaySamples:
    """Sample the field along one ray; see `sample_positions` for the scheme."""
    if not np.isfinite(ray.t_far):
        raise ValueError("march requires a finite t_far")
    batch = march_many(
        f,
        BatchRays(ray.origin[None, :], ray.direction[None, :], ray.t_near, ray.t_far),
        k, stratified, rng,
    )
    return RaySamples(t=batch.t[0], delta=batch.delta[0],
                      sigma=batch.sigma[0], color=batch.color[0])


def compositing_weights(sigma: np.ndarray, delta: np.ndarray):
    """alpha, transmittance, and weights for sigma/delta shaped (..., K)."""
    a = sigma * delta
    alpha = -np.expm1(-a)
    # exclusive cumulative optical depth: T_1 = 1
    acc = np.cumsum(a, axis=-1)
    acc = np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1)
    trans = np.exp(-acc)
    return alpha, trans, trans * alpha


def composite_color(s: RaySamples) -> np.ndarray:
    """Quadrature estimate of the ray's color, shape (3,)."""
    _, _, w = compositing_weights(s.sigma, s.delta)
    return w @ s.color


def composite_depth(s: RaySamples) -> float:
    """Expected termination distance along the ray (escape mass contributes zero)."""
    _, _, w = compositing_weights(s.sigma, s.delta)
    return float(w @ s.t)


def depth_distribution(s: RaySamples, eps: float = EMPTY_RAY_EPS) -> DepthDistribution:
    """Termination distribution over strata; raises EmptyRayError when mass <= eps."""
    _, _, w = compositing_weights(s.sigma, s.delta)
    mass = float(np.sum(w))
    if mass <= eps:
        raise EmptyRayError(mass)
    residual = max(1.0 - mass, 0.0)
    return DepthDistribution(t=s.t, w=w, residual=residual, w_normalized=w / mass)


def composite_gradients(s: RaySamples,
                        d_color: np.ndarray | None = None,
                        d_depth: float | None = None):
    """Backward pass of composite_color / composite_depth for one ray.

    d_color (3,) and d_depth are upstream gradients; either may be None.
    Returns (dL/dsigma (K,), dL/dcolor (K, 3)).
    """
    dc = None if d_color is None else np.asarray(d_color, dtype=np.float64)[None, :]
    dd = None if d_depth is None else np.array([d_depth], dtype=np.float64)
    d_sigma, d_col = composite_gradients_many(
        s.sigma[None, :], s.delta[None, :], s.color[None, :, :], s.t[None, :], dc, dd)
    return d_sigma[0], d_col[0]


def composite_gradients_many(sigma, delta, color, t, d_color=None, d_depth=None):
    """Batched backward pass; see module docstring for the derivation.

    sigma/delta/t are (N, K), color is (N, K, 3); d_color (N, 3) and d_depth
    (N,) are upstream gradients (None for unused outputs). Returns
    (dL/dsigma (N, K), dL/dcolor (N, K, 3)).
    """
    alpha, trans, w = compositing_weights(sigma, delta)
    u = np.zeros_like(sigma)
    d_col_samples = np.zeros_like(color)
    if d_color is not None:
        d_color = np.asarray(d_color, dtype=np.float64)
        u += np.sum(d_color[:, None, :] * color, axis=-1)
        d_col_samples += w[..., None] * d_color[:, None, :]
    if d_depth is not None:
        d_depth = np.asarray(d_depth, dtype=np.float64)
        u += d_depth[:, None] * t
    uw = u * w
    # exclusive suffix sum of u_j w_j over j > k
    rev = np.cumsum(uw[..., ::-1], axis=-1)[..., ::-1]
    suffix = np.concatenate([rev[..., 1:], np.zeros_like(rev[..., :1])], axis=-1)
    d_a = u * trans * (1.0 - alpha) - suffix
    return d_a * delta, d_col_samples


def render_image(f: field_mod.RadianceField, intr, pose, t_near: float, t_far: float,
                 k: int, stratified: bool = False, rng: np.random.Generator | None = None,
                 row_chunk: int = 16, threads: int = 1):
    """Render a full view. Returns (rgb (H, W, 3), depth (H, W), mass (H, W)).

    depth is the expected termination distance along each ray (not z-depth);
    mass is the absorbed probability sum(w), useful for emptiness masks.
    Row chunks write into disjoint output slices, so the threaded path is
    bit-identical to the sequential one; stratified jitter draws from a single
    rng stream and therefore forces sequential execution.
    """
    h, w = intr.height, intr.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    mass = np.zeros((h, w))

    def do_chunk(row0: int):
        rows = np.arange(row0, min(row0 + row_chunk, h))
        vv, uu = np.meshgrid(rows, np.arange(w), indexing="ij")
        origin, dirs = generate_rays(intr, pose, uu.ravel(), vv.ravel())
        rays = BatchRays(np.broadcast_to(origin, dirs.shape), dirs, t_near, t_far)
        s = march_many(f, rays, k, stratified, rng)
        _, _, wgt = compositing_weights(s.sigma, s.delta)
        n_rows = rows.shape[0]
        rgb[rows] = (np.sum(wgt[..., None] * s.color, axis=1)).reshape(n_rows, w, 3)
        depth[rows] = (np.sum(wgt * s.t, axis=1)).reshape(n_rows, w)
        mass[rows] = np.sum(wgt, axis=1).reshape(n_rows, w)

    starts = range(0, h, row_chunk)
    if threads > 1 and not stratified:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(do_chunk, starts))
    else:
        for row0 in starts:
            do_chunk(row0)
    return rgb, depth, mass
