"""Fits a voxel radiance field to posed images by gradient descent.

The objective is L = L_photo + lambda * L_depth. L_photo is the mean squared
color error over a batch of rays; L_depth is the mean squared z-depth error
over the dataset's sparse depth points, where the rendered along-ray expected
depth is converted to camera z-depth before comparison (supervision depths
are z-coordinates, rays have unit directions). Both losses are means, not
sums, so the learning rate does not depend on batch or point counts.

The update is plain gradient descent with momentum. Determinism contract:
images are sorted by id on entry, every random draw comes from a generator
keyed by (seed, step, purpose), and the sparse-depth rays are marched without
jitter, so a run with depth_loss_weight = 0 consumes exactly the same random
stream as a run with no depth data at all and produces a bit-identical field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import field as field_mod
from . import renderer
from .dataio import PosedImage, SparseDepthPoint
from .field import COLOR_RGB, FieldGradients, RadianceField
from .geometry import generate_rays, ray_z_scale
from .renderer import BatchRays


@dataclass
class TrainConfig:
    iterations: int = 600
    batch_size: int = 1024  # rays per step
    learning_rate: float = 3000.0
    momentum: float = 0.9
    depth_loss_weight: float = 1.0  # lambda in the combined loss
    k_samples: int = 96
    stratified: bool = True
    seed: int = 0
    resolution: tuple[int, int, int] = (64, 64, 64)
    color_model: str = COLOR_RGB
    density_init: float = -1.0
    density_lr_scale: float = 30.0  # density raw values travel much farther than colors

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("iterations, batch_size, learning_rate must be positive")
        if self.depth_loss_weight < 0:
            raise ValueError("depth_loss_weight must be >= 0")
        if not (0 <= self.momentum < 1):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.k_samples < 2:
            raise ValueError("k_samples must be >= 2")
        self.resolution = tuple(int(n) for n in self.resolution)


@dataclass
class TrainResult:
    field: RadianceField
    history: list = dc_field(default_factory=list)  # (step, loss_photo, loss_depth, total)


def photometric_loss(f: RadianceField, rays: BatchRays, colors: np.ndarray,
                     k: int, stratified: bool = False,
                     rng: np.random.Generator | None = None,
                     grads: FieldGradients | None = None) -> float:
    """Mean squared color error over the batch; accumulates into grads if given."""
    n = rays.origins.shape[0]
    if n == 0:
        raise ValueError("empty ray batch")
    colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
    s = renderer.march_many(f, rays, k, stratified, rng)
    _, _, w = renderer.compositing_weights(s.sigma, s.delta)
    c_hat = np.einsum("nk,nkc->nc", w, s.color)
    err = c_hat - colors
    loss = float(np.sum(err * err) / n)
    if grads is not None:
        d_sigma, d_col = renderer.composite_gradients_many(
            s.sigma, s.delta, s.color, s.t, d_color=2.0 * err / n)
        pos = s.positions().reshape(-1, 3)
        dirs = np.broadcast_to(rays.dirs[:, None, :], (n, k, 3)).reshape(-1, 3)
        field_mod.backprop_samples(f, pos, dirs, d_sigma.reshape(-1),
                                   d_col.reshape(-1, 3), grads)
    return loss


def depth_loss(f: RadianceField, points: list[SparseDepthPoint],
               images: dict[str, PosedImage], k: int,
               grads: FieldGradients | None = None) -> float:
    """Mean squared z-depth error over sparse supervision points.

    Rays are marched without jitter. Points on empty rays still contribute:
    the rendered expected depth is simply Sum(w t), zero mass giving zero
    depth, which is exactly what the gradient then pushes against.
    """
    if not points:
        return 0.0
    loss = 0.0
    n_total = len(points)
    by_image: dict[str, list[SparseDepthPoint]] = {}
    for p in points:
        by_image.setdefault(p.image_id, []).append(p)
    for image_id in sorted(by_image):
        im = images[image_id]
        pts = by_image[image_id]
        u = np.array([p.u for p in pts])
        v = np.array([p.v for p in pts])
        target = np.array([p.depth_gt for p in pts])
        origin, dirs = generate_rays(im.intrinsics, im.pose, u, v)
        rays = BatchRays(np.broadcast_to(origin, dirs.shape), dirs, im.near, im.far)
        s = renderer.march_many(f, rays, k)
        _, _, w = renderer.compositing_weights(s.sigma, s.delta)
        scale = ray_z_scale(im.intrinsics, u, v)
        z_hat = np.sum(w * s.t, axis=1) * scale
        err = z_hat - target
        loss += float(np.sum(err * err)) / n_total
        if grads is not None:
            d_depth = 2.0 * err * scale / n_total
            m = len(pts)
            d_sigma, d_col = renderer.composite_gradients_many(
                s.sigma, s.delta, s.color, s.t, d_depth=d_depth)
            pos = s.positions().reshape(-1, 3)
            dd = np.broadcast_to(rays.dirs[:, None, :], (m, k, 3)).reshape(-1, 3)
            field_mod.backprop_samples(f, pos, dd, d_sigma.reshape(-1),
                                       d_col.reshape(-1, 3), grads)
    return loss


def _pixel_pool(images: list[PosedImage]):
    """Flat (image index, v, u) triples over every pixel of every image."""
    rows = []
    for idx, im in enumerate(images):
        h, w = im.intrinsics.height, im.intrinsics.width
        vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        ii = np.full(vv.size, idx)
        rows.append(np.stack([ii, vv.ravel(), uu.ravel()], axis=1))
    return np.concatenate(rows, axis=0)


def train(images: list[PosedImage], cfg: TrainConfig, bbox) -> TrainResult:
    """Optimize a fresh field on the dataset. Deterministic in (images, cfg, bbox).

    bbox is (min_xyz, max_xyz) world bounds for the voxel grid. Image list
    order does not matter; images are sorted by id internally.
    """
    bbox_min = np.asarray(bbox[0], dtype=np.float64)
    bbox_max = np.asarray(bbox[1], dtype=np.float64)
    f = RadianceField.zeros(cfg.resolution, bbox_min, bbox_max, cfg.color_model,
                            density_init=cfg.density_init)
    return train_from(f, images, cfg)


def train_from(f: RadianceField, images: list[PosedImage], cfg: TrainConfig) -> TrainResult:
    """Continue optimizing an existing field (momentum starts at zero)."""
    if len(images) < 2:
        raise ValueError("training needs at least 2 posed images")
    images = sorted(images, key=lambda im: im.image_id)
    shape = images[0].pixels.shape
    for im in images:
        if im.pixels.shape != shape:
            raise ValueError(f"inconsistent image sizes: {im.image_id} has {im.pixels.shape}")
    by_id = {im.image_id: im for im in images}
    depth_points = [p for im in images for p in im.sparse_depth]
    use_depth = cfg.depth_loss_weight > 0 and len(depth_points) > 0

    pool = _pixel_pool(images)
    vel = FieldGradients.zeros_like(f)
    history = []
    for step in range(cfg.iterations):
        pick = np.random.default_rng([cfg.seed, step, 0]).integers(pool.shape[0],
                                                                   size=cfg.batch_size)
        jitter_rng = np.random.default_rng([cfg.seed, step, 1])
        batch = pool[pick]
        grads = FieldGradients.zeros_like(f)
        loss_photo = 0.0
        # group by image (ascending index keeps rng consumption order fixed)
        for idx in np.unique(batch[:, 0]):
            sel = batch[batch[:, 0] == idx]
            im = images[idx]
            u, v = sel[:, 2].astype(np.float64), sel[:, 1].astype(np.float64)
            origin, dirs = generate_rays(im.intrinsics, im.pose, u, v)
            rays = BatchRays(np.broadcast_to(origin, dirs.shape), dirs, im.near, im.far)
            observed = im.pixels[sel[:, 1], sel[:, 2]]
            part = FieldGradients.zeros_like(f)
            sub = photometric_loss(f, rays, observed, cfg.k_samples,
                                   cfg.stratified, jitter_rng, grads=part)
            # fold the per-image mean into the batch mean
            frac = sel.shape[0] / cfg.batch_size
            loss_photo += sub * frac
            grads.add(part.scale(frac))
        loss_depth = 0.0
        if use_depth:
            dpart = FieldGradients.zeros_like(f)
            loss_depth = depth_loss(f, depth_points, by_id, cfg.k_samples, grads=dpart)
            grads.add(dpart.scale(cfg.depth_loss_weight))
        total = loss_photo + cfg.depth_loss_weight * loss_depth
        history.append((step, loss_photo, loss_depth, total))
        vel.density = cfg.momentum * vel.density + grads.density
        vel.color = cfg.momentum * vel.color + grads.color
        f.density_raw -= cfg.learning_rate * cfg.density_lr_scale * vel.density
        f.color_raw -= cfg.learning_rate * vel.color
    return TrainResult(field=f, history=history)
