"""Correspondence tuple generation from a trained field.

Two generation methods share the same skeleton: march the ray under a source
pixel, turn the compositing weights into a termination-depth distribution,
pick a depth, and reproject into the target view. The depth-map method uses
the expected termination depth and is fully deterministic; the density-field
method draws the depth from the normalized weight distribution, one draw per
correspondence. Candidates are then cycle-checked: the target pixel is mapped
back into the source view by the same method and the correspondence is kept
only when the round trip lands within cycle_threshold pixels of where it
started.

Determinism contract: every candidate sample gets its own generator keyed by
(seed, pair index, sample index), and the reverse draw of the cycle check is
taken even when the threshold is infinite. Acceptance decisions therefore
never shift the random stream, which makes the accepted set monotone in
cycle_threshold and the emitted tuple list independent of evaluation order.

Reprojection needs a z-depth; along-ray sample distances are converted with
the ray direction's camera-frame z component before projecting.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import renderer
from .dataio import PosedImage
from .field import RadianceField
from .geometry import Pixel, generate_rays, ray_z_scale, reproject
from .renderer import BatchRays, EmptyRayError

METHOD_DEPTH_MAP = "depth_map"
METHOD_DENSITY_FIELD = "density_field"
TUPLES_HEADER = "src_id,us_x,us_y,tgt_id,ut_x,ut_y,depth,weight,method"


class Rejected(enum.Enum):
    EMPTY_RAY = "empty_ray"
    OUT_OF_BOUNDS = "out_of_bounds"
    CYCLE = "cycle"


@dataclass(frozen=True)
class CorrespondenceTuple:
    src_image_id: str
    u_s: Pixel
    tgt_image_id: str
    u_t: Pixel
    sampled_depth: float  # z-depth in the source camera frame
    weight: float  # normalized mass of the sampled stratum; 1.0 in depth-map mode
    method: str

    def __post_init__(self):
        if self.sampled_depth <= 0:
            raise ValueError(f"sampled_depth must be positive, got {self.sampled_depth}")
        if not (0.0 < self.weight <= 1.0):
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")
        if self.method not in (METHOD_DEPTH_MAP, METHOD_DENSITY_FIELD):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class GenConfig:
    pairs_per_epoch: int = 24
    samples_per_pair: int = 200
    cycle_threshold: float = 2.0  # pixels; math.inf disables rejection, not the draw
    k_samples: int = 192
    seed: int = 0
    method: str = METHOD_DENSITY_FIELD
    jitter_sampled_depth: bool = False  # uniform jitter inside the drawn stratum
    deterministic_reverse: bool = False  # expected-depth reverse pass (ablation)

    def __post_init__(self):
        if self.pairs_per_epoch < 1 or self.samples_per_pair < 0:
            raise ValueError("pairs_per_epoch must be >= 1, samples_per_pair >= 0")
        if not self.cycle_threshold > 0:
            raise ValueError("cycle_threshold must be positive")
        if self.k_samples < 2:
            raise ValueError("k_samples must be >= 2")
        if self.method not in (METHOD_DEPTH_MAP, METHOD_DENSITY_FIELD):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class GenerationReport:
    method: str
    emitted: int = 0
    rejected_empty_ray: int = 0
    rejected_out_of_bounds: int = 0
    rejected_cycle: int = 0
    warnings: list = dc_field(default_factory=list)

    def count(self, reason: Rejected):
        if reason is Rejected.EMPTY_RAY:
            self.rejected_empty_ray += 1
        elif reason is Rejected.OUT_OF_BOUNDS:
            self.rejected_out_of_bounds += 1
        else:
            self.rejected_cycle += 1

    def to_text(self) -> str:
        lines = [
            f"method: {self.method}",
            f"emitted: {self.emitted}",
            f"rejected_empty_ray: {self.rejected_empty_ray}",
            f"rejected_out_of_bounds: {self.rejected_out_of_bounds}",
            f"rejected_cycle: {self.rejected_cycle}",
        ]
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines) + "\n"


def _ray_distribution(f: RadianceField, im: PosedImage, px: Pixel, k: int):
    """Termination distribution under one pixel, or None for an empty ray."""
    origin, dirs = generate_rays(im.intrinsics, im.pose, np.array([px.u]), np.array([px.v]))
    rays = BatchRays(np.broadcast_to(origin, dirs.shape), dirs, im.near, im.far)
    s = renderer.march_many(f, rays, k)
    samples = renderer.RaySamples(t=s.t[0], delta=s.delta[0], sigma=s.sigma[0], color=s.color[0])
    try:
        return renderer.depth_distribution(samples)
    except EmptyRayError:
        return None


def _in_mask(im: PosedImage, px: Pixel) -> bool:
    if im.mask is None:
        return True
    col, row = px.rounded()
    return bool(im.mask[row, col])


def _expected_z(dist, im: PosedImage, px: Pixel) -> float:
    return dist.expectation() * float(ray_z_scale(im.intrinsics, px.u, px.v))


def cycle_check(f: RadianceField, src: PosedImage, tgt: PosedImage,
                u_s: Pixel, u_t: Pixel, k: int, threshold: float,
                rng: np.random.Generator | None = None,
                deterministic: bool = False) -> bool:
    """Map u_t back into the source view and compare against u_s.

    The reverse depth is one probabilistic draw by default (pass rng), or the
    expected depth when deterministic=True. An empty reverse ray or a reverse
    projection that misses the source frustum rejects. The reverse draw is
    consumed regardless of threshold so acceptance never shifts rng streams.
    """
    dist = _ray_distribution(f, tgt, u_t, k)
    if dist is None:
        return False
    if deterministic:
        z_back = _expected_z(dist, tgt, u_t)
    else:
        if rng is None:
            raise ValueError("probabilistic cycle check needs an rng")
        idx = dist.sample_index(rng)
        z_back = float(dist.t[idx]) * float(ray_z_scale(tgt.intrinsics, u_t.u, u_t.v))
    if z_back <= 0:
        return False
    u_back, valid = reproject(u_t, z_back, tgt.intrinsics, tgt.pose, src.pose)
    if not valid:
        return False
    return u_back.distance(u_s) < threshold


def gen_depth_map(f: RadianceField, src: PosedImage, tgt: PosedImage, u_s: Pixel,
                  k: int = 192, cycle_threshold: float = 2.0):
    """Expected-depth correspondence for one source pixel (deterministic).

    Returns a CorrespondenceTuple or a Rejected reason. The caller is
    responsible for drawing u_s inside the source mask.
    """
    dist = _ray_distribution(f, src, u_s, k)
    if dist is None:
        return Rejected.EMPTY_RAY
    z = _expected_z(dist, src, u_s)
    if z <= 0:
        return Rejected.OUT_OF_BOUNDS
    u_t, valid = reproject(u_s, z, src.intrinsics, src.pose, tgt.pose)
    if not valid or not _in_mask(tgt, u_t):
        return Rejected.OUT_OF_BOUNDS
    if not cycle_check(f, src, tgt, u_s, u_t, k, cycle_threshold, deterministic=True):
        return Rejected.CYCLE
    return CorrespondenceTuple(src.image_id, u_s, tgt.image_id, u_t,
                               sampled_depth=z, weight=1.0, method=METHOD_DEPTH_MAP)


def gen_density_field(f: RadianceField, src: PosedImage, tgt: PosedImage, u_s: Pixel,
                      rng: np.random.Generator, k: int = 192,
                      cycle_threshold: float = 2.0, jitter: bool = False,
                      deterministic_reverse: bool = False):
    """Correspondence with the depth drawn from the termination distribution.

    One draw for the forward depth, one for the reverse check (unless
    deterministic_reverse). Returns a CorrespondenceTuple carrying the drawn
    stratum's normalized mass as weight, or a Rejected reason.
    """
    dist = _ray_distribution(f, src, u_s, k)
    if dist is None:
        return Rejected.EMPTY_RAY
    idx = dist.sample_index(rng)
    t_draw = float(dist.t[idx])
    if jitter:
        width = (src.far - src.near) / k
        t_draw += float(rng.uniform(0.0, width))
    z = t_draw * float(ray_z_scale(src.intrinsics, u_s.u, u_s.v))
    weight = float(dist.w_normalized[idx])
    if z <= 0:
        return Rejected.OUT_OF_BOUNDS
    u_t, valid = reproject(u_s, z, src.intrinsics, src.pose, tgt.pose)
    if not valid or not _in_mask(tgt, u_t):
        return Rejected.OUT_OF_BOUNDS
    if not cycle_check(f, src, tgt, u_s, u_t, k, cycle_threshold,
                       rng=rng, deterministic=deterministic_reverse):
        return Rejected.CYCLE
    return CorrespondenceTuple(src.image_id, u_s, tgt.image_id, u_t,
                               sampled_depth=z, weight=weight, method=METHOD_DENSITY_FIELD)


def _mask_pixels(im: PosedImage) -> np.ndarray:
    """(M, 2) integer (v, u) rows of eligible source pixels, row-major order."""
    if im.mask is None:
        h, w = im.intrinsics.height, im.intrinsics.width
        vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([vv.ravel(), uu.ravel()], axis=1)
    return np.argwhere(im.mask)


def generate_dataset(f: RadianceField, images: list[PosedImage], cfg: GenConfig):
    """Sample image pairs and source pixels; emit accepted tuples plus a report.

    Pair selection is uniform over ordered pairs with distinct ids. Images
    whose mask has no pixels are skipped (with a warning in the report).
    Output order is (pair index, sample index), which is deterministic.
    """
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    images = sorted(images, key=lambda im: im.image_id)
    report = GenerationReport(method=cfg.method)
    eligible = []
    pixel_lists = {}
    for im in images:
        px = _mask_pixels(im)
        if px.shape[0] == 0:
            report.warnings.append(f"image {im.image_id} has an empty mask; skipped")
            continue
        eligible.append(im)
        pixel_lists[im.image_id] = px
    if len(eligible) < 2:
        raise ValueError("fewer than 2 images with usable masks")

    n = len(eligible)
    pair_rng = np.random.default_rng([cfg.seed, 0])
    src_idx = pair_rng.integers(n, size=cfg.pairs_per_epoch)
    tgt_idx = pair_rng.integers(n - 1, size=cfg.pairs_per_epoch)
    tgt_idx = np.where(tgt_idx >= src_idx, tgt_idx + 1, tgt_idx)

    tuples = []
    for p in range(cfg.pairs_per_epoch):
        src = eligible[int(src_idx[p])]
        tgt = eligible[int(tgt_idx[p])]
        px = pixel_lists[src.image_id]
        for i in range(cfg.samples_per_pair):
            rng = np.random.default_rng([cfg.seed, 1, p, i])
            row = px[int(rng.integers(px.shape[0]))]
            u_s = Pixel(float(row[1]), float(row[0]))
            if cfg.method == METHOD_DEPTH_MAP:
                out = gen_depth_map(f, src, tgt, u_s, cfg.k_samples, cfg.cycle_threshold)
            else:
                out = gen_density_field(f, src, tgt, u_s, rng, cfg.k_samples,
                                        cfg.cycle_threshold, cfg.jitter_sampled_depth,
                                        cfg.deterministic_reverse)
            if isinstance(out, Rejected):
                report.count(out)
            else:
                report.emitted += 1
                tuples.append(out)
    return tuples, report


# ---------------------------------------------------------------------------
# persistence


def write_tuples_csv(path, tuples: list[CorrespondenceTuple]):
    with open(path, "w") as fh:
        fh.write(TUPLES_HEADER + "\n")
        for t in tuples:
            fh.write(f"{t.src_image_id},{float(t.u_s.u)!r},{float(t.u_s.v)!r},"
                     f"{t.tgt_image_id},{float(t.u_t.u)!r},{float(t.u_t.v)!r},"
                     f"{float(t.sampled_depth)!r},{float(t.weight)!r},{t.method}\n")


def read_tuples_csv(path) -> list[CorrespondenceTuple]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TUPLES_HEADER:
            raise ValueError(f"{path}: unexpected tuples header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, usx, usy, tid, utx, uty, depth, weight, method = line.split(",")
            out.append(CorrespondenceTuple(
                sid, Pixel(float(usx), float(usy)), tid, Pixel(float(utx), float(uty)),
                sampled_depth=float(depth), weight=float(weight), method=method))
    return out


def write_report_text(path, report: GenerationReport):
    with open(path, "w") as fh:
        fh.write(report.to_text())
