"""Dataset manifests, posed images, and on-disk formats.

A dataset is a JSON manifest plus image files. The manifest carries shared
or per-image intrinsics, camera-to-world poses as 4x4 row-major matrices,
optional mask paths (nonzero pixels are "in"), optional per-image sparse
depth, per-image or shared near/far ray bounds, and optionally the scene
bounding box used to size a voxel grid. Sparse depth entries come in two
forms: {"u", "v", "depth"} with depth the camera-frame z-depth, or
{"u", "v", "k": [x, y, z]} naming a world-space keypoint, converted via
z-extraction from the camera pose.

Images are 8-bit RGB PNG (PPM also accepted on read via Pillow); depth maps
are a small binary format: magic, width, height, then row-major little-endian
float32. All loaders raise ManifestError naming the offending entry.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pixel, Pose, unproject

DEPTH_MAGIC = b"DEPTH32\0"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass
class SparseDepthPoint:
    """A pixel with known ground-truth z-depth from a world keypoint."""

    image_id: str
    u: float
    v: float
    keypoint_world: np.ndarray  # (3,)
    depth_gt: float  # z-depth in the image's camera frame

    def __post_init__(self):
        self.keypoint_world = np.asarray(self.keypoint_world, dtype=np.float64).reshape(3)
        if self.depth_gt <= 0:
            raise ValueError(f"{self.image_id}: sparse depth must be positive, got {self.depth_gt}")

    @classmethod
    def from_keypoint(cls, image_id: str, u: float, v: float, k_world, pose: Pose):
        k_world = np.asarray(k_world, dtype=np.float64).reshape(3)
        depth = float(pose.inverse().transform(k_world)[2])
        return cls(image_id, u, v, k_world, depth)

    @classmethod
    def from_depth(cls, image_id: str, u: float, v: float, depth: float,
                   intr: CameraIntrinsics, pose: Pose):
        k_world = pose.transform(unproject(intr, Pixel(u, v), depth))
        return cls(image_id, u, v, k_world, depth)

    def depth_consistent(self, pose: Pose, tol: float = 1e-9) -> bool:
        return abs(float(pose.inverse().transform(self.keypoint_world)[2]) - self.depth_gt) <= tol


@dataclass
class PosedImage:
    image_id: str
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    intrinsics: CameraIntrinsics
    pose: Pose
    mask: np.ndarray | None = None  # (H, W) bool
    sparse_depth: list[SparseDepthPoint] = dc_field(default_factory=list)
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.pixels.shape != (h, w, 3):
            raise ValueError(f"{self.image_id}: pixels {self.pixels.shape} != intrinsics {h}x{w}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (h, w):
                raise ValueError(f"{self.image_id}: mask shape {self.mask.shape} != {h}x{w}")
        if not (0 <= self.near < self.far):
            raise ValueError(f"{self.image_id}: need 0 <= near < far")


# ---------------------------------------------------------------------------
# image and depth files


def write_image_rgb8(path, pixels: np.ndarray):
    """Save float [0, 1] RGB to an 8-bit PNG (rounding to nearest level)."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_mask(path, mask: np.ndarray):
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr != 0


def write_depth(path, depth: np.ndarray):
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {d.shape}")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(d.astype("<f4").tobytes(order="C"))


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a depth file (magic {magic!r})")
        w, h = struct.unpack("<II", fh.read(8))
        data = fh.read()
    if len(data) != 4 * w * h:
        raise ValueError(f"{path}: truncated depth file")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(h, w)


# ---------------------------------------------------------------------------
# manifests


def _load_intrinsics(d: dict) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                                width=d["width"], height=d["height"])
    except KeyError as e:
        raise ManifestError(f"intrinsics missing key {e}") from None


def load_manifest(path) -> list[PosedImage]:
    """Load a dataset manifest; returns images sorted by id."""
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None

    if data.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {data.get('version')!r}")
    shared_intr = _load_intrinsics(data["intrinsics"]) if "intrinsics" in data else None
    default_near = data.get("near", 0.1)
    default_far = data.get("far", 10.0)

    entries = data.get("images")
    if not entries:
        raise ManifestError(f"{path}: manifest has no images")
    images = []
    seen = set()
    for i, e in enumerate(entries):
        eid = e.get("id")
        if not eid:
            raise ManifestError(f"{path}: images[{i}] has no id")
        if eid in seen:
            raise ManifestError(f"{path}: duplicate image id {eid!r}")
        seen.add(eid)
        intr = _load_intrinsics(e["intrinsics"]) if "intrinsics" in e else shared_intr
        if intr is None:
            raise ManifestError(f"{eid}: no intrinsics (neither shared nor per-image)")
        if "pose" not in e:
            raise ManifestError(f"{eid}: missing pose")
        try:
            pose = Pose.from_matrix(np.array(e["pose"], dtype=np.float64))
        except ValueError as err:
            raise ManifestError(f"{eid}: bad pose ({err})") from None
        img_path = os.path.join(root, e.get("image", ""))
        if not e.get("image") or not os.path.exists(img_path):
            raise ManifestError(f"{eid}: image file missing ({e.get('image')!r})")
        pixels = read_image(img_path)
        if pixels.shape[:2] != (intr.height, intr.width):
            raise ManifestError(
                f"{eid}: image is {pixels.shape[1]}x{pixels.shape[0]}, "
                f"intrinsics say {intr.width}x{intr.height}")
        mask = None
        if e.get("mask"):
            mask_path = os.path.join(root, e["mask"])
            if not os.path.exists(mask_path):
                raise ManifestError(f"{eid}: mask file missing ({e['mask']!r})")
            mask = read_mask(mask_path)
            if mask.shape != (intr.height, intr.width):
                raise ManifestError(f"{eid}: mask shape {mask.shape} mismatches image")
        points = []
        for j, sd in enumerate(e.get("sparse_depth", [])):
            if "u" not in sd or "v" not in sd:
                raise ManifestError(f"{eid}: sparse_depth[{j}] missing u/v")
            try:
                if "k" in sd:
                    pt = SparseDepthPoint.from_keypoint(eid, sd["u"], sd["v"], sd["k"], pose)
                elif "depth" in sd:
                    pt = SparseDepthPoint.from_depth(eid, sd["u"], sd["v"], sd["depth"], intr, pose)
                else:
                    raise ManifestError(f"{eid}: sparse_depth[{j}] needs 'depth' or 'k'")
            except ValueError as err:
                raise ManifestError(f"{eid}: sparse_depth[{j}]: {err}") from None
            points.append(pt)
        images.append(PosedImage(
            image_id=eid, pixels=pixels, intrinsics=intr, pose=pose, mask=mask,
            sparse_depth=points, near=e.get("near", default_near), far=e.get("far", default_far),
        ))
    images.sort(key=lambda im: im.image_id)
    return images


def load_scene_bounds(path):
    """Optional scene bbox from a manifest: (bbox_min, bbox_max) or None."""
    with open(path) as fh:
        data = json.load(fh)
    if "bbox" not in data:
        return None
    lo, hi = data["bbox"]
    return np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)


def write_dataset(outdir, images: list[PosedImage], bbox=None, extra: dict | None = None):
    """Write images, masks, and a manifest under outdir. Returns manifest path.

    Sparse depth is written in keypoint form. Intrinsics are shared (taken
    from the first image; all images must agree).
    """
    os.makedirs(os.path.join(outdir, "images"), exist_ok=True)
    have_masks = any(im.mask is not None for im in images)
    if have_masks:
        os.makedirs(os.path.join(outdir, "masks"), exist_ok=True)
    intr = images[0].intrinsics
    if any(im.intrinsics != intr for im in images):
        raise ValueError("write_dataset requires shared intrinsics")
    entries = []
    for im in sorted(images, key=lambda m: m.image_id):
        rel_img = os.path.join("images", f"{im.image_id}.png")
        write_image_rgb8(os.path.join(outdir, rel_img), im.pixels)
        entry = {
            "id": im.image_id,
            "image": rel_img,
            "pose": im.pose.as_matrix().tolist(),
            "near": im.near,
            "far": im.far,
        }
        if im.mask is not None:
            rel_mask = os.path.join("masks", f"{im.image_id}.png")
            write_mask(os.path.join(outdir, rel_mask), im.mask)
            entry["mask"] = rel_mask
        if im.sparse_depth:
            entry["sparse_depth"] = [
                {"u": p.u, "v": p.v, "k": p.keypoint_world.tolist()} for p in im.sparse_depth
            ]
        entries.append(entry)
    manifest = {
        "version": MANIFEST_VERSION,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "images": entries,
    }
    if bbox is not None:
        manifest["bbox"] = [np.asarray(bbox[0]).tolist(), np.asarray(bbox[1]).tolist()]
    if extra:
        manifest.update(extra)
    mpath = os.path.join(outdir, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return mpath


def holdout_split(images: list[PosedImage], n_test: int, seed: int):
    """Deterministic disjoint train/test split; the union is the input set."""
    if not (0 <= n_test < len(images)):
        raise ValueError(f"n_test must be in [0, {len(images)}), got {n_test}")
    ordered = sorted(images, key=lambda im: im.image_id)
    perm = np.random.default_rng([seed, 47]).permutation(len(ordered))
    test_idx = set(int(i) for i in perm[:n_test])
    train = [im for i, im in enumerate(ordered) if i not in test_idx]
    test = [im for i, im in enumerate(ordered) if i in test_idx]
    return train, test


# ---------------------------------------------------------------------------
# CSV and run records


def write_loss_csv(path, rows):
    """rows: iterable of (step, loss_photo, loss_depth, loss_total)."""
    with open(path, "w") as fh:
        fh.write("step,loss_photo,loss_depth,loss\n")
        for step, lp, ld, lt in rows:
            fh.write(f"{int(step)},{float(lp)!r},{float(ld)!r},{float(lt)!r}\n")


def write_annotations_csv(path, annotations):
    with open(path, "w") as fh:
        fh.write("src_id,us_x,us_y,tgt_id,ut_x,ut_y\n")
        for a in annotations:
            fh.write(f"{a.src_image_id},{float(a.u_s.u)!r},{float(a.u_s.v)!r},"
                     f"{a.tgt_image_id},{float(a.u_t.u)!r},{float(a.u_t.v)!r}\n")


def read_annotations_csv(path):
    from .evalsynth import AnnotatedCorrespondence  # local: dataio stays import-light

    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "src_id,us_x,us_y,tgt_id,ut_x,ut_y":
            raise ValueError(f"{path}: unexpected annotations header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            sid, ux, uy, tid, tx, ty = line.strip().split(",")
            out.append(AnnotatedCorrespondence(
                sid, Pixel(float(ux), float(uy)), tid, Pixel(float(tx), float(ty))))
    return out


def write_eval_csv(path, rows: list[dict]):
    """rows: dicts from EvalResult.as_row(), optionally with extra leading keys."""
    if not rows:
        raise ValueError("no eval rows to write")
    keys = list(rows[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row[k]) for k in keys) + "\n")


def _fmt_cell(x):
    # numpy scalars subclass float but repr as np.float64(...); force plain float
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def write_run_manifest(outdir, params: dict):
    """Echo resolved run parameters (no volatile fields) next to the artifacts."""
    with open(os.path.join(outdir, "run_manifest.json"), "w") as fh:
        json.dump(params, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
