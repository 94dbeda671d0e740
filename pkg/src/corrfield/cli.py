"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: `synth` renders an analytic fixture
to a posed-image dataset, `train-field` fits a voxel field to a dataset,
`gen` produces correspondence tuples from a field, `train-desc` fits the
descriptor model on tuples, `eval` scores a matcher against annotations, and
`render` rasterizes views of a saved field.

Parameter precedence: command-line flags beat CORRFIELD_* environment
variables, which beat the --config JSON file, which beats built-in defaults.
Every run echoes its resolved parameters into run_manifest.json in the output
directory. The thread count is deliberately not echoed: outputs are required
to be byte-identical across thread counts, so it is an execution detail, not
a parameter.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import correspondence as corr
from . import dataio, descriptor, evalsynth, optimizer, renderer
from .field import COLOR_RGB, COLOR_SH1, load_field, save_field

ENV_PREFIX = "CORRFIELD_"


class CliError(Exception):
    pass


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"config file {path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return data


class Resolver:
    """flags > environment > config file > defaults, with type coercion."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _load_config(getattr(args, "config", None))
        self.resolved = {}

    def get(self, name: str, default, cast=None):
        value = getattr(self.args, name, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + name.upper())
            if env is not None:
                value = env
            elif name in self.config:
                value = self.config[name]
            else:
                value = default
        if cast is not None and value is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as e:
                raise CliError(f"bad value for {name}: {e}") from None
        self.resolved[name] = value
        return value

    def manifest(self, outdir):
        dataio.write_run_manifest(outdir, self.resolved)


def _as_bool(x) -> bool:
    if isinstance(x, bool):
        return x
    if isinstance(x, (int, float)):
        return bool(x)
    return str(x).strip().lower() in ("1", "true", "yes", "on")


def _as_resolution(x) -> tuple:
    if isinstance(x, (list, tuple)):
        parts = [int(v) for v in x]
    else:
        parts = [int(v) for v in str(x).split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise ValueError(f"resolution must be 1 or 3 positive ints, got {x!r}")
    return tuple(parts)


def _as_channels(x) -> tuple:
    if isinstance(x, (list, tuple)):
        return tuple(int(v) for v in x)
    return tuple(int(v) for v in str(x).split(","))


def _as_bbox(x):
    if x is None:
        return None
    if isinstance(x, (list, tuple)):
        flat = [float(v) for pair in x for v in (pair if isinstance(pair, (list, tuple)) else [pair])]
    else:
        flat = [float(v) for v in str(x).split(",")]
    if len(flat) != 6:
        raise ValueError("bbox needs 6 numbers: x0,y0,z0,x1,y1,z1")
    return np.array(flat[:3]), np.array(flat[3:])


def _method_tag(x: str) -> str:
    tag = str(x).replace("-", "_")
    if tag not in (corr.METHOD_DEPTH_MAP, corr.METHOD_DENSITY_FIELD):
        raise ValueError(f"method must be depth-map or density-field, got {x!r}")
    return tag


def _outdir(r: Resolver) -> str:
    out = r.get("out", None, str)
    if not out:
        raise CliError("--out is required")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    r = Resolver(args)
    fixture = r.get("fixture", None, str)
    if fixture is None:
        raise CliError("--fixture is required")
    views = r.get("views", None, int)
    size = r.get("size", None, int)
    seed = r.get("seed", 0, int)
    k = r.get("k_samples", 4096, int)
    sparse_n = r.get("sparse_per_view", 8, int)
    n_annot = r.get("annotations", 100, int)
    out = _outdir(r)
    threads = int(getattr(args, "threads", None) or 1)

    try:
        scene = evalsynth.make_scene(fixture, views, size)
    except ValueError as e:
        raise CliError(str(e)) from None
    evalsynth.save_scene(scene, os.path.join(out, "fixture.json"))
    os.makedirs(os.path.join(out, "depth"), exist_ok=True)
    images = []
    for view in range(len(scene.poses)):
        rgb, depth, mask = evalsynth.render_view(scene, view, k=k, threads=threads)
        image_id = evalsynth.view_id(view)
        sparse = evalsynth.sparse_depth_entries(scene, view, sparse_n, seed)
        points = [dataio.SparseDepthPoint.from_keypoint(image_id, e["u"], e["v"], e["k"],
                                                        scene.poses[view])
                  for e in sparse]
        images.append(dataio.PosedImage(
            image_id=image_id, pixels=rgb, intrinsics=scene.intrinsics,
            pose=scene.poses[view], mask=mask, sparse_depth=points,
            near=scene.near, far=scene.far))
        dataio.write_depth(os.path.join(out, "depth", f"{image_id}.f32"), depth)
    dataio.write_dataset(out, images, bbox=(scene.bbox_min, scene.bbox_max))
    annotations = evalsynth.annotate(scene, n_annot, seed)
    dataio.write_annotations_csv(os.path.join(out, "annotations.csv"), annotations)
    r.manifest(out)
    return 0


def cmd_train_field(args) -> int:
    r = Resolver(args)
    manifest = r.get("manifest", None, str)
    if manifest is None:
        raise CliError("--manifest is required")
    cfg = optimizer.TrainConfig(
        iterations=r.get("iterations", 600, int),
        batch_size=r.get("batch_size", 1024, int),
        learning_rate=r.get("learning_rate", 3000.0, float),
        momentum=r.get("momentum", 0.9, float),
        depth_loss_weight=r.get("lambda_depth", 1.0, float),
        k_samples=r.get("k_samples", 96, int),
        stratified=r.get("stratified", True, _as_bool),
        seed=r.get("seed", 0, int),
        resolution=r.get("resolution", (64, 64, 64), _as_resolution),
        color_model=r.get("color_model", COLOR_RGB, str),
        density_init=r.get("density_init", -1.0, float),
        density_lr_scale=r.get("density_lr_scale", 30.0, float),
    )
    init_path = r.get("init_field", None, str)
    out = _outdir(r)
    try:
        images = dataio.load_manifest(manifest)
    except dataio.ManifestError as e:
        raise CliError(str(e)) from None
    bbox = _as_bbox(r.get("bbox", None))
    if bbox is None:
        bbox = dataio.load_scene_bounds(manifest)
    if bbox is None:
        raise CliError("no bbox: pass --bbox or add a bbox entry to the manifest")
    if init_path:
        f = load_field(init_path)
        result = optimizer.train_from(f, images, cfg)
    else:
        result = optimizer.train(images, cfg, bbox)
    save_field(result.field, os.path.join(out, "field.vxf"))
    dataio.write_loss_csv(os.path.join(out, "loss.csv"), result.history)
    r.manifest(out)
    return 0


def cmd_gen(args) -> int:
    r = Resolver(args)
    field_path = r.get("field", None, str)
    manifest = r.get("manifest", None, str)
    if field_path is None or manifest is None:
        raise CliError("--field and --manifest are required")
    cfg = corr.GenConfig(
        pairs_per_epoch=r.get("pairs", 24, int),
        samples_per_pair=r.get("samples_per_pair", 200, int),
        cycle_threshold=r.get("cycle_threshold", 2.0, float),
        k_samples=r.get("k_samples", 192, int),
        seed=r.get("seed", 0, int),
        method=r.get("method", "density-field", _method_tag),
        jitter_sampled_depth=r.get("jitter", False, _as_bool),
        deterministic_reverse=r.get("deterministic_reverse", False, _as_bool),
    )
    out = _outdir(r)
    f = load_field(field_path)
    try:
        images = dataio.load_manifest(manifest)
    except dataio.ManifestError as e:
        raise CliError(str(e)) from None
    tuples, report = corr.generate_dataset(f, images, cfg)
    corr.write_tuples_csv(os.path.join(out, "tuples.csv"), tuples)
    corr.write_report_text(os.path.join(out, "report.txt"), report)
    r.manifest(out)
    return 0


def cmd_train_desc(args) -> int:
    r = Resolver(args)
    tuples_path = r.get("tuples", None, str)
    manifest = r.get("manifest", None, str)
    if tuples_path is None or manifest is None:
        raise CliError("--tuples and --manifest are required")
    cfg = descriptor.DescTrainConfig(
        steps=r.get("steps", 300, int),
        batch_size=r.get("batch_size", 128, int),
        learning_rate=r.get("learning_rate", 0.05, float),
        momentum=r.get("momentum", 0.9, float),
        margin=r.get("margin", 0.5, float),
        n_nonmatches=r.get("nonmatches", 4, int),
        seed=r.get("seed", 0, int),
        channels=r.get("channels", descriptor.DEFAULT_CHANNELS, _as_channels),
    )
    out = _outdir(r)
    tuples = corr.read_tuples_csv(tuples_path)
    if not tuples:
        raise CliError(f"no tuples in {tuples_path}")
    try:
        images = dataio.load_manifest(manifest)
    except dataio.ManifestError as e:
        raise CliError(str(e)) from None
    result = descriptor.train_descriptors(tuples, images, cfg)
    descriptor.save_model(result.model, os.path.join(out, "model.dsc"))
    with open(os.path.join(out, "loss.csv"), "w") as fh:
        fh.write("step,loss\n")
        for step, loss in result.history:
            fh.write(f"{int(step)},{float(loss)!r}\n")
    r.manifest(out)
    return 0


def cmd_eval(args) -> int:
    r = Resolver(args)
    manifest = r.get("manifest", None, str)
    annotations_path = r.get("annotations", None, str)
    matcher_kind = r.get("matcher", "model", str)
    model_path = r.get("model", None, str)
    fixture_json = r.get("fixture_json", None, str)
    if manifest is None or annotations_path is None:
        raise CliError("--manifest and --annotations are required")
    out = _outdir(r)
    try:
        images = dataio.load_manifest(manifest)
    except dataio.ManifestError as e:
        raise CliError(str(e)) from None
    annotations = dataio.read_annotations_csv(annotations_path)
    by_id = {im.image_id: im for im in images}

    if matcher_kind == "oracle":
        if fixture_json is None:
            raise CliError("--fixture-json is required for the oracle matcher")
        scene = evalsynth.load_scene(fixture_json)

        def matcher(src, px, tgt):
            gt = evalsynth.analytic_ground_truth(scene, src.pose, tgt.pose, px)
            if gt is None:
                return None
            _, u_t, valid = gt
            return u_t if valid else None
    elif matcher_kind == "model":
        if model_path is None:
            raise CliError("--model is required for the model matcher")
        model = descriptor.load_model(model_path)
        descs = {im.image_id: descriptor.forward(model, im.pixels) for im in images}
        os.makedirs(os.path.join(out, "desc"), exist_ok=True)
        for im in images:
            dataio.write_image_rgb8(os.path.join(out, "desc", f"{im.image_id}.png"),
                                    descriptor.visualize(descs[im.image_id]) / 255.0)

        def matcher(src, px, tgt):
            return descriptor.match(descs[src.image_id], px, descs[tgt.image_id], tgt.mask)
    else:
        raise CliError(f"unknown matcher {matcher_kind!r} (use model or oracle)")

    result = evalsynth.evaluate_matcher(matcher, annotations, by_id)
    dataio.write_eval_csv(os.path.join(out, "eval.csv"), [result.as_row()])
    r.manifest(out)
    return 0


def cmd_render(args) -> int:
    r = Resolver(args)
    field_path = r.get("field", None, str)
    manifest = r.get("manifest", None, str)
    if field_path is None or manifest is None:
        raise CliError("--field and --manifest are required")
    view = r.get("view", None, str)
    k = r.get("k_samples", 192, int)
    out = _outdir(r)
    threads = int(getattr(args, "threads", None) or 1)
    f = load_field(field_path)
    try:
        images = dataio.load_manifest(manifest)
    except dataio.ManifestError as e:
        raise CliError(str(e)) from None
    targets = [im for im in images if view is None or im.image_id == view]
    if not targets:
        raise CliError(f"view {view!r} not found in manifest")
    os.makedirs(os.path.join(out, "renders"), exist_ok=True)
    for im in targets:
        rgb, depth, _ = renderer.render_image(f, im.intrinsics, im.pose, im.near, im.far,
                                              k, threads=threads)
        dataio.write_image_rgb8(os.path.join(out, "renders", f"{im.image_id}.png"), rgb)
        dataio.write_depth(os.path.join(out, "renders", f"{im.image_id}.f32"), depth)
    r.manifest(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of parameter defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (outputs do not depend on this)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrfield",
        description="voxel radiance fields and field-supervised dense correspondence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render an analytic fixture to a dataset")
    _common(p)
    p.add_argument("--fixture", help=f"one of {sorted(evalsynth.FIXTURES)}")
    p.add_argument("--views", type=int)
    p.add_argument("--size", type=int, help="square image size in pixels")
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.add_argument("--sparse-per-view", dest="sparse_per_view", type=int)
    p.add_argument("--annotations", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-field", help="fit a voxel field to a dataset")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--lambda-depth", dest="lambda_depth", type=float)
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.add_argument("--stratified", type=int, choices=(0, 1))
    p.add_argument("--resolution", help="voxels per axis: N or nx,ny,nz")
    p.add_argument("--color-model", dest="color_model", choices=(COLOR_RGB, COLOR_SH1))
    p.add_argument("--density-init", dest="density_init", type=float)
    p.add_argument("--density-lr-scale", dest="density_lr_scale", type=float)
    p.add_argument("--bbox", help="x0,y0,z0,x1,y1,z1 world bounds (default: manifest bbox)")
    p.add_argument("--init-field", dest="init_field", help="resume from a field snapshot")
    p.set_defaults(func=cmd_train_field)

    p = sub.add_parser("gen", help="generate correspondence tuples from a field")
    _common(p)
    p.add_argument("--field")
    p.add_argument("--manifest")
    p.add_argument("--method", choices=("depth-map", "density-field"))
    p.add_argument("--pairs", type=int)
    p.add_argument("--samples-per-pair", dest="samples_per_pair", type=int)
    p.add_argument("--cycle-threshold", dest="cycle_threshold", type=float)
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.add_argument("--jitter", type=int, choices=(0, 1))
    p.add_argument("--deterministic-reverse", dest="deterministic_reverse",
                   type=int, choices=(0, 1))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-desc", help="train the descriptor model on tuples")
    _common(p)
    p.add_argument("--tuples")
    p.add_argument("--manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--nonmatches", type=int)
    p.add_argument("--channels", help="layer widths, e.g. 3,16,16,3")
    p.set_defaults(func=cmd_train_desc)

    p = sub.add_parser("eval", help="score a matcher against annotations")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--annotations")
    p.add_argument("--matcher", choices=("model", "oracle"))
    p.add_argument("--fixture-json", dest="fixture_json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render views of a saved field")
    _common(p)
    p.add_argument("--field")
    p.add_argument("--manifest")
    p.add_argument("--view", help="image id (default: every view in the manifest)")
    p.add_argument("--k-samples", dest="k_samples", type=int)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
