"""Small dense-descriptor convnet trained with a pixelwise contrastive loss.

The model is a stack of 3x3 stride-1 convolutions with tanh between layers
and a linear last layer, so a d-channel descriptor image keeps the spatial
dims of its input (zero padding). Forward and backward are written with
im2col patch matrices; the whole network is a few matmuls per image, which
is plenty for desk-scale images and keeps every gradient hand-checkable.

Training pulls matched pixels together in descriptor space (squared
distance) and pushes sampled non-matches apart with a hinge at margin M:
max(0, M - dist)^2. The loss is the mean over all match and non-match terms,
so the learning rate is insensitive to batch composition.

Snapshot format: magic, layer count, then per layer (c_in, c_out, 3x3x c_in
x c_out weights, c_out biases), all little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dataio import PosedImage
from .geometry import Pixel

MODEL_MAGIC = b"DESCNET1"
DEFAULT_CHANNELS = (3, 16, 16, 3)
_DIST_EPS = 1e-12


@dataclass
class DescriptorModel:
    """Convolution stack; weights[i] is (3, 3, c_in, c_out), biases[i] is (c_out,)."""

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias vector per weight tensor")
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 4 or w.shape[:2] != (3, 3) or b.shape != (w.shape[3],):
                raise ValueError(f"bad layer shapes {w.shape} / {b.shape}")
        for w_prev, w_next in zip(self.weights, self.weights[1:]):
            if w_prev.shape[3] != w_next.shape[2]:
                raise ValueError("layer channel counts do not chain")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_channels(self) -> int:
        return self.weights[0].shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights[-1].shape[3]

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * self.n_layers

    @classmethod
    def create(cls, rng: np.random.Generator, channels=DEFAULT_CHANNELS) -> "DescriptorModel":
        """He-scaled random weights, zero biases."""
        if len(channels) < 2:
            raise ValueError("channels must list input and output dims")
        weights, biases = [], []
        for cin, cout in zip(channels, channels[1:]):
            scale = np.sqrt(2.0 / (9.0 * cin))
            weights.append(rng.normal(0.0, scale, size=(3, 3, cin, cout)))
            biases.append(np.zeros(cout))
        return cls(weights, biases)

    def clone(self) -> "DescriptorModel":
        return DescriptorModel([w.copy() for w in self.weights],
                               [b.copy() for b in self.biases])


def _patches(x: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (H, W, C, 3, 3) zero-padded sliding windows."""
    h, w, c = x.shape
    padded = np.zeros((h + 2, w + 2, c))
    padded[1:-1, 1:-1] = x
    return np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wd, _ = x.shape
    p = _patches(x).reshape(h * wd, -1)  # patch vector order (c, ky, kx)
    wm = np.transpose(w, (2, 0, 1, 3)).reshape(p.shape[1], w.shape[3])
    return (p @ wm + b).reshape(h, wd, w.shape[3])


def forward(model: DescriptorModel, image: np.ndarray) -> np.ndarray:
    """Dense descriptors (H, W, d) for an (H, W, 3) image in [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.in_channels:
        raise ValueError(f"expected (H, W, {model.in_channels}) input, got {x.shape}")
    rf = model.receptive_field
    if x.shape[0] < rf or x.shape[1] < rf:
        raise ValueError(f"image {x.shape[:2]} smaller than receptive field {rf}")
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        x = _conv(x, w, b)
        if i + 1 < model.n_layers:
            x = np.tanh(x)
    return x


def _forward_trace(model: DescriptorModel, image: np.ndarray):
    """Forward keeping pre-activation inputs of each layer for backprop."""
    x = np.asarray(image, dtype=np.float64)
    inputs = []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(x)
        x = _conv(x, w, b)
        if i + 1 < model.n_layers:
            x = np.tanh(x)
    return x, inputs


@dataclass
class ModelGradients:
    weights: list
    biases: list

    @classmethod
    def zeros_like(cls, model: DescriptorModel) -> "ModelGradients":
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases])

    def add_scaled(self, other: "ModelGradients", s: float = 1.0):
        for i in range(len(self.weights)):
            self.weights[i] += s * other.weights[i]
            self.biases[i] += s * other.biases[i]
        return self


def _backward(model: DescriptorModel, inputs: list, d_out: np.ndarray,
              grads: ModelGradients):
    """Backprop d_out (H, W, d) through the stack, accumulating into grads."""
    d = d_out
    for i in reversed(range(model.n_layers)):
        x = inputs[i]
        w = model.weights[i]
        h, wd, _ = x.shape
        if i + 1 < model.n_layers:
            # d is the gradient after tanh of this layer's output
            y = _conv(x, w, model.biases[i])
            d = d * (1.0 - np.tanh(y) ** 2)
        p = _patches(x).reshape(h * wd, -1)
        dy = d.reshape(h * wd, -1)
        dwm = p.T @ dy
        grads.weights[i] += np.transpose(
            dwm.reshape(x.shape[2], 3, 3, w.shape[3]), (1, 2, 0, 3))
        grads.biases[i] += dy.sum(axis=0)
        if i > 0:
            wm = np.transpose(w, (2, 0, 1, 3)).reshape(-1, w.shape[3])
            dp = (dy @ wm.T).reshape(h, wd, x.shape[2], 3, 3)
            dx_pad = np.zeros((h + 2, wd + 2, x.shape[2]))
            for ky in range(3):
                for kx in range(3):
                    dx_pad[ky:ky + h, kx:kx + wd] += dp[:, :, :, ky, kx]
            d = dx_pad[1:-1, 1:-1]


def _round_pixel(px: Pixel, shape) -> tuple[int, int]:
    col, row = px.rounded()
    v = min(max(row, 0), shape[0] - 1)
    u = min(max(col, 0), shape[1] - 1)
    return v, u


def contrastive_loss(model: DescriptorModel, tuples, images: dict[str, PosedImage],
                     margin: float = 0.5, n_nonmatches: int = 4,
                     rng: np.random.Generator | None = None,
                     grads: ModelGradients | None = None) -> float:
    """Mean contrastive loss over a tuple batch; accumulates grads if given.

    Pixels are rounded to the nearest integer coordinate for descriptor
    lookup. Non-matches are drawn uniformly from the target image's mask
    (whole image when no mask), n_nonmatches per tuple; rng is required
    when n_nonmatches > 0.
    """
    if not tuples:
        raise ValueError("empty tuple batch")
    if n_nonmatches > 0 and rng is None:
        raise ValueError("non-match sampling needs an rng")
    needed = sorted({t.src_image_id for t in tuples} | {t.tgt_image_id for t in tuples})
    traces = {}
    for image_id in needed:
        if image_id not in images:
            raise KeyError(f"tuple references unknown image {image_id!r}")
        traces[image_id] = _forward_trace(model, images[image_id].pixels)
    d_desc = {image_id: np.zeros_like(traces[image_id][0]) for image_id in needed}

    mask_cache = {}

    def nonmatch_pool(image_id: str) -> np.ndarray:
        if image_id not in mask_cache:
            im = images[image_id]
            if im.mask is None:
                h, w = im.pixels.shape[:2]
                vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
                mask_cache[image_id] = np.stack([vv.ravel(), uu.ravel()], axis=1)
            else:
                mask_cache[image_id] = np.argwhere(im.mask)
        return mask_cache[image_id]

    n_terms = 0
    total = 0.0
    contributions = []  # (image_id, v, u, d_vector) applied after normalization
    for t in tuples:
        desc_s = traces[t.src_image_id][0]
        desc_t = traces[t.tgt_image_id][0]
        vs, us = _round_pixel(t.u_s, desc_s.shape)
        vt, ut = _round_pixel(t.u_t, desc_t.shape)
        ds = desc_s[vs, us]
        dt = desc_t[vt, ut]
        diff = ds - dt
        total += float(diff @ diff)
        n_terms += 1
        contributions.append((t.src_image_id, vs, us, 2.0 * diff))
        contributions.append((t.tgt_image_id, vt, ut, -2.0 * diff))
        pool = nonmatch_pool(t.tgt_image_id)
        for _ in range(n_nonmatches):
            row = pool[int(rng.integers(pool.shape[0]))]
            dn = desc_t[row[0], row[1]]
            delta = ds - dn
            dist = float(np.sqrt(delta @ delta))
            n_terms += 1
            if dist < margin:
                gap = margin - dist
                total += gap * gap
                if dist > _DIST_EPS:
                    g = (-2.0 * gap / dist) * delta
                    contributions.append((t.src_image_id, vs, us, g))
                    contributions.append((t.tgt_image_id, int(row[0]), int(row[1]), -g))
                # at dist == 0 the hinge has no usable direction; skip the gradient
    loss = total / n_terms
    if grads is not None:
        for image_id, v, u, g in contributions:
            d_desc[image_id][v, u] += g / n_terms
        for image_id in needed:
            _backward(model, traces[image_id][1], d_desc[image_id], grads)
    return loss


@dataclass
class DescTrainConfig:
    steps: int = 300
    batch_size: int = 128  # tuples per step
    learning_rate: float = 0.05
    momentum: float = 0.9
    margin: float = 0.5
    n_nonmatches: int = 4
    seed: int = 0
    channels: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or not (0 <= self.momentum < 1):
            raise ValueError("bad learning_rate/momentum")
        if self.margin < 0 or self.n_nonmatches < 0:
            raise ValueError("margin and n_nonmatches must be >= 0")


@dataclass
class DescTrainResult:
    model: DescriptorModel
    history: list = dc_field(default_factory=list)  # (step, loss)


def train_descriptors(tuples, images: list[PosedImage] | dict,
                      cfg: DescTrainConfig) -> DescTrainResult:
    """Seeded descriptor training; zero steps returns the initialization."""
    if not tuples:
        raise ValueError("no training tuples")
    if not isinstance(images, dict):
        images = {im.image_id: im for im in images}
    model = DescriptorModel.create(np.random.default_rng([cfg.seed, 101]), cfg.channels)
    vel = ModelGradients.zeros_like(model)
    history = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        pick = rng.integers(len(tuples), size=min(cfg.batch_size, len(tuples)))
        batch = [tuples[int(i)] for i in pick]
        grads = ModelGradients.zeros_like(model)
        loss = contrastive_loss(model, batch, images, cfg.margin,
                                cfg.n_nonmatches, rng, grads)
        history.append((step, loss))
        for i in range(model.n_layers):
            vel.weights[i] = cfg.momentum * vel.weights[i] + grads.weights[i]
            vel.biases[i] = cfg.momentum * vel.biases[i] + grads.biases[i]
            model.weights[i] -= cfg.learning_rate * vel.weights[i]
            model.biases[i] -= cfg.learning_rate * vel.biases[i]
    return DescTrainResult(model=model, history=history)


def match(desc_s: np.ndarray, u_s: Pixel, desc_t: np.ndarray,
          mask_t: np.ndarray | None = None) -> Pixel:
    """Nearest in-mask target pixel in descriptor space; row-major tie-break."""
    vs, us = _round_pixel(u_s, desc_s.shape)
    query = desc_s[vs, us]
    d2 = np.sum((desc_t - query) ** 2, axis=-1)
    if mask_t is not None:
        if not np.any(mask_t):
            raise ValueError("empty target mask")
        d2 = np.where(mask_t, d2, np.inf)
    idx = int(np.argmin(d2))  # first minimum in row-major order
    v, u = divmod(idx, d2.shape[1])
    return Pixel(float(u), float(v))


def visualize(desc: np.ndarray) -> np.ndarray:
    """Per-channel min-max normalization to an (H, W, 3) uint8 image."""
    d = np.asarray(desc, dtype=np.float64)
    chans = []
    for c in range(3):
        ch = d[..., min(c, d.shape[-1] - 1)]
        lo, hi = float(ch.min()), float(ch.max())
        if hi - lo < 1e-12:
            chans.append(np.zeros_like(ch))
        else:
            chans.append((ch - lo) / (hi - lo))
    rgb = np.stack(chans, axis=-1)
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def save_model(model: DescriptorModel, path):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", model.n_layers))
        for w, b in zip(model.weights, model.biases):
            fh.write(struct.pack("<II", w.shape[2], w.shape[3]))
            fh.write(w.astype("<f4").tobytes(order="C"))
            fh.write(b.astype("<f4").tobytes(order="C"))


def load_model(path) -> DescriptorModel:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a descriptor snapshot (magic {magic!r})")
        (n_layers,) = struct.unpack("<I", fh.read(4))
        weights, biases = [], []
        for _ in range(n_layers):
            cin, cout = struct.unpack("<II", fh.read(8))
            w = np.frombuffer(fh.read(4 * 9 * cin * cout), dtype="<f4")
            weights.append(w.astype(np.float64).reshape(3, 3, cin, cout))
            b = np.frombuffer(fh.read(4 * cout), dtype="<f4")
            biases.append(b.astype(np.float64))
        tail = fh.read(1)
    if tail:
        raise ValueError(f"{path}: trailing bytes in snapshot")
    return DescriptorModel(weights, biases)
