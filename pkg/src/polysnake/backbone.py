"""Encoder-decoder feature network with residual blocks and a per-pixel MLP head.

Forward and backward passes are written out by hand in numpy. Activations are
channel-last ``(H, W, C)`` arrays in the requested precision, one image per call.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .priors import PriorMaps
from .ssvm import MapGrads


@dataclass(frozen=True)
class ArchConfig:
    encoder_levels: int = 5
    decoder_levels: int = 4
    base_channels: int = 16
    input_size: int = 128
    output_size: int | None = None  # defaults to input_size
    max_channels: int = 128
    mlp_hidden: tuple[int, int] = (256, 64)
    output_scale: float = 1.0  # fixed multiplier on all four output maps

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(x) for x in self.mlp_hidden))
        if self.output_size is None:
            object.__setattr__(self, "output_size", self.input_size)
        if self.encoder_levels < 2:
            raise ValueError("encoder_levels must be >= 2")
        if not 1 <= self.decoder_levels <= self.encoder_levels - 1:
            raise ValueError("decoder_levels must lie in [1, encoder_levels - 1]")
        if self.input_size % 2 ** (self.encoder_levels - 1):
            raise ValueError(
                f"input_size {self.input_size} is not divisible by 2^{self.encoder_levels - 1}")
        if self.base_channels < 1 or self.output_size < 1:
            raise ValueError("channel and output sizes must be positive")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")

    @classmethod
    def desk(cls) -> ArchConfig:
        # narrow enough for 15 CPU epochs on 200 images; the small output scale keeps
        # the initial maps gentle so early snakes do not collapse
        return cls(base_channels=4, input_size=128, output_scale=0.01)

    @classmethod
    def full_scale(cls) -> ArchConfig:
        return cls(base_channels=16, input_size=512, output_size=256)

    @classmethod
    def tiny(cls) -> ArchConfig:
        return cls(encoder_levels=2, decoder_levels=1, base_channels=4, input_size=16)

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ArchConfig:
        return cls(**d)


def param_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Ordered tensor manifest for ``cfg``."""
    shapes = {}

    def conv(name, cin, cout):
        shapes[f"{name}.w"] = (9 * cin, cout)
        shapes[f"{name}.b"] = (cout,)

    cin = 3
    for i in range(cfg.encoder_levels):
        c = cfg.channels(i)
        conv(f"enc{i}.conv", cin, c)
        conv(f"enc{i}.res1", c, c)
        conv(f"enc{i}.res2", c, c)
        cin = c
    head_in = 0
    for k in range(cfg.decoder_levels):
        c = cfg.channels(cfg.encoder_levels - 2 - k)
        conv(f"dec{k}.conv", cin, c)
        conv(f"dec{k}.res1", 2 * c, 2 * c)
        conv(f"dec{k}.res2", 2 * c, 2 * c)
        cin = 2 * c
        head_in += 2 * c
    h1, h2 = cfg.mlp_hidden
    shapes["head.w1"] = (head_in, h1)
    shapes["head.b1"] = (h1,)
    shapes["head.w2"] = (h1, h2)
    shapes["head.b2"] = (h2,)
    shapes["head.w3"] = (h2, 4)
    shapes["head.b3"] = (4,)
    return shapes


def fan_in(name: str, shape: tuple[int, ...], cfg: ArchConfig) -> int:
    if name.endswith(".b"):
        return param_shapes(cfg)[name[:-2] + ".w"][0]
    if name.startswith("head.b"):
        return param_shapes(cfg)["head.w" + name[-1]][0]
    return shape[0]


class BackboneParams:
    """Named weight tensors plus the architecture they belong to."""

    def __init__(self, arch: ArchConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(arch)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ValueError(f"tensor names do not match architecture (missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(tensors[name])):
                raise ValueError(f"tensor {name} contains non-finite values")
        self.arch = arch
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> BackboneParams:
        return BackboneParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(v, v) for v in self.tensors.values())))

    def num_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def apply_(self, step: dict[str, np.ndarray]) -> None:
        """In-place ``w -= step[w]``; invalidates earlier forward caches."""
        for k, v in step.items():
            self.tensors[k] -= v
        self.version += 1

    def equal(self, other: BackboneParams) -> bool:
        return self.arch == other.arch and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(cfg: ArchConfig, seed: int = 0) -> BackboneParams:
    """He-uniform weights and ``U(+-1/sqrt(fan_in))`` biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        fi = fan_in(name, shape, cfg)
        is_bias = len(shape) == 1
        bound = 1 / np.sqrt(fi) if is_bias else np.sqrt(6.0 / fi)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return BackboneParams(cfg, tensors)


def init_std_target(name: str, shape: tuple[int, ...], cfg: ArchConfig) -> float:
    fi = fan_in(name, shape, cfg)
    if len(shape) == 1:
        return 1 / np.sqrt(3 * fi)
    return np.sqrt(2.0 / fi)


# ---------------------------------------------------------------- primitives

def _windows(x):
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    return sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, C, 3, 3)


def conv_forward(x, w, b):
    """3x3 same-padded convolution; ``w`` rows are ordered (ky, kx, c_in)."""
    c = x.shape[2]
    k = w.reshape(3, 3, c, -1)
    return np.tensordot(_windows(x), k, axes=([3, 4, 2], [0, 1, 2])) + b


def conv_backward(x, w, dout):
    c = x.shape[2]
    cout = dout.shape[2]
    dw = np.tensordot(_windows(x), dout, axes=([0, 1], [0, 1]))  # (C, 3, 3, Cout)
    dw = dw.transpose(1, 2, 0, 3).reshape(9 * c, cout)
    db = dout.sum(axis=(0, 1))
    flipped = w.reshape(3, 3, c, cout)[::-1, ::-1].transpose(0, 1, 3, 2)
    dx = np.tensordot(_windows(dout), flipped, axes=([3, 4, 2], [0, 1, 2]))
    return dx, dw, db


def maxpool_forward(x):
    """2x2 max-pool; ties resolve to the first element in row-major window order."""
    h, w, c = x.shape
    win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, arg


def maxpool_backward(arg, dout):
    h2, w2, c = dout.shape
    dwin = np.zeros((h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=3)
    return dwin.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * h2, 2 * w2, c)


def _repeat2d(x, f):
    h, w, c = x.shape
    return np.broadcast_to(x[:, None, :, None], (h, f, w, f, c)).reshape(h * f, w * f, c)


def upsample2(x):
    return _repeat2d(x, 2)


def upsample2_backward(dout):
    h, w, c = dout.shape
    return dout.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


def resize_nearest(x, size):
    h = x.shape[0]
    if size == h:
        return x
    if size % h == 0:
        return _repeat2d(x, size // h)
    idx = (np.arange(size) * h) // size
    return x[idx][:, idx]


def resize_nearest_backward(dout, h):
    size = dout.shape[0]
    if size == h:
        return dout
    if size % h == 0:
        f = size // h
        return dout.reshape(h, f, h, f, -1).sum(axis=(1, 3))
    idx = (np.arange(size) * h) // size
    rows = np.zeros((h, size, dout.shape[2]), dtype=dout.dtype)
    np.add.at(rows, idx, dout)
    out = np.zeros((h, h, dout.shape[2]), dtype=dout.dtype)
    np.add.at(out, (slice(None), idx), rows)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- network

class ForwardCache:
    """Everything :func:`backward` needs from one :func:`forward` call."""

    def __init__(self, params: BackboneParams, weights: dict, dtype):
        self.params_id = id(params)
        self.version = params.version
        self.arch = params.arch
        self.weights = weights
        self.dtype = dtype
        self.enc = []
        self.dec = []
        self.head = None
        self.raw = None

    def pattern(self) -> list[np.ndarray]:
        """ReLU on/off states and max-pool winners; piecewise-linear regions share a pattern."""
        out = []
        for step in self.enc:
            if step[0] == "pool":
                out.append(step[1])
            elif step[0] == "conv":
                out.append(step[3] > 0)
            else:
                out.append(step[1][2] > 0)
        for _, z, _, block in self.dec:
            out.append(z > 0)
            out.append(block[2] > 0)
        _, a1, z2, _ = self.head
        out.extend([a1 > 0, z2 > 0])
        return out


def _resblock(w, name, x, saved):
    z1 = conv_forward(x, w[f"{name}.res1.w"], w[f"{name}.res1.b"])
    a1 = np.maximum(z1, 0)
    r = conv_forward(a1, w[f"{name}.res2.w"], w[f"{name}.res2.b"])
    saved.append((name, x, z1, a1))
    return x + r


def _resblock_backward(w, grads, saved, dout):
    name, x, z1, a1 = saved
    da1, grads[f"{name}.res2.w"], grads[f"{name}.res2.b"] = conv_backward(a1, w[f"{name}.res2.w"], dout)
    dz1 = da1 * (z1 > 0)
    dx, grads[f"{name}.res1.w"], grads[f"{name}.res1.b"] = conv_backward(x, w[f"{name}.res1.w"], dz1)
    return dx + dout


def forward(params: BackboneParams, image: np.ndarray, dtype=np.float64) -> tuple[PriorMaps, ForwardCache]:
    """Predict the four prior maps for one ``(S, S, 3)`` image.

    ``dtype`` selects the arithmetic precision; the returned maps are float64
    either way.
    """
    cfg = params.arch
    image = np.asarray(image)
    if image.shape != (cfg.input_size, cfg.input_size, 3):
        raise ValueError(f"image shape {image.shape} does not match "
                         f"({cfg.input_size}, {cfg.input_size}, 3)")
    w = {k: v.astype(dtype, copy=False) for k, v in params.items()}
    cache = ForwardCache(params, w, dtype)
    x = image.astype(dtype)
    skips = []
    for i in range(cfg.encoder_levels):
        if i > 0:
            x, arg = maxpool_forward(x)
            cache.enc.append(("pool", arg))
        z = conv_forward(x, w[f"enc{i}.conv.w"], w[f"enc{i}.conv.b"])
        cache.enc.append(("conv", f"enc{i}.conv", x, z))
        x = np.maximum(z, 0)
        saved = []
        x = _resblock(w, f"enc{i}", x, saved)
        cache.enc.append(("res", saved[0]))
        skips.append(x)

    outs = []
    for k in range(cfg.decoder_levels):
        skip = skips[cfg.encoder_levels - 2 - k]
        up = upsample2(x)
        z = conv_forward(up, w[f"dec{k}.conv.w"], w[f"dec{k}.conv.b"])
        a = np.maximum(z, 0)
        saved = []
        x = _resblock(w, f"dec{k}", np.concatenate([a, skip], axis=2), saved)
        cache.dec.append((up, z, a.shape[2], saved[0]))
        outs.append(x)

    # The first head layer is per-pixel linear and so commutes with the
    # nearest-neighbour resize: project each level at its own resolution and
    # accumulate coarse to fine. Levels double in size, and nearest resizes
    # through integer factors compose exactly.
    size = cfg.output_size
    acc = None
    row = 0
    for f in outs:
        c = f.shape[2]
        proj = f @ w["head.w1"][row:row + c]
        acc = proj if acc is None else resize_nearest(acc, f.shape[0]) + proj
        row += c
    # acc and its resize are fresh temporaries, so the wide layer can work in place
    z1 = resize_nearest(acc, size)
    z1 += w["head.b1"]
    a1 = np.maximum(z1, 0, out=z1)
    z2 = a1 @ w["head.w2"] + w["head.b2"]
    a2 = np.maximum(z2, 0)
    z3 = (a2 @ w["head.w3"] + w["head.b3"]).astype(np.float64)
    cache.head = (outs, a1, z2, a2)
    if not np.all(np.isfinite(z3)):
        raise FloatingPointError("backbone produced non-finite maps (diverged weights or overflow)")
    cache.raw = z3
    k = cfg.output_scale
    maps = PriorMaps(k * z3[..., 0], k * softplus(z3[..., 1]), k * softplus(z3[..., 2]), k * z3[..., 3])
    return maps, cache


def backward(params: BackboneParams, cache: ForwardCache, map_grads: MapGrads) -> dict[str, np.ndarray]:
    """Gradient of ``sum_m <map_grads_m, map_m>`` with respect to every tensor (float64)."""
    if cache.params_id != id(params) or cache.version != params.version or cache.arch != params.arch:
        raise ValueError("forward cache does not belong to these parameters (stale or mismatched)")
    cfg = params.arch
    w = cache.weights
    z3 = cache.raw
    if map_grads.g_d.shape != z3.shape[:2]:
        raise ValueError(f"map gradients have shape {map_grads.g_d.shape}, expected {z3.shape[:2]}")
    grads = {}
    dz3 = np.stack([map_grads.g_d,
                    map_grads.g_alpha * sigmoid(z3[..., 1]),
                    map_grads.g_beta * sigmoid(z3[..., 2]),
                    map_grads.g_kappa], axis=2) * cfg.output_scale
    dz3 = dz3.astype(cache.dtype)
    outs, a1, z2, a2 = cache.head
    grads["head.w3"] = a2.reshape(-1, a2.shape[2]).T @ dz3.reshape(-1, 4)
    grads["head.b3"] = dz3.sum(axis=(0, 1))
    dz2 = (dz3 @ w["head.w3"].T) * (z2 > 0)
    grads["head.w2"] = a1.reshape(-1, a1.shape[2]).T @ dz2.reshape(-1, dz2.shape[2])
    grads["head.b2"] = dz2.sum(axis=(0, 1))
    dz1 = dz2 @ w["head.w2"].T
    dz1 *= a1 > 0
    grads["head.b1"] = dz1.sum(axis=(0, 1))
    dw1 = []
    douts = []
    row = w["head.w1"].shape[0]
    dp = resize_nearest_backward(dz1, outs[-1].shape[0])
    for f in reversed(outs):
        if dp.shape[0] != f.shape[0]:
            dp = resize_nearest_backward(dp, f.shape[0])
        c = f.shape[2]
        row -= c
        dw1.append(f.reshape(-1, c).T @ dp.reshape(-1, dp.shape[2]))
        douts.append(dp @ w["head.w1"][row:row + c].T)
    grads["head.w1"] = np.concatenate(dw1[::-1], axis=0)
    douts.reverse()

    dx = None
    skip_grads = {}
    for k in reversed(range(cfg.decoder_levels)):
        up, z, ca, block = cache.dec[k]
        dcur = douts[k] if dx is None else douts[k] + dx
        dcat = _resblock_backward(w, grads, block, dcur)
        skip_grads[cfg.encoder_levels - 2 - k] = dcat[..., ca:]
        dup, grads[f"dec{k}.conv.w"], grads[f"dec{k}.conv.b"] = conv_backward(
            up, w[f"dec{k}.conv.w"], dcat[..., :ca] * (z > 0))
        dx = upsample2_backward(dup)

    level = cfg.encoder_levels - 1
    for step in reversed(cache.enc):
        if step[0] == "res":
            if level in skip_grads:
                dx = dx + skip_grads[level]
            dx = _resblock_backward(w, grads, step[1], dx)
        elif step[0] == "conv":
            _, name, x_in, z = step
            dx, grads[f"{name}.w"], grads[f"{name}.b"] = conv_backward(x_in, w[f"{name}.w"], dx * (z > 0))
        else:
            dx = maxpool_backward(step[1], dx)
            level -= 1
    return {name: grads[name].astype(np.float64) for name in params}
