"""Neural building blocks: MLPs, Fourier/adaptive-scale conditioning, group
normalization, periodic convolutions, multi-head attention, depth-to-space,
and a small encoder-attention-decoder field denoiser ("mini UViT").

Models are pure functions of a flat parameter vector whose layout is fixed
by a descriptor; ``ParamLayout`` documents the layout field by field and is
serialized into checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

# ---------------------------------------------------------------------------
# parameter layout


class ParamLayout:
    """Ordered (name, shape, init) fields mapped into one flat vector."""

    def __init__(self):
        self.fields = []  # (name, shape, offset, init_spec)
        self.total = 0
        self._index = {}

    def add(self, name, shape, init=("zeros",)):
        if name in self._index:
            raise ValueError(f"duplicate parameter field {name!r}")
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        self._index[name] = len(self.fields)
        self.fields.append((name, shape, self.total, init))
        self.total += n

    def slice(self, params, name):
        """Differentiable view of one field, reshaped to its declared shape."""
        _, shape, offset, _ = self.fields[self._index[name]]
        n = int(np.prod(shape)) if shape else 1
        return T.reshape(params[offset : offset + n], shape)

    def describe(self):
        return [
            {"name": n, "shape": list(s), "offset": o, "init": list(i)}
            for n, s, o, i in self.fields
        ]

    def init_params(self, rng, dtype=np.float64):
        """Draw a fresh parameter vector; field order fixes the draw order."""
        out = np.zeros(self.total, dtype=dtype)
        for name, shape, offset, init in self.fields:
            n = int(np.prod(shape)) if shape else 1
            kind = init[0]
            if kind == "zeros":
                vals = np.zeros(n, dtype=dtype)
            elif kind == "ones":
                vals = np.ones(n, dtype=dtype)
            elif kind == "kaiming":
                fan_in = init[1]
                vals = rng.normal((n,), dtype=dtype) * math.sqrt(2.0 / fan_in)
            elif kind == "lecun":
                fan_in = init[1]
                vals = rng.normal((n,), dtype=dtype) * math.sqrt(1.0 / fan_in)
            elif kind == "normal":
                vals = rng.normal((n,), dtype=dtype) * init[1]
            else:
                raise ValueError(f"unknown init spec {init!r}")
            out[offset : offset + n] = vals
        return out


# ---------------------------------------------------------------------------
# MLP


_LAYOUT_CACHE = {}


def _cached_layout(desc, build):
    lay = _LAYOUT_CACHE.get(desc)
    if lay is None:
        lay = build()
        _LAYOUT_CACHE[desc] = lay
    return lay


@dataclass(frozen=True)
class MlpDescriptor:
    """widths = (in, hidden..., out); weights then biases, in layer order."""

    widths: tuple
    activation: str = "relu"

    def layout(self):
        return _cached_layout(self, self._build_layout)

    def _build_layout(self):
        lay = ParamLayout()
        for i in range(len(self.widths) - 1):
            fan_in = self.widths[i]
            lay.add(f"layer{i}.w", (self.widths[i], self.widths[i + 1]), ("kaiming", fan_in))
            lay.add(f"layer{i}.b", (self.widths[i + 1],))
        return lay


_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu}


def mlp_forward(params, desc, x):
    """Affine-activation stack; activation on all but the last layer."""
    x = as_tensor(x)
    if x.shape[-1] != desc.widths[0]:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match descriptor {desc.widths[0]}"
        )
    act = _ACTIVATIONS[desc.activation]
    lay = desc.layout()
    h = x
    n_layers = len(desc.widths) - 1
    for i in range(n_layers):
        h = T.matmul(h, lay.slice(params, f"layer{i}.w")) + lay.slice(params, f"layer{i}.b")
        if i < n_layers - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# Fourier embedding and adaptive-scale conditioning


def geometric_frequencies(d_f, lo=1.0, hi=1000.0):
    """Fixed geometric frequency grid used by the Fourier embeddings."""
    return np.geomspace(lo, hi, d_f)


def fourier_embed(x, frequencies):
    """[sin(2 pi B x), cos(2 pi B x)]: (B,) -> (B, 2 d_f), sin block first."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = T.reshape(x, (x.shape[0], 1))
    ang = x * Tensor(2.0 * np.pi * np.asarray(frequencies))
    return T.concat([T.sin(ang), T.cos(ang)], axis=-1)


@dataclass(frozen=True)
class ConditionEmbedDescriptor:
    """Noise-level + lead-time conditioning trunk.

    Both scalars get independent Fourier embeddings (the noise level enters
    as log(sigma)/4), which are concatenated and passed through a two-layer
    GeLU MLP; the output splits into scale a and shift b of width C0.
    """

    fourier_dim: int = 32
    width: int = 32  # C0

    def layout(self):
        return _cached_layout(self, self._build_layout)

    def _build_layout(self):
        lay = ParamLayout()
        d = 4 * self.fourier_dim  # two embeddings, each 2*d_f
        lay.add("cond.w1", (d, self.width), ("kaiming", d))
        lay.add("cond.b1", (self.width,))
        lay.add("cond.w2", (self.width, 2 * self.width), ("lecun", self.width))
        lay.add("cond.b2", (2 * self.width,))
        return lay


def _condition_hidden(params, lay, desc, sigma, lead_time):
    sig = np.asarray(as_tensor(sigma).data, dtype=np.float64)
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    freqs = geometric_frequencies(desc.fourier_dim)
    noise_channel = Tensor(0.25 * np.log(np.atleast_1d(sig)))
    lead = as_tensor(lead_time)
    lead = Tensor(np.atleast_1d(lead.data))
    if lead.shape[0] == 1 and noise_channel.shape[0] > 1:
        lead = Tensor(np.broadcast_to(lead.data, noise_channel.shape).copy())
    if noise_channel.shape[0] == 1 and lead.shape[0] > 1:
        noise_channel = Tensor(
            np.broadcast_to(noise_channel.data, lead.shape).copy()
        )
    emb = T.concat(
        [fourier_embed(noise_channel, freqs), fourier_embed(lead, freqs)], axis=-1
    )
    h = T.gelu(T.matmul(emb, lay.slice(params, "cond.w1")) + lay.slice(params, "cond.b1"))
    return T.matmul(h, lay.slice(params, "cond.w2")) + lay.slice(params, "cond.b2")


def condition_embed(params, desc, sigma, lead_time):
    """Scale/shift conditioning: returns (a, b), each of width C0."""
    lay = desc.layout()
    out = _condition_hidden(params, lay, desc, sigma, lead_time)
    c0 = desc.width
    return out[:, :c0], out[:, c0:]


# ---------------------------------------------------------------------------
# group normalization and adaptive scale


def group_norm(x, num_groups, gamma, beta, eps=1e-6):
    """Normalize per (sample, group) over spatial extent and in-group channels.

    x: (N, ..., C) channels last; gamma, beta: (C,).
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if c % num_groups != 0:
        raise ValueError(f"channels {c} not divisible by {num_groups} groups")
    n = x.shape[0]
    spatial = int(np.prod(x.shape[1:-1])) if x.ndim > 2 else 1
    cg = c // num_groups
    xg = T.reshape(x, (n, spatial, num_groups, cg))
    mu = T.tmean(xg, axis=(1, 3), keepdims=True)
    centered = xg - mu
    var = T.tmean(centered * centered, axis=(1, 3), keepdims=True)
    xhat = centered / T.sqrt(var + eps)
    out = T.reshape(xhat, x.shape)
    return out * as_tensor(gamma) + as_tensor(beta)


def adaptive_scale(x, a, b, num_groups, eps=1e-6):
    """(a + 1) * GN(x) + b with unit gamma and zero beta inside the GN.

    a, b: (C,) shared, or (N, C) per sample (broadcast over spatial dims).
    """
    x = as_tensor(x)
    a, b = as_tensor(a), as_tensor(b)
    c = x.shape[-1]
    if a.shape[-1] != c or b.shape[-1] != c:
        raise ValueError(f"conditioning width {a.shape[-1]} != channel count {c}")
    gn = group_norm(x, num_groups, np.ones(c, dtype=x.dtype), np.zeros(c, dtype=x.dtype), eps)
    if a.ndim == 2 and x.ndim > 2:
        expand = (a.shape[0],) + (1,) * (x.ndim - 2) + (c,)
        a = T.reshape(a, expand)
        b = T.reshape(b, expand)
    return (a + 1.0) * gn + b


def gn_groups(channels, preferred=32):
    """Largest group count <= preferred that divides the channel count."""
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


# ---------------------------------------------------------------------------
# depth-to-space


def depth_to_space(x):
    """(..., h, w, 4c) -> (..., 2h, 2w, c) pixel shuffle.

    Channel m = (dy*2 + dx)*c + cc maps to spatial offset (dy, dx), output
    channel cc.  Exactly inverted by :func:`space_to_depth`.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    n, h, w, c4 = x.shape
    if c4 % 4 != 0:
        raise ValueError(f"channel count {c4} not divisible by 4")
    c = c4 // 4
    y = T.reshape(x, (n, h, w, 2, 2, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (n, 2 * h, 2 * w, c))
    return T.reshape(y, y.shape[1:]) if squeeze else y


def space_to_depth(x):
    """Inverse of :func:`depth_to_space`."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    n, h2, w2, c = x.shape
    if h2 % 2 != 0 or w2 % 2 != 0:
        raise ValueError("spatial extents must be even")
    h, w = h2 // 2, w2 // 2
    y = T.reshape(x, (n, h, 2, w, 2, c))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (n, h, w, 4 * c))
    return T.reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# multi-head attention


def attention_layout(lay, prefix, tokens, channels):
    lay.add(f"{prefix}.pos", (tokens, channels), ("normal", 0.02))
    lay.add(f"{prefix}.gn_gamma", (channels,), ("ones",))
    lay.add(f"{prefix}.gn_beta", (channels,))
    for nm in ("wq", "wk", "wv", "wo"):
        lay.add(f"{prefix}.{nm}", (channels, channels), ("lecun", channels))


def multi_head_attention(params, lay, prefix, x, heads):
    """Residual attention block: x + MHA(GN(x) + pos)."""
    x = as_tensor(x)
    n, s, c = x.shape
    if c % heads != 0:
        raise ValueError(f"token dim {c} not divisible by {heads} heads")
    dk = c // heads
    z = group_norm(
        x,
        gn_groups(c),
        lay.slice(params, f"{prefix}.gn_gamma"),
        lay.slice(params, f"{prefix}.gn_beta"),
    )
    z = z + lay.slice(params, f"{prefix}.pos")

    def split_heads(t):
        return T.transpose(T.reshape(t, (n, s, heads, dk)), (0, 2, 1, 3))

    q = split_heads(T.matmul(z, lay.slice(params, f"{prefix}.wq")))
    k = split_heads(T.matmul(z, lay.slice(params, f"{prefix}.wk")))
    v = split_heads(T.matmul(z, lay.slice(params, f"{prefix}.wv")))
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    weights = T.softmax(logits, axis=-1)
    mixed = T.matmul(weights, v)  # (n, heads, s, dk)
    mixed = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (n, s, c))
    return x + T.matmul(mixed, lay.slice(params, f"{prefix}.wo"))


# ---------------------------------------------------------------------------
# mini UViT field denoiser


@dataclass(frozen=True)
class MiniUvitDescriptor:
    """Encoder / bottleneck-attention / decoder field network.

    The spatial grid is square with extent ``grid`` (fixed at construction
    because the bottleneck positional embedding is learned) and must be
    divisible by 2**levels.  Channel widths double per level starting from
    ``base_width``.
    """

    state_channels: int
    cond_channels: int
    grid: int
    base_width: int = 32
    levels: int = 2
    res_blocks: int = 1
    heads: int = 4
    fourier_dim: int = 32

    def widths(self):
        return [self.base_width * (1 << l) for l in range(self.levels + 1)]

    def to_json(self):
        return {
            "kind": "mini_uvit",
            "state_channels": self.state_channels,
            "cond_channels": self.cond_channels,
            "grid": self.grid,
            "base_width": self.base_width,
            "levels": self.levels,
            "res_blocks": self.res_blocks,
            "heads": self.heads,
            "fourier_dim": self.fourier_dim,
        }

    @classmethod
    def from_json(cls, d):
        d = {k: v for k, v in d.items() if k != "kind"}
        return cls(**d)

    def layout(self):
        return _cached_layout(self, self._build_layout)

    def _build_layout(self):
        if self.grid % (1 << self.levels) != 0:
            raise ValueError(
                f"grid {self.grid} not divisible by 2^levels = {1 << self.levels}"
            )
        lay = ParamLayout()
        ws = self.widths()
        c0 = self.base_width
        d = 4 * self.fourier_dim
        lay.add("cond.w1", (d, c0), ("kaiming", d))
        lay.add("cond.b1", (c0,))
        lay.add("cond.w2", (c0, 2 * c0), ("lecun", c0))
        lay.add("cond.b2", (2 * c0,))
        cin = self.state_channels + self.cond_channels
        lay.add("stem.w", (3, 3, cin, c0), ("kaiming", 9 * cin))
        lay.add("stem.b", (c0,))

        def res_block(prefix, c):
            lay.add(f"{prefix}.gn1_gamma", (c,), ("ones",))
            lay.add(f"{prefix}.gn1_beta", (c,))
            lay.add(f"{prefix}.conv1.w", (3, 3, c, c), ("kaiming", 9 * c))
            lay.add(f"{prefix}.conv1.b", (c,))
            lay.add(f"{prefix}.cond.w", (2 * c0, 2 * c), ("lecun", 2 * c0))
            lay.add(f"{prefix}.cond.b", (2 * c,))
            lay.add(f"{prefix}.conv2.w", (3, 3, c, c), ("kaiming", 9 * c))
            lay.add(f"{prefix}.conv2.b", (c,))

        for l in range(1, self.levels + 1):
            lay.add(f"enc{l}.down.w", (3, 3, ws[l - 1], ws[l]), ("kaiming", 9 * ws[l - 1]))
            lay.add(f"enc{l}.down.b", (ws[l],))
            for r in range(self.res_blocks):
                res_block(f"enc{l}.res{r}", ws[l])
        cb = ws[self.levels]
        tokens = (self.grid >> self.levels) ** 2
        attention_layout(lay, "mid.attn", tokens, cb)
        for l in range(self.levels, 0, -1):
            lay.add(f"dec{l}.up.w", (1, 1, ws[l], 4 * ws[l - 1]), ("lecun", ws[l]))
            lay.add(f"dec{l}.up.b", (4 * ws[l - 1],))
            lay.add(
                f"dec{l}.fuse.w",
                (3, 3, 2 * ws[l - 1], ws[l - 1]),
                ("kaiming", 18 * ws[l - 1]),
            )
            lay.add(f"dec{l}.fuse.b", (ws[l - 1],))
            for r in range(self.res_blocks):
                res_block(f"dec{l}.res{r}", ws[l - 1])
        lay.add("head.gn_gamma", (c0,), ("ones",))
        lay.add("head.gn_beta", (c0,))
        lay.add("head.w", (3, 3, c0, self.state_channels))
        lay.add("head.b", (self.state_channels,))
        return lay


def _conv(params, lay, prefix, x, stride=1):
    return T.conv2d(x, lay.slice(params, f"{prefix}.w"), stride) + lay.slice(
        params, f"{prefix}.b"
    )


def _res_block(params, lay, prefix, x, cond_hidden):
    c = x.shape[-1]
    g = gn_groups(c)
    h = group_norm(
        x,
        g,
        lay.slice(params, f"{prefix}.gn1_gamma"),
        lay.slice(params, f"{prefix}.gn1_beta"),
    )
    h = _conv(params, lay, f"{prefix}.conv1", T.gelu(h))
    ab = T.matmul(cond_hidden, lay.slice(params, f"{prefix}.cond.w")) + lay.slice(
        params, f"{prefix}.cond.b"
    )
    a, b = ab[:, :c], ab[:, c:]
    h = _conv(params, lay, f"{prefix}.conv2", T.gelu(adaptive_scale(h, a, b, g)))
    return x + h


def mini_uvit_forward(params, desc, u_noisy, u_cond, sigma, lead_time):
    """Raw field network F(c_in*(u+eta), cond; c_noise, lead.

    u_noisy: (N, H, W, state_channels); u_cond: (N, H, W, cond_channels);
    sigma: scalar or (N,); lead_time: scalar or (N,).  Output has the shape
    of ``u_noisy``.
    """
    u_noisy, u_cond = as_tensor(u_noisy), as_tensor(u_cond)
    if u_noisy.ndim != 4 or u_cond.ndim != 4:
        raise ValueError("fields must be batched (N, H, W, C)")
    if u_noisy.shape[:3] != u_cond.shape[:3]:
        raise ValueError(
            f"grid mismatch: state {u_noisy.shape[:3]} vs condition {u_cond.shape[:3]}"
        )
    n, h, w, _ = u_noisy.shape
    if h != desc.grid or w != desc.grid:
        raise ValueError(f"expected {desc.grid}^2 grid, got {h}x{w}")
    lay = desc.layout()
    ws = desc.widths()

    cond_desc = ConditionEmbedDescriptor(desc.fourier_dim, desc.base_width)
    emb = _condition_hidden(params, lay, cond_desc, sigma, lead_time)
    if emb.shape[0] == 1 and n > 1:
        emb = T.reshape(T.concat([emb] * n, axis=0), (n, emb.shape[1]))

    x = _conv(params, lay, "stem", T.concat([u_noisy, u_cond], axis=-1))
    skips = [x]
    for l in range(1, desc.levels + 1):
        x = _conv(params, lay, f"enc{l}.down", x, stride=2)
        for r in range(desc.res_blocks):
            x = _res_block(params, lay, f"enc{l}.res{r}", x, emb)
        skips.append(x)

    hb = desc.grid >> desc.levels
    cb = ws[desc.levels]
    x = T.reshape(x, (n, hb * hb, cb))
    x = multi_head_attention(params, lay, "mid.attn", x, desc.heads)
    x = T.reshape(x, (n, hb, hb, cb))

    for l in range(desc.levels, 0, -1):
        x = depth_to_space(_conv(params, lay, f"dec{l}.up", x))
        x = T.concat([x, skips[l - 1]], axis=-1)
        x = _conv(params, lay, f"dec{l}.fuse", x)
        for r in range(desc.res_blocks):
            x = _res_block(params, lay, f"dec{l}.res{r}", x, emb)

    x = group_norm(
        x,
        gn_groups(desc.base_width),
        lay.slice(params, "head.gn_gamma"),
        lay.slice(params, "head.gn_beta"),
    )
    return _conv(params, lay, "head", T.gelu(x))


# ---------------------------------------------------------------------------
# deterministic baselines (MSE-trained regressors)


class MlpRegressor:
    """Plain dense regressor; the deterministic baseline for the toy maps."""

    kind = "mlp_regressor"

    def __init__(self, in_dim, out_dim, width=256, hidden_layers=2, activation="relu"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.width = width
        self.hidden_layers = hidden_layers
        self.activation = activation
        self.desc = MlpDescriptor(
            (in_dim,) + (width,) * hidden_layers + (out_dim,), activation
        )
        self.state_shape = (out_dim,)
        self.cond_shape = (in_dim,)

    def layout(self):
        return self.desc.layout()

    def init_params(self, rng, dtype=np.float64):
        return self.layout().init_params(rng, dtype)

    def predict(self, params, x, lead_time=None):
        return mlp_forward(params, self.desc, x)

    def to_json(self):
        return {
            "kind": self.kind,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "width": self.width,
            "hidden_layers": self.hidden_layers,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, d):
        return cls(**{k: v for k, v in d.items() if k != "kind"})


class UvitRegressor:
    """Deterministic field surrogate reusing the mini-UViT architecture.

    The noisy-state input is held at zero and the noise channel at 1, so the
    network maps (condition, lead time) -> state.
    """

    kind = "uvit_regressor"

    def __init__(self, desc):
        self.desc = desc
        self.state_shape = (desc.grid, desc.grid, desc.state_channels)
        self.cond_shape = (desc.grid, desc.grid, desc.cond_channels)

    def layout(self):
        return self.desc.layout()

    def init_params(self, rng, dtype=np.float64):
        return self.layout().init_params(rng, dtype)

    def predict(self, params, cond, lead_time=0.0):
        cond = as_tensor(cond)
        zeros = Tensor(
            np.zeros(cond.shape[:3] + (self.desc.state_channels,), dtype=cond.dtype)
        )
        return mini_uvit_forward(params, self.desc, zeros, cond, 1.0, lead_time)

    def to_json(self):
        return {"kind": self.kind, "uvit": self.desc.to_json()}

    @classmethod
    def from_json(cls, d):
        return cls(MiniUvitDescriptor.from_json(d["uvit"]))


def regression_loss(model, params, batch, rng=None):
    """Mean-squared-error loss for the deterministic baselines."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    pred = model.predict(params, as_tensor(batch.cond), batch.lead)
    resid = pred - as_tensor(batch.target)
    n = int(np.prod(resid.shape))
    return (resid * resid).sum() * (1.0 / n)
