"""Conditional U-Net noise predictor.

Encoder residual blocks see only the noisy image and are modulated by the
timestep embedding. The bottleneck fuses metadata tokens through multi-head
cross-attention with a residual add. Decoder blocks take encoder skips and
normalize with SPADE driven by the 16-channel guidance map.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .condmaps import N_GUIDANCE
from .exceptions import ConfigError, DimensionError


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 3
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    heads: int = 8
    head_dim: int = 16
    text_embed_dim: int = 32
    max_text_tokens: int = 2
    guidance_channels: int = N_GUIDANCE
    groups: int = 8
    spade_hidden: int = 32
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        if self.base_channels % self.groups:
            raise ConfigError(f"base_channels {self.base_channels} not divisible by {self.groups} groups")
        if self.heads * self.head_dim != self.bottleneck_channels:
            raise ConfigError(
                f"heads*head_dim = {self.heads * self.head_dim} must equal the bottleneck width "
                f"{self.bottleneck_channels}")
        if self.spade_hidden < 1 or self.depth < 1:
            raise ConfigError("spade_hidden and depth must be positive")

    @property
    def depth(self):
        return len(self.channel_multipliers)

    @property
    def bottleneck_channels(self):
        return self.base_channels * self.channel_multipliers[-1]

    @property
    def time_embed_dim(self):
        return 4 * self.base_channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "channel_multipliers": tuple(d["channel_multipliers"])})


def embed_timestep(t, dim):
    """Sinusoidal embedding ``[sin(t*f), cos(t*f)]`` with f geometric from 1 to 1e-4.

    ``t`` may be a scalar (returns ``(dim,)``) or a 1-D array (returns ``(N, dim)``).
    """
    if dim % 2 or dim < 2:
        raise ConfigError(f"timestep embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def resize_nearest(g, size):
    """Nearest-neighbor resize of ``(..., H, W)`` to ``size = (h, w)``."""
    H, W = g.shape[-2:]
    h, w = size
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
    return g[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- attention


def _split_heads(x, heads):
    n, length, c = x.shape
    return ad.transpose(ad.reshape(x, (n, length, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    n, heads, length, d = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (n, length, heads * d))


def _batched(x):
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected (L, C) or (N, L, C), got {x.shape}")


def cross_attention(X, T, w_q, w_k, w_v, heads=1):
    """Per-head ``softmax(Q K^T / sqrt(d)) V`` with image queries and text keys/values.

    Args:
        X: image features ``(HW, C)`` or ``(N, HW, C)``.
        T: text tokens ``(L, D)`` or ``(N, L, D)``.
        w_q: ``(C, heads*d)``; w_k, w_v: ``(D, heads*d)``.

    Returns:
        Concatenated head outputs ``(..., HW, heads*d)`` before the output projection.
    """
    X, squeeze = _batched(X)
    T, _ = _batched(T)
    w_q, w_k, w_v = (ad.as_tensor(w) for w in (w_q, w_k, w_v))
    if X.shape[-1] != w_q.shape[0] or T.shape[-1] != w_k.shape[0] or T.shape[-1] != w_v.shape[0]:
        raise DimensionError(f"projection shapes {w_q.shape}, {w_k.shape}, {w_v.shape} do not fit "
                             f"features {X.shape} and tokens {T.shape}")
    inner = w_q.shape[1]
    if inner % heads or w_k.shape[1] != inner or w_v.shape[1] != inner:
        raise DimensionError(f"projection width {inner} not split evenly into {heads} heads")
    if T.shape[0] != X.shape[0]:
        if T.shape[0] != 1:
            raise DimensionError(f"batch sizes differ: features {X.shape}, tokens {T.shape}")
        T = ad.Tensor(np.broadcast_to(T.data, (X.shape[0],) + T.shape[1:]))
    d = inner // heads
    q = _split_heads(ad.matmul(X, w_q), heads)
    k = _split_heads(ad.matmul(T, w_k), heads)
    v = _split_heads(ad.matmul(T, w_v), heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    out = _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), v))
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def multi_head_cross_attention(X, T, w_q, w_k, w_v, w_o, b_o, heads=8):
    """``X + concat_heads(attention) @ w_o + b_o``."""
    attended = cross_attention(X, T, w_q, w_k, w_v, heads=heads)
    return ad.add(X, ad.linear(attended, w_o, b_o))


# ---------------------------------------------------------------- SPADE


def spade_modulate(x, guidance, shared_w, shared_b, gamma_w, gamma_b, beta_w, beta_b, groups, eps=1e-6):
    """``gamma(g) * group_norm(x) + beta(g)`` with g resized to x's resolution.

    gamma and beta are two-layer 3x3 convolution stacks over the guidance
    that share their first layer.
    """
    x = ad.as_tensor(x)
    g = guidance.data if isinstance(guidance, Tensor) else np.asarray(guidance, dtype=np.float64)
    if g.ndim != x.ndim or (x.ndim == 4 and g.shape[0] != x.shape[0]):
        raise DimensionError(f"guidance {g.shape} incompatible with features {x.shape}")
    if g.shape[-2:] != x.shape[-2:]:
        g = resize_nearest(g, x.shape[-2:])
    hidden = ad.relu(ad.conv2d(g, shared_w, shared_b, padding=shared_w.shape[-1] // 2))
    # both heads read the same hidden map: run them as one convolution
    c = gamma_w.shape[0]
    both = ad.conv2d(hidden, ad.concat([gamma_w, beta_w], axis=0), ad.concat([gamma_b, beta_b], axis=0),
                     padding=gamma_w.shape[-1] // 2)
    gamma, beta = ad.split(both, [c, c], axis=1 if both.ndim == 4 else 0)
    return ad.add(ad.mul(gamma, ad.group_norm(x, groups, eps)), beta)


# ---------------------------------------------------------------- parameters


def _conv_param(rng, cout, cin, k, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(cin * k * k), (cout, cin, k, k))


def _dense_param(rng, cin, cout, scale=1.0):
    return rng.normal(0.0, scale / np.sqrt(cin), (cin, cout))


def init_params(config, seed=0):
    """Freshly initialized parameter arrays, in a fixed order."""
    c = config
    rng = np.random.default_rng(seed)
    p = OrderedDict()
    base, E = c.base_channels, c.time_embed_dim

    def conv(name, cout, cin, k=3, scale=1.0):
        p[f"{name}.w"] = _conv_param(rng, cout, cin, k, scale)
        p[f"{name}.b"] = np.zeros(cout)

    def dense(name, cin, cout, scale=1.0, bias=0.0):
        p[f"{name}.w"] = _dense_param(rng, cin, cout, scale)
        p[f"{name}.b"] = np.full(cout, bias)

    def res(name, cin, cout):
        conv(f"{name}.conv1", cout, cin)
        dense(f"{name}.t_scale", E, cout, scale=0.1)
        dense(f"{name}.t_shift", E, cout, scale=0.1)
        conv(f"{name}.conv2", cout, cout, scale=0.1)
        if cin != cout:
            conv(f"{name}.skip", cout, cin, k=1)

    def spade(name, channels):
        conv(f"{name}.shared", c.spade_hidden, c.guidance_channels)
        conv(f"{name}.gamma", channels, c.spade_hidden, scale=0.1)
        p[f"{name}.gamma.b"] = np.ones(channels)
        conv(f"{name}.beta", channels, c.spade_hidden, scale=0.1)

    dense("time.fc1", base, E)
    dense("time.fc2", E, E)
    conv("conv_in", base, c.image_channels)
    widths = [base * m for m in c.channel_multipliers]
    ch = base
    for lvl, width in enumerate(widths):
        res(f"enc{lvl}", ch, width)
        ch = width
    res("mid", ch, ch)
    C, D = ch, c.text_embed_dim
    # bias-free projections, as in Q = X W_Q
    p["attn.q.w"] = _dense_param(rng, C, C)
    p["attn.k.w"] = _dense_param(rng, D, C)
    p["attn.v.w"] = _dense_param(rng, D, C)
    p["attn.o.w"] = _dense_param(rng, C, C, scale=0.1)
    p["attn.o.b"] = np.zeros(C)
    for lvl in reversed(range(c.depth)):
        cin = ch + widths[lvl]
        res(f"dec{lvl}", cin, widths[lvl])
        spade(f"dec{lvl}.spade", widths[lvl])
        ch = widths[lvl]
    conv("conv_out", c.image_channels, ch, scale=0.05)
    return p


class Denoiser:
    """The epsilon-prediction network.

    Parameters live in ``self.params`` (name -> leaf :class:`Tensor`).
    """

    def __init__(self, config=None, seed=0, params=None):
        self.config = config or DenoiserConfig()
        arrays = params if params is not None else init_params(self.config, seed)
        self.params = OrderedDict((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True))
                                  for k, v in arrays.items())

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise DimensionError(f"{k}: expected {self.params[k].shape}, got {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- blocks

    def _conv(self, x, name, padding=None):
        w = self.params[f"{name}.w"]
        return ad.conv2d(x, w, self.params[f"{name}.b"], padding=w.shape[-1] // 2 if padding is None else padding)

    def _dense(self, x, name):
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, x):
        return ad.group_norm(x, self.config.groups, self.config.norm_eps)

    def _time_modulate(self, h, temb, name):
        act = ad.silu(temb)
        return ad.scale_shift(h, self._dense(act, f"{name}.t_scale"), self._dense(act, f"{name}.t_shift"))

    def _res_block(self, x, temb, name, guidance=None):
        h = self._conv(ad.silu(self._norm(x)), f"{name}.conv1")
        if guidance is None:
            h = self._norm(h)
        else:
            pre = f"{name}.spade"
            P = self.params
            h = spade_modulate(h, guidance, P[f"{pre}.shared.w"], P[f"{pre}.shared.b"],
                               P[f"{pre}.gamma.w"], P[f"{pre}.gamma.b"], P[f"{pre}.beta.w"],
                               P[f"{pre}.beta.b"], self.config.groups, self.config.norm_eps)
        h = self._time_modulate(h, temb, name)
        h = self._conv(ad.silu(h), f"{name}.conv2")
        skip = self._conv(x, f"{name}.skip") if f"{name}.skip.w" in self.params else x
        return ad.add(h, skip)

    def _attention(self, h, text):
        n, c, hh, ww = h.shape
        X = ad.transpose(ad.reshape(h, (n, c, hh * ww)), (0, 2, 1))
        P = self.params
        Y = multi_head_cross_attention(X, text, P["attn.q.w"], P["attn.k.w"], P["attn.v.w"],
                                       P["attn.o.w"], P["attn.o.b"], heads=self.config.heads)
        return ad.reshape(ad.transpose(Y, (0, 2, 1)), (n, c, hh, ww))

    def forward(self, x_t, t, guidance, text):
        """Predict the noise in ``x_t``.

        Args:
            x_t: ``(3, H, W)`` or ``(N, 3, H, W)`` noisy image.
            t: int timestep or ``(N,)`` array.
            guidance: ``(16, H, W)`` or ``(N, 16, H, W)``.
            text: ``(L, D)`` or ``(N, L, D)`` metadata tokens.

        Returns:
            Tensor shaped like ``x_t``.
        """
        c = self.config
        x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        g = np.asarray(guidance.data if isinstance(guidance, Tensor) else guidance, dtype=np.float64)
        if g.ndim == 3:
            g = g[None]
        tokens = np.asarray(text.data if isinstance(text, Tensor) else text, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        n, ch, H, W = x.shape
        if ch != c.image_channels or g.shape[1] != c.guidance_channels or g.shape[-2:] != (H, W):
            raise DimensionError(f"input {x.shape} / guidance {g.shape} do not match {c}")
        if tokens.shape[-1] != c.text_embed_dim:
            raise DimensionError(f"text tokens {tokens.shape} do not have width {c.text_embed_dim}")
        if g.shape[0] != n:
            g = np.broadcast_to(g, (n,) + g.shape[1:])
        if tokens.shape[0] != n:
            tokens = np.broadcast_to(tokens, (n,) + tokens.shape[1:])
        f = 2 ** (c.depth - 1)
        if H % f or W % f:
            raise ConfigError(f"resolution {H}x{W} not divisible by {f} for depth {c.depth}")
        t = np.broadcast_to(np.asarray(t), (n,))

        temb = ad.Tensor(embed_timestep(t, c.base_channels))
        temb = self._dense(ad.silu(self._dense(temb, "time.fc1")), "time.fc2")
        h = self._conv(x, "conv_in")
        skips = []
        for lvl in range(c.depth):
            h = self._res_block(h, temb, f"enc{lvl}")
            skips.append(h)
            if lvl < c.depth - 1:
                h = ad.avg_pool2d(h, 2)
        h = self._res_block(h, temb, "mid")
        h = self._attention(h, tokens)
        for lvl in reversed(range(c.depth)):
            h = ad.concat([h, skips[lvl]], axis=1)
            h = self._res_block(h, temb, f"dec{lvl}", guidance=g)
            if lvl > 0:
                h = ad.upsample_nearest(h, 2)
        # no normalization in the head: it would strip the per-channel spatial mean
        # the noise estimate needs at high t, where the image survives only as an offset
        out = self._conv(ad.silu(h), "conv_out")
        return ad.reshape(out, out.shape[1:]) if single else out

    __call__ = forward

    def predict(self, x_t, t, guidance, text):
        with ad.no_grad():
            return self.forward(x_t, t, guidance, text).data
