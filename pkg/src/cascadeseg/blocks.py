"""Composite network blocks: residual block, resampling, attention gate, VAE head."""

from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import numpy as np

from .tensor import (
    Tensor,
    add,
    conv3d,
    default_groups,
    exp,
    fully_connected,
    group_norm,
    hadamard,
    mul,
    relu,
    reshape,
    sigmoid,
    trilinear_upsample,
)


def he_weight(rng, shape, dtype, gain=2.0):
    """Fan-in scaled normal weights; gain 2 for convs fed by a ReLU, 1 for linear inputs, 1e-2 for output heads (near-neutral start)."""
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class ParamGroup:
    """Dataclass mixin enumerating its Tensor fields (recursing into nested groups and lists)."""

    def named_tensors(self, prefix=""):
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParamGroup):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_tensors(f"{name}.{i}.")


# ---------------------------------------------------------------------------
# residual block


@dataclass
class ResBlockParams(ParamGroup):
    gn1_gamma: Tensor
    gn1_beta: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    gn2_gamma: Tensor
    gn2_beta: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    @property
    def channels(self):
        return self.conv1_w.shape[0]

    @classmethod
    def init(cls, rng, channels, dtype=np.float32):
        shape = (channels, channels, 3, 3, 3)
        return cls(
            ones((channels,), dtype), zeros((channels,), dtype), he_weight(rng, shape, dtype), zeros((channels,), dtype),
            ones((channels,), dtype), zeros((channels,), dtype), he_weight(rng, shape, dtype), zeros((channels,), dtype),
        )


def res_block_forward(x, params: ResBlockParams, eps=1e-5):
    """x + f(x) with f = (GroupNorm -> ReLU -> 3x3x3 conv) applied twice."""
    c = params.channels
    if x.shape[1] != c or params.conv1_w.shape[1] != c or params.conv2_w.shape != (c, c, 3, 3, 3):
        raise ValueError(f"res_block_forward: input has {x.shape[1]} channels, block expects {c}")
    groups = default_groups(c)
    h = relu(group_norm(x, groups, params.gn1_gamma, params.gn1_beta, eps))
    h = conv3d(h, params.conv1_w, params.conv1_b, stride=1, padding=1)
    h = relu(group_norm(h, groups, params.gn2_gamma, params.gn2_beta, eps))
    h = conv3d(h, params.conv2_w, params.conv2_b, stride=1, padding=1)
    return add(x, h)


# ---------------------------------------------------------------------------
# resampling


@dataclass
class ConvParams(ParamGroup):
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, cin, cout, kernel, dtype=np.float32, gain=1.0):
        return cls(he_weight(rng, (cout, cin) + (kernel,) * 3, dtype, gain), zeros((cout,), dtype))


def downsample(x, params: ConvParams):
    """Stride-2 3x3x3 conv halving each spatial extent and doubling channels."""
    for axis, n in zip("DHW", x.shape[2:]):
        if n % 2:
            raise ValueError(f"downsample: axis {axis} has odd extent {n}")
    if params.w.shape[0] != 2 * x.shape[1]:
        raise ValueError(f"downsample: weight produces {params.w.shape[0]} channels, expected {2 * x.shape[1]}")
    return conv3d(x, params.w, params.b, stride=2, padding=1)


def upsample_block(x, params: ConvParams):
    """1x1x1 conv halving channels, then trilinear x2."""
    if x.shape[1] % 2:
        raise ValueError(f"upsample_block: odd channel count {x.shape[1]}")
    if params.w.shape[:2] != (x.shape[1] // 2, x.shape[1]):
        raise ValueError(f"upsample_block: weight {params.w.shape} does not halve {x.shape[1]} channels")
    return trilinear_upsample(conv3d(x, params.w, params.b, stride=1, padding=0))


# ---------------------------------------------------------------------------
# attention gate


@dataclass
class AttentionGateParams(ParamGroup):
    w_x: Tensor     # (F_int, F_l, 1, 1, 1), applied with stride 2, no bias
    w_g: Tensor     # (F_int, 2 F_l, 1, 1, 1)
    b_g: Tensor     # (F_int,)
    w_int: Tensor   # (1, F_int, 1, 1, 1)
    b_int: Tensor   # (1,)

    @classmethod
    def init(cls, rng, features, dtype=np.float32):
        f_int = max(features // 2, 1)
        return cls(
            he_weight(rng, (f_int, features, 1, 1, 1), dtype, 1.0),
            he_weight(rng, (f_int, 2 * features, 1, 1, 1), dtype, 1.0),
            zeros((f_int,), dtype),
            he_weight(rng, (1, f_int, 1, 1, 1), dtype),
            zeros((1,), dtype),
        )


def attention_gate(x, g, params: AttentionGateParams):
    """Gate skip features ``x`` with a coarser gating signal ``g``.

    Returns ``(x_hat, alpha)`` where alpha is (N,1,D,H,W) in (0, 1) and
    x_hat = alpha * x broadcast over channels.
    """
    if x.ndim != 5 or g.ndim != 5:
        raise ValueError("attention_gate: x and g must be 5-D")
    for axis, nx, ng in zip("DHW", x.shape[2:], g.shape[2:]):
        if nx != 2 * ng:
            raise ValueError(f"attention_gate: axis {axis} ratio x:g is {nx}:{ng}, expected 2:1")
    tx = conv3d(x, params.w_x, None, stride=2, padding=0)
    tg = conv3d(g, params.w_g, params.b_g, stride=1, padding=0)
    q = conv3d(relu(add(tx, tg)), params.w_int, params.b_int, stride=1, padding=0)
    alpha = trilinear_upsample(sigmoid(q))
    return hadamard(alpha, x), alpha


# ---------------------------------------------------------------------------
# VAE head


@dataclass
class VaeHeadParams(ParamGroup):
    gn_gamma: Tensor
    gn_beta: Tensor
    reduce: ConvParams        # 3x3x3 stride 2, endpoint channels -> reduce_channels
    fc_enc: ConvParams        # (2 latent, reduce_channels * prod(reduced dims))
    fc_dec: ConvParams        # (reduce_channels * prod(reduced dims), latent)
    expand: ConvParams        # 1x1x1, reduce_channels -> endpoint channels
    ups: List[ConvParams]
    blocks: List[ResBlockParams]
    out: ConvParams           # 1x1x1, base filters -> reconstructed channels
    reduced_dims: Tuple[int, int, int] = (1, 1, 1)

    @property
    def latent_dim(self):
        return self.fc_dec.w.shape[1]

    @classmethod
    def init(cls, rng, endpoint_channels, endpoint_dims, levels, out_channels, latent_dim,
             reduce_channels=16, dtype=np.float32):
        reduced = tuple((n - 1) // 2 + 1 for n in endpoint_dims)
        flat = reduce_channels * int(np.prod(reduced))
        ups, blocks = [], []
        c = endpoint_channels
        for _ in range(levels - 1):
            ups.append(ConvParams.init(rng, c, c // 2, 1, dtype))
            c //= 2
            blocks.append(ResBlockParams.init(rng, c, dtype))
        return cls(
            ones((endpoint_channels,), dtype),
            zeros((endpoint_channels,), dtype),
            ConvParams.init(rng, endpoint_channels, reduce_channels, 3, dtype, gain=2.0),
            ConvParams(he_weight(rng, (2 * latent_dim, flat), dtype, 1.0), zeros((2 * latent_dim,), dtype)),
            ConvParams(he_weight(rng, (flat, latent_dim), dtype), zeros((flat,), dtype)),
            ConvParams.init(rng, reduce_channels, endpoint_channels, 1, dtype, gain=2.0),
            ups,
            blocks,
            ConvParams.init(rng, c, out_channels, 1, dtype, gain=1e-2),
            reduced,
        )


def vae_head(endpoint, params: VaeHeadParams, rng=None, sample=True, eps=1e-5):
    """Encode the encoder endpoint to a Gaussian latent and decode a reconstruction.

    Returns ``(reconstruction, mu, sigma)``; mu and sigma have shape (N, latent).
    With ``sample=False`` the latent is the mean.
    """
    n, c = endpoint.shape[:2]
    for axis, d in zip("DHW", endpoint.shape[2:]):
        if d % 2:
            raise ValueError(f"vae_head: endpoint axis {axis} extent {d} must be even")
    h = relu(group_norm(endpoint, default_groups(c), params.gn_gamma, params.gn_beta, eps))
    h = conv3d(h, params.reduce.w, params.reduce.b, stride=2, padding=1)
    red_shape = h.shape[1:]
    stats = fully_connected(reshape(h, (n, -1)), params.fc_enc.w, params.fc_enc.b)
    latent = params.latent_dim
    mu = stats[:, :latent]
    sigma = exp(mul(stats[:, latent:], 0.5))
    if sample:
        noise = rng.standard_normal(mu.shape).astype(mu.dtype)
        z = add(mu, mul(sigma, noise))
    else:
        z = mu
    h = relu(fully_connected(z, params.fc_dec.w, params.fc_dec.b))
    h = reshape(h, (n,) + red_shape)
    h = trilinear_upsample(conv3d(h, params.expand.w, params.expand.b))
    for up, block in zip(params.ups, params.blocks):
        h = res_block_forward(upsample_block(h, up), block, eps)
    recon = conv3d(h, params.out.w, params.out.b)
    return recon, mu, sigma
