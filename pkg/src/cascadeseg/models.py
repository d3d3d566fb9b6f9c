"""Stage-1 and stage-2 cascade networks, a dry shape trace, and checkpoint I/O.

Checkpoint container (little-endian)::

    magic      4 bytes  b"CSCK"
    version    u16      CHECKPOINT_VERSION
    header_len u32      byte length of the JSON header
    header     utf-8 JSON {"config", "meta", "tensors": [{"name", "shape", "offset"}]}
    payload    float32 blobs, concatenated in header order; offsets are in bytes
               from the start of the payload
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .blocks import (
    AttentionGateParams,
    ConvParams,
    ParamGroup,
    ResBlockParams,
    VaeHeadParams,
    attention_gate,
    downsample,
    res_block_forward,
    upsample_block,
    vae_head,
)
from .rng import substream
from .tensor import ConvSpec, Tensor, add, conv3d, dropout, no_grad, sigmoid

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    in_channels: int = 4
    base_filters: int = 32
    levels: int = 4
    encoder_blocks: Tuple[int, ...] = (1, 2, 2, 4)
    latent_dim: int = 128
    input_dims: Tuple[int, int, int] = (160, 192, 128)
    dropout_rate: float = 0.2
    use_attention_gates: bool = False
    out_channels: int = 3
    vae_channels: Optional[int] = None  # defaults to in_channels
    vae_reduce_channels: int = 16
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_blocks = tuple(self.encoder_blocks)
        self.input_dims = tuple(self.input_dims)

    @property
    def endpoint_channels(self):
        return self.base_filters * 2 ** (self.levels - 1)

    @property
    def endpoint_dims(self):
        f = 2 ** (self.levels - 1)
        return tuple(d // f for d in self.input_dims)

    @property
    def reconstruction_channels(self):
        return self.vae_channels if self.vae_channels is not None else self.in_channels

    def violations(self):
        out = []
        if self.in_channels < 1:
            out.append("in_channels must be >= 1")
        if self.base_filters < 1:
            out.append("base_filters must be >= 1")
        if self.levels < 2:
            out.append("levels must be >= 2")
        if len(self.encoder_blocks) != self.levels:
            out.append(f"encoder_blocks has {len(self.encoder_blocks)} entries for {self.levels} levels")
        if any(b < 1 for b in self.encoder_blocks):
            out.append("every level needs at least one encoder block")
        if self.latent_dim < 1:
            out.append("latent_dim must be >= 1")
        if len(self.input_dims) != 3:
            out.append("input_dims must have 3 extents")
        else:
            # the VAE head needs an even endpoint for its stride-2 reduction
            f = 2 ** self.levels
            for axis, d in zip("DHW", self.input_dims):
                if d < f or d % f:
                    out.append(f"input extent {axis}={d} not divisible by 2^levels={f}")
        if not 0 <= self.dropout_rate < 1:
            out.append("dropout_rate must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            out.append(f"dtype {self.dtype!r} is not float32/float64")
        return out

    def validate(self):
        problems = self.violations()
        if problems:
            raise ValueError("invalid NetworkConfig: " + "; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["encoder_blocks"] = list(self.encoder_blocks)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class NetworkParams(ParamGroup):
    init_conv: ConvParams
    encoder: List[List[ResBlockParams]]
    downs: List[ConvParams]
    ups: List[ConvParams]
    decoder: List[ResBlockParams]
    gates: List[AttentionGateParams]
    out: ConvParams
    vae: VaeHeadParams

    def named_tensors(self, prefix=""):
        yield from self.init_conv.named_tensors("init_conv.")
        for lvl, blocks in enumerate(self.encoder):
            for i, b in enumerate(blocks):
                yield from b.named_tensors(f"encoder.{lvl}.{i}.")
        for i, p in enumerate(self.downs):
            yield from p.named_tensors(f"downs.{i}.")
        for i, p in enumerate(self.ups):
            yield from p.named_tensors(f"ups.{i}.")
        for i, p in enumerate(self.decoder):
            yield from p.named_tensors(f"decoder.{i}.")
        for i, p in enumerate(self.gates):
            yield from p.named_tensors(f"gates.{i}.")
        yield from self.out.named_tensors("out.")
        yield from self.vae.named_tensors("vae.")


class Network:
    """A stage-1 or stage-2 network: config plus named parameter tensors."""

    def __init__(self, config: NetworkConfig, params: NetworkParams):
        self.config = config
        self.params = params

    @property
    def stage(self):
        return 2 if self.config.use_attention_gates else 1

    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self.params.named_tensors())

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        named = self.named_parameters()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, t in named.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(t.dtype).copy()


def _build(config: NetworkConfig, seed):
    config.validate()
    rng = substream(seed, "init")
    dt = np.dtype(config.dtype)
    f = config.base_filters
    init_conv = ConvParams.init(rng, config.in_channels, f, 3, dt)
    encoder, downs = [], []
    for lvl, nblocks in enumerate(config.encoder_blocks):
        c = f * 2 ** lvl
        encoder.append([ResBlockParams.init(rng, c, dt) for _ in range(nblocks)])
        if lvl < config.levels - 1:
            downs.append(ConvParams.init(rng, c, 2 * c, 3, dt))
    ups, decoder, gates = [], [], []
    for lvl in range(config.levels - 2, -1, -1):
        c = f * 2 ** lvl
        ups.append(ConvParams.init(rng, 2 * c, c, 1, dt))
        if config.use_attention_gates:
            gates.append(AttentionGateParams.init(rng, c, dt))
        decoder.append(ResBlockParams.init(rng, c, dt))
    out = ConvParams.init(rng, f, config.out_channels, 1, dt, gain=1e-2)
    vae = VaeHeadParams.init(
        rng, config.endpoint_channels, config.endpoint_dims, config.levels,
        config.reconstruction_channels, config.latent_dim, config.vae_reduce_channels, dt,
    )
    return Network(config, NetworkParams(init_conv, encoder, downs, ups, decoder, gates, out, vae))


def build_stage1(config: NetworkConfig, seed=0) -> Network:
    if config.use_attention_gates:
        raise ValueError("invalid NetworkConfig: stage 1 has no attention gates (use_attention_gates=false)")
    return _build(config, seed)


def build_stage2(config: NetworkConfig, seed=0) -> Network:
    if not config.use_attention_gates:
        raise ValueError("invalid NetworkConfig: stage 2 requires use_attention_gates=true")
    return _build(config, seed)


def build_network(config: NetworkConfig, seed=0) -> Network:
    return build_stage2(config, seed) if config.use_attention_gates else build_stage1(config, seed)


@dataclass
class StageOutput:
    probabilities: Tensor
    reconstruction: Optional[Tensor] = None
    mu: Optional[Tensor] = None
    sigma: Optional[Tensor] = None
    attention_maps: List[Tensor] = field(default_factory=list)
    endpoint: Optional[Tensor] = None


def forward(network: Network, x, training=False, rng=None) -> StageOutput:
    """Run the network on ``x`` (N,C,D,H,W).

    Training mode applies dropout and runs the VAE branch with sampling (both
    drawing from ``rng``); inference skips the VAE branch and uses no
    randomness. Attention maps are always collected for stage 2.
    """
    cfg = network.config
    p = network.params
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"forward: expected (N,{cfg.in_channels},D,H,W) input, got {x.shape}")
    f = 2 ** (cfg.levels - 1)
    for axis, d in zip("DHW", x.shape[2:]):
        if d % f:
            raise ValueError(f"forward: axis {axis} extent {d} not divisible by {f}")
    if training and rng is None:
        raise ValueError("forward: training mode needs an rng")

    h = conv3d(x, p.init_conv.w, p.init_conv.b, stride=1, padding=1)
    h = dropout(h, cfg.dropout_rate, training, rng)
    skips = []
    for lvl, blocks in enumerate(p.encoder):
        for b in blocks:
            h = res_block_forward(h, b)
        if lvl < cfg.levels - 1:
            skips.append(h)
            h = downsample(h, p.downs[lvl])
    endpoint = h
    maps = []
    for i, (up, block) in enumerate(zip(p.ups, p.decoder)):
        skip = skips[cfg.levels - 2 - i]
        if cfg.use_attention_gates:
            skip, alpha = attention_gate(skip, h, p.gates[i])
            maps.append(alpha)
        h = res_block_forward(add(upsample_block(h, up), skip), block)
    probs = sigmoid(conv3d(h, p.out.w, p.out.b))
    out = StageOutput(probs, attention_maps=maps, endpoint=endpoint)
    if training:
        out.reconstruction, out.mu, out.sigma = vae_head(endpoint, p.vae, rng, sample=True)
    return out


def predict(network: Network, image: np.ndarray) -> np.ndarray:
    """Inference on one (C,D,H,W) array; returns (3,D,H,W) probabilities."""
    with no_grad():
        x = Tensor(np.asarray(image, dtype=network.config.dtype)[None])
        return forward(network, x, training=False).probabilities.data[0]


def predict_padded(network: Network, image):
    """``predict`` on extents that need not be multiples of the network stride (edge padding)."""
    f = 2 ** (network.config.levels - 1)
    dims = image.shape[1:]
    pad = [(-d) % f for d in dims]
    if any(pad):
        image = np.pad(image, [(0, 0)] + [(0, p) for p in pad], mode="edge")
    probs = predict(network, image)
    return probs[(slice(None),) + tuple(slice(0, d) for d in dims)]


def trace_shapes(network: Network, input_shape) -> Dict[str, tuple]:
    """Propagate shapes through the network using only parameter shapes.

    Mirrors :func:`forward` layer by layer without allocating activations, so
    full-scale contracts can be checked on a desk machine.
    """
    p = network.params
    cfg = network.config
    n, c, *dims = input_shape
    trace = {"input": tuple(input_shape)}

    def conv(shape, w, stride, pad):
        n_, c_, *d = shape
        if c_ != w.shape[1]:
            raise ValueError(f"trace: {c_} channels into weight {w.shape}")
        spec = ConvSpec(w.shape[1], w.shape[0], w.shape[2:], stride, pad)
        return (n_, w.shape[0]) + spec.output_dims(d)

    def up2(shape):
        return shape[:2] + tuple(2 * d for d in shape[2:])

    def res(shape, b):
        s = conv(shape, b.conv1_w, 1, 1)
        s = conv(s, b.conv2_w, 1, 1)
        if s != shape:
            raise ValueError(f"trace: residual block changes shape {shape} -> {s}")
        return s

    s = conv(tuple(input_shape), p.init_conv.w, 1, 1)
    skips = []
    for lvl, blocks in enumerate(p.encoder):
        for b in blocks:
            s = res(s, b)
        trace[f"encoder.{lvl}"] = s
        if lvl < cfg.levels - 1:
            skips.append(s)
            s = conv(s, p.downs[lvl].w, 2, 1)
    trace["endpoint"] = s
    endpoint = s
    for i, (up, block) in enumerate(zip(p.ups, p.decoder)):
        skip = skips[cfg.levels - 2 - i]
        if cfg.use_attention_gates:
            g = p.gates[i]
            tx = conv(skip, g.w_x, 2, 0)
            tg = conv(s, g.w_g, 1, 0)
            if tx != tg:
                raise ValueError(f"trace: gate paths disagree {tx} vs {tg}")
            trace[f"attention.{i}"] = up2(conv(tx, g.w_int, 1, 0))
        u = up2(conv(s, up.w, 1, 0))
        if u != skip:
            raise ValueError(f"trace: upsampled {u} does not match skip {skip}")
        s = res(u, block)
        trace[f"decoder.{i}"] = s
    trace["probabilities"] = conv(s, p.out.w, 1, 0)
    v = p.vae
    r = conv(endpoint, v.reduce.w, 2, 1)
    trace["vae.reduced"] = r
    if int(np.prod(r[1:])) != v.fc_enc.w.shape[1]:
        raise ValueError(f"trace: reduced endpoint {r} does not feed fc of width {v.fc_enc.w.shape[1]}")
    trace["vae.latent"] = (n, v.latent_dim)
    h = up2(conv(r, v.expand.w, 1, 0))
    for up, block in zip(v.ups, v.blocks):
        h = res(up2(conv(h, up.w, 1, 0)), block)
    trace["reconstruction"] = conv(h, v.out.w, 1, 0)
    return trace


# ---------------------------------------------------------------------------
# checkpoints


def _pack(named: Dict[str, np.ndarray], config: dict, meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, arr in named.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(path, network: Network, meta=None, extra_tensors=None):
    """Write parameters (and optional extra named arrays, e.g. optimizer moments)."""
    named = network.state_dict()
    for k, v in (extra_tensors or {}).items():
        named[k] = v
    data = _pack(named, network.config.to_dict(), dict(meta or {}))
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path):
    """Return ``(config_dict, meta, arrays)`` from a checkpoint file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10:10 + hlen])
    payload = memoryview(raw)[10 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header["config"], header["meta"], arrays


def load_checkpoint(path, expect_stage=None):
    """Rebuild a network from a checkpoint; returns ``(network, meta, extra_arrays)``."""
    cfg_dict, meta, arrays = read_checkpoint(path)
    config = NetworkConfig.from_dict(cfg_dict)
    net = build_network(config, seed=0)
    if expect_stage is not None and net.stage != expect_stage:
        raise ValueError(f"{path}: checkpoint is a stage-{net.stage} network, expected stage {expect_stage}")
    names = set(net.named_parameters())
    net.load_state_dict({k: v for k, v in arrays.items() if k in names})
    extra = {k: v for k, v in arrays.items() if k not in names}
    return net, meta, extra
