"""Losses, Adam with polynomial decay, the training loop and stage-2 dataset expansion."""

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import (
    AugmentParams,
    apply_augmentation,
    draw_augment_params,
    encode_labels,
    normalize,
    random_crop,
    tumor_centered_crop,
)
from .models import Network, forward, load_checkpoint, predict_padded, save_checkpoint
from .rng import substream
from .tensor import Tensor, log, mul, square, sub, tsum


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossConfig:
    w_l2: float = 0.1
    w_kl: float = 0.1
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.w_l2 < 0 or self.w_kl < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.dice_epsilon <= 0:
            raise ValueError("dice_epsilon must be positive")


def _as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def soft_dice_loss(pred, true, eps=1e-5):
    """Mean over region channels of 1 - (2 sum(p t) + eps) / (sum(p^2) + sum(t^2) + eps).

    The channel axis is 1 for batched (N,C,...) input and 0 otherwise.
    """
    pred = _as_tensor(pred)
    true = np.asarray(true, dtype=pred.dtype)
    if pred.shape != true.shape:
        raise ValueError(f"soft_dice_loss: prediction {pred.shape} vs target {true.shape}")
    ch = 1 if pred.ndim == 5 else 0
    axes = tuple(i for i in range(pred.ndim) if i != ch)
    inter = tsum(mul(pred, true), axes)
    den = tsum(square(pred), axes) + (true * true).sum(axis=axes) + eps
    ratio = (mul(inter, 2.0) + eps) / den
    n = pred.shape[ch]
    return mul(tsum(sub(1.0, ratio)), 1.0 / n)


def l2_loss(pred, target):
    """Sum (not mean) of squared differences."""
    pred = _as_tensor(pred)
    target = _as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss: shapes {pred.shape} and {target.shape} differ")
    return tsum(square(sub(pred, target)))


def kl_loss(mu, sigma, n_voxels):
    """(1/N) sum(mu^2 + sigma^2 - log sigma^2 - 1)."""
    mu, sigma = _as_tensor(mu), _as_tensor(sigma)
    if n_voxels <= 0:
        raise ValueError(f"kl_loss: voxel count must be positive, got {n_voxels}")
    if np.any(sigma.data <= 0):
        raise ValueError("kl_loss: sigma must be strictly positive")
    s2 = square(sigma)
    return mul(tsum(square(mu) + s2 - log(s2) - 1.0), 1.0 / n_voxels)


def combine_losses(dice, l2, kl, cfg: LossConfig):
    return dice + cfg.w_l2 * l2 + cfg.w_kl * kl


def total_loss(outputs, target, image, cfg: Optional[LossConfig] = None):
    """Weighted sum of soft Dice, reconstruction L2 and KL terms.

    ``target`` is the (N,3,D,H,W) region stack, ``image`` the network input the
    VAE branch reconstructs. Returns ``(loss, components)`` with float
    components for logging.
    """
    cfg = cfg or LossConfig()
    if outputs.reconstruction is None:
        raise ValueError("total_loss needs training-mode outputs (VAE branch disabled)")
    image = np.asarray(image.data if isinstance(image, Tensor) else image)
    n_voxels = int(np.prod(image.shape[2:]))
    dice = soft_dice_loss(outputs.probabilities, target, cfg.dice_epsilon)
    l2 = l2_loss(outputs.reconstruction, image)
    kl = kl_loss(outputs.mu, outputs.sigma, n_voxels)
    loss = dice + mul(l2, cfg.w_l2) + mul(kl, cfg.w_kl)
    return loss, {"dice": dice.item(), "l2": l2.item(), "kl": kl.item(), "total": loss.item()}


# ---------------------------------------------------------------------------
# schedule and optimizer


def poly_lr(epoch, lr0, n_epochs, power=0.9):
    if not 0 <= epoch <= n_epochs:
        raise ValueError(f"poly_lr: epoch {epoch} outside [0, {n_epochs}]")
    return lr0 * (1 - epoch / n_epochs) ** power


@dataclass
class OptimState:
    lr0: float = 1e-4
    n_epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: OptimState, lr):
    """One bias-corrected Adam update in place; missing gradients count as zero."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, network: Network, lr0=1e-4, n_epochs=300, betas=(0.9, 0.999), eps=1e-8):
        self.network = network
        self.state = OptimState(lr0, n_epochs, betas[0], betas[1], eps)

    def lr(self, epoch):
        return poly_lr(epoch, self.state.lr0, self.state.n_epochs)

    def step(self, epoch):
        named = self.network.named_parameters()
        adam_step(named, {k: t.grad for k, t in named.items()}, self.state, self.lr(epoch))

    def state_tensors(self):
        out = {}
        for k in self.state.m:
            out[f"adam.m/{k}"] = self.state.m[k]
            out[f"adam.v/{k}"] = self.state.v[k]
        return out

    def load_state_tensors(self, arrays, step):
        self.state.step = int(step)
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam.m":
                self.state.m[name] = arr.astype(np.float32).copy()
            elif kind == "adam.v":
                self.state.v[name] = arr.astype(np.float32).copy()


# ---------------------------------------------------------------------------
# samples and training loop


@dataclass
class TrainSample:
    image: np.ndarray          # (C,D,H,W) normalized network input
    target: np.ndarray         # (3,D,H,W) region stack
    patient_id: str
    source_model: Optional[str] = None

    def __post_init__(self):
        if self.image.shape[1:] != self.target.shape[1:]:
            raise ValueError(f"sample {self.patient_id}: image dims {self.image.shape[1:]} vs target {self.target.shape[1:]}")
        t = self.target.astype(bool)
        if np.any(t[2] & ~t[1]) or np.any(t[1] & ~t[0]):
            raise ValueError(f"sample {self.patient_id}: target regions are not nested")


def stage1_samples(cases) -> List[TrainSample]:
    return [
        TrainSample(normalize(c.image.data), encode_labels(c.labels).stack(np.uint8), c.case_id)
        for c in cases
    ]


@dataclass
class TrainConfig:
    epochs: int = 300
    lr0: float = 1e-4
    batch_size: int = 1
    crop_dims: Optional[tuple] = None
    augment: bool = True
    intensity_channels: Optional[tuple] = None   # channels receiving shift/scale; None = all
    checkpoint_epochs: tuple = ()
    loss: LossConfig = field(default_factory=LossConfig)


def _prepare(sample: TrainSample, cfg: TrainConfig, rng):
    image, target = sample.image, sample.target
    if cfg.crop_dims is not None and tuple(cfg.crop_dims) != image.shape[1:]:
        image, target, _ = random_crop(image, target, tuple(cfg.crop_dims), rng)
    if cfg.augment:
        params = draw_augment_params(rng, image.shape[0])
        if cfg.intensity_channels is not None:
            keep = np.ones(image.shape[0], bool)
            keep[list(cfg.intensity_channels)] = False
            params.shift[keep] = 0.0
            params.scale[keep] = 1.0
        image, target = apply_augmentation(image, target, params)
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(target)


def train_stage(
    network: Network,
    samples: Sequence[TrainSample],
    cfg: TrainConfig,
    seed=0,
    out_dir=None,
    model_id="model",
    log_path=None,
    resume_from=None,
    hooks: Sequence[Callable] = (),
):
    """Train ``network`` in place; returns ``(checkpoint_paths, history)``.

    Each epoch visits the samples in a seeded shuffle; augmentation, dropout
    and VAE sampling draw from per-(epoch, step) streams so a resumed run
    reproduces the uninterrupted trajectory. ``history`` holds one record per
    epoch with the mean loss components.
    """
    if not samples:
        raise ValueError("train_stage: empty dataset")
    opt = Adam(network, cfg.lr0, cfg.epochs)
    start = 0
    if resume_from is not None:
        net_loaded, meta, extra = load_checkpoint(resume_from)
        network.load_state_dict(net_loaded.state_dict())
        opt.load_state_tensors(extra, meta["adam_step"])
        start = int(meta["epoch"])
    dtype = np.dtype(network.config.dtype)
    paths, history = [], []
    step = opt.state.step
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = opt.lr(epoch)
        order = substream(seed, "shuffle", epoch).permutation(len(samples))
        sums = {"dice": 0.0, "l2": 0.0, "kl": 0.0, "total": 0.0}
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for bi, batch in enumerate(batches):
            prepared = [_prepare(samples[j], cfg, substream(seed, "augment", epoch, bi * cfg.batch_size + k))
                        for k, j in enumerate(batch)]
            x = np.stack([p[0] for p in prepared]).astype(dtype)
            y = np.stack([p[1] for p in prepared]).astype(dtype)
            out = forward(network, Tensor(x), training=True, rng=substream(seed, "step", epoch, bi))
            loss, comps = total_loss(out, y, x, cfg.loss)
            if not math.isfinite(comps["total"]):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step}: {comps}; "
                    f"samples {[samples[j].patient_id for j in batch]}"
                )
            network.zero_grad()
            loss.backward()
            opt.step(epoch)
            step += 1
            for k in sums:
                sums[k] += comps[k] * len(batch)
        rec = {
            "epoch": epoch,
            "step": step,
            "L_dice": sums["dice"] / len(samples),
            "L_L2": sums["l2"] / len(samples),
            "L_KL": sums["kl"] / len(samples),
            "total": sums["total"] / len(samples),
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        for hook in hooks:
            hook(epoch, rec)
        if out_dir is not None and (epoch + 1) in cfg.checkpoint_epochs:
            path = os.path.join(out_dir, f"{model_id}_ep{epoch + 1:04d}.ckpt")
            meta = {
                "stage": network.stage,
                "epoch": epoch + 1,
                "seed": int(seed),
                "model_id": f"{model_id}_ep{epoch + 1:04d}",
                "adam_step": opt.state.step,
                "lr0": cfg.lr0,
                "epochs": cfg.epochs,
            }
            save_checkpoint(path, network, meta, opt.state_tensors())
            paths.append(path)
    return paths, history


# ---------------------------------------------------------------------------
# expanded stage-2 dataset


def _load_stage1(ckpt):
    if isinstance(ckpt, Network):
        return ckpt, "stage1"
    net, meta, _ = load_checkpoint(ckpt, expect_stage=1)
    return net, meta.get("model_id", os.path.basename(str(ckpt)))


def stage2_input(stage1_probs, image, crop_dims, brain_mask=None):
    """Crop stage-1 probabilities and the normalized image around the predicted tumor.

    Returns ``(7-channel input, offset)`` with the 3 probability channels first.
    """
    p, img, offset = tumor_centered_crop(stage1_probs, image, crop_dims, brain_mask=brain_mask)
    return np.concatenate([p, img]).astype(np.float32), offset


def build_expanded_dataset(stage1_checkpoints, raw_cases, crop_dims) -> List[TrainSample]:
    """One stage-2 sample per (stage-1 model, case): inference, crop, 7-channel concat."""
    if not stage1_checkpoints:
        raise ValueError("build_expanded_dataset: need at least one stage-1 checkpoint")
    models = [_load_stage1(c) for c in stage1_checkpoints]
    in_ch = models[0][0].config.in_channels
    prepared = []
    for case in raw_cases:
        if case.image.channels != in_ch:
            raise ValueError(f"case {case.case_id}: {case.image.channels} channels, stage-1 expects {in_ch}")
        brain = np.any(case.image.data != 0, axis=0)
        prepared.append((case, normalize(case.image.data), encode_labels(case.labels).stack(np.uint8), brain))
    samples = []
    for idx, (net, model_id) in enumerate(models):
        if net.config.in_channels != in_ch:
            raise ValueError(f"stage-1 model {model_id} expects {net.config.in_channels} channels, others {in_ch}")
        for case, image, target, brain in prepared:
            probs = predict_padded(net, image)
            x, offset = stage2_input(probs, image, crop_dims, brain)
            t = target[(slice(None),) + tuple(slice(o, o + c) for o, c in zip(offset, crop_dims))]
            samples.append(TrainSample(x, np.ascontiguousarray(t), case.case_id, f"{idx}:{model_id}"))
    return samples


def patient_split(patient_ids, val_fraction, rng):
    """Split unique patient ids into (train_ids, val_ids)."""
    unique = sorted(set(patient_ids))
    perm = rng.permutation(len(unique))
    n_val = int(round(val_fraction * len(unique)))
    val = {unique[i] for i in perm[:n_val]}
    return [u for u in unique if u not in val], sorted(val)


def split_samples(samples: Sequence[TrainSample], val_fraction, rng):
    """Patient-grouped division: all samples derived from one patient share a side."""
    train_ids, val_ids = patient_split([s.patient_id for s in samples], val_fraction, rng)
    val = set(val_ids)
    return [s for s in samples if s.patient_id not in val], [s for s in samples if s.patient_id in val]
