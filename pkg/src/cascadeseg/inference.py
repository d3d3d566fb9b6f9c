"""Two-stage inference, the small-ET postprocessing rule, voting ensembles, attention export."""

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data import LABELS, Volume, decode_regions, normalize, write_cseg
from .models import Network, forward, load_checkpoint, predict, predict_padded
from .tensor import Tensor, no_grad
from .training import stage2_input


@dataclass
class CasePrediction:
    label_map: np.ndarray        # (D,H,W) uint8
    probabilities: np.ndarray    # (3,D,H,W) float32, WT/TC/ET
    source_model_id: str
    stage: int


def _resolve(model, stage):
    if isinstance(model, Network):
        if model.stage != stage:
            raise ValueError(f"expected a stage-{stage} network, got stage {model.stage}")
        return model, f"stage{stage}"
    net, meta, _ = load_checkpoint(model, expect_stage=stage)
    return net, meta.get("model_id", os.path.splitext(os.path.basename(str(model)))[0])


def run_cascade(stage1, stage2_list: Sequence, case_image, threshold=0.5) -> List[CasePrediction]:
    """One stage-1 model feeding each stage-2 model; one prediction per stage-2 model.

    Stage-2 output replaces stage-1 probabilities inside the tumor window only;
    outside it the stage-1 probabilities are kept. With an empty ``stage2_list``
    the stage-1 prediction is returned alone.
    """
    net1, id1 = _resolve(stage1, 1)
    raw = case_image.data if isinstance(case_image, Volume) else np.asarray(case_image, dtype=np.float32)
    if raw.shape[0] != net1.config.in_channels:
        raise ValueError(f"image has {raw.shape[0]} channels, stage-1 model {id1} expects {net1.config.in_channels}")
    image = normalize(raw)
    probs1 = predict_padded(net1, image)
    if not stage2_list:
        return [CasePrediction(decode_regions(probs1, threshold), probs1, id1, 1)]
    brain = np.any(raw != 0, axis=0)
    preds = []
    cached = {}
    for s2 in stage2_list:
        net2, id2 = _resolve(s2, 2)
        crop_dims = net2.config.input_dims
        if net2.config.in_channels != 3 + raw.shape[0]:
            raise ValueError(f"stage-2 model {id2} expects {net2.config.in_channels} channels, cascade gives {3 + raw.shape[0]}")
        if crop_dims not in cached:
            cached[crop_dims] = stage2_input(probs1, image, crop_dims, brain)
        x, offset = cached[crop_dims]
        p2 = predict(net2, x)
        full = probs1.copy()
        full[(slice(None),) + tuple(slice(o, o + c) for o, c in zip(offset, crop_dims))] = p2
        preds.append(CasePrediction(decode_regions(full, threshold), full, f"{id1}+{id2}", 2))
    return preds


def run_cascades(stage1_list, stage2_list, case_image, threshold=0.5) -> List[CasePrediction]:
    """Every stage-1 model crossed with every stage-2 model (k1 * k2 predictions)."""
    out = []
    for s1 in stage1_list:
        out.extend(run_cascade(s1, stage2_list, case_image, threshold))
    return out


def postprocess_labels(labels, min_et_voxels=500):
    """Relabel all ET (4) voxels as NCR/NET (1) when fewer than ``min_et_voxels`` are predicted."""
    lab = np.asarray(labels)
    n_et = int((lab == 4).sum())
    if 0 < n_et < min_et_voxels:
        lab = lab.copy()
        lab[lab == 4] = 1
    return lab


def postprocess_et(pred: CasePrediction, min_et_voxels=500, threshold=0.5) -> CasePrediction:
    labels = postprocess_labels(pred.label_map, min_et_voxels)
    if labels is pred.label_map:
        return pred
    probs = pred.probabilities.copy()
    demoted = pred.label_map == 4
    # keep decode_regions(probabilities) == label_map
    probs[2][demoted] = np.minimum(probs[2][demoted], np.nextafter(np.float32(threshold), np.float32(0)))
    return CasePrediction(labels, probs, pred.source_model_id, pred.stage)


def category_probabilities(probs):
    """Per-label probabilities (order 0, 1, 2, 4) reconstructed from WT/TC/ET channels."""
    wt, tc, et = (np.asarray(probs[i], dtype=np.float64) for i in range(3))
    cat = np.stack([1 - wt, np.maximum(tc - et, 0), np.maximum(wt - tc, 0), et])
    return cat / cat.sum(axis=0, keepdims=True)


def majority_vote(preds: Sequence[CasePrediction]) -> np.ndarray:
    """Per-voxel label with most votes; ties go to the tied label with the highest mean category probability."""
    if not preds:
        raise ValueError("majority_vote: no predictions")
    dims = preds[0].label_map.shape
    for p in preds:
        if p.label_map.shape != dims or p.probabilities.shape[1:] != dims:
            raise ValueError(f"majority_vote: dims {p.label_map.shape} differ from {dims}")
    labels = np.asarray(LABELS, dtype=np.uint8)
    votes = np.zeros((len(labels),) + dims, dtype=np.int64)
    for p in preds:
        votes += p.label_map[None] == labels.reshape(-1, 1, 1, 1)
    tied = votes == votes.max(axis=0, keepdims=True)
    if np.all(tied.sum(axis=0) == 1):
        return labels[np.argmax(votes, axis=0)]
    # sum in a fixed order; a sum over identical terms is permutation-invariant
    mean_prob = np.zeros((len(labels),) + dims)
    for p in sorted(preds, key=lambda q: q.probabilities.tobytes()):
        mean_prob += category_probabilities(p.probabilities)
    mean_prob /= len(preds)
    score = np.where(tied, mean_prob, -np.inf)
    return labels[np.argmax(score, axis=0)]


def _write_pgm(path, slice2d):
    img = np.clip(np.asarray(slice2d) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def attention_maps(stage2, stage2_input_volume) -> List[np.ndarray]:
    """Attention coefficients of every gate, coarsest first, each (1,D,H,W)."""
    net, _ = _resolve(stage2, 2)
    x = np.asarray(stage2_input_volume, dtype=net.config.dtype)
    with no_grad():
        out = forward(net, Tensor(x[None]), training=False)
    return [a.data[0] for a in out.attention_maps]


def export_attention_maps(stage2, case_image, out_dir, stage1=None, slices=True):
    """Write each gate's coefficient volume as CSEG (plus optional axial mid-slice PGM).

    ``case_image`` is either the stage-2 input (3 + C channels) or, when
    ``stage1`` is given, a raw C-channel image run through stage 1 first.
    Files are named ``attention_level{l}.cseg`` with level 0 the finest.
    """
    net2, id2 = _resolve(stage2, 2)
    if not net2.params.gates:
        raise ValueError(f"model {id2} has no attention gates")
    img = case_image.data if isinstance(case_image, Volume) else np.asarray(case_image, dtype=np.float32)
    if stage1 is not None:
        net1, _ = _resolve(stage1, 1)
        normed = normalize(img)
        probs = predict_padded(net1, normed)
        img, _ = stage2_input(probs, normed, net2.config.input_dims, np.any(img != 0, axis=0))
    if img.shape[0] != net2.config.in_channels:
        raise ValueError(f"stage-2 input needs {net2.config.in_channels} channels, got {img.shape[0]}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    maps = attention_maps(net2, img)
    for i, alpha in enumerate(maps):
        level = len(maps) - 1 - i
        path = os.path.join(out_dir, f"attention_level{level}.cseg")
        write_cseg(path, alpha.astype(np.float32))
        paths.append(path)
        if slices:
            _write_pgm(os.path.join(out_dir, f"attention_level{level}_axial.pgm"), alpha[0, alpha.shape[1] // 2])
    return paths
