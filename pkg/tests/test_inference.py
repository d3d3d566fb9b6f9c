import itertools

import numpy as np
import pytest

from cascadeseg.data import LABELS, decode_regions, encode_labels, generate_phantom, normalize, read_cseg
from cascadeseg.inference import (
    CasePrediction,
    attention_maps,
    export_attention_maps,
    majority_vote,
    postprocess_et,
    postprocess_labels,
    run_cascade,
    run_cascades,
)
from cascadeseg.models import build_stage1, build_stage2, predict_padded, save_checkpoint

from conftest import tiny_config

# ---------------------------------------------------------------------------
# small-ET postprocessing


def _with_et(n_et, dims=(16, 16, 16)):
    lab = np.zeros(dims, np.uint8)
    lab[:8] = 2
    lab[:4] = 1
    lab.reshape(-1)[:n_et] = 4
    return lab


@pytest.mark.parametrize("n_et, relabelled", [(499, True), (500, False), (0, False), (1, True)])
def test_threshold_behaviour(n_et, relabelled):
    lab = _with_et(n_et)
    out = postprocess_labels(lab, 500)
    assert (out == 4).sum() == (0 if relabelled else n_et)
    if relabelled:
        assert np.array_equal(out[lab == 4], np.ones(n_et, np.uint8))


def test_postprocess_idempotent_and_preserves_wt_tc():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lab = rng.choice(np.array(LABELS, np.uint8), size=(10, 10, 10), p=[0.4, 0.2, 0.2, 0.2])
        thr = int(rng.integers(1, 400))
        once = postprocess_labels(lab, thr)
        assert np.array_equal(postprocess_labels(once, thr), once)
        a, b = encode_labels(lab), encode_labels(once)
        assert a.wt.sum() == b.wt.sum() and a.tc.sum() == b.tc.sum()
        assert b.et.sum() in (0, a.et.sum())


def test_postprocess_prediction_keeps_decode_consistent():
    lab = _with_et(30)
    probs = encode_labels(lab).stack() * 0.8 + 0.1
    pred = CasePrediction(lab, probs, "m", 1)
    out = postprocess_et(pred, 500)
    assert (out.label_map == 4).sum() == 0
    assert np.array_equal(decode_regions(out.probabilities), out.label_map)
    assert postprocess_et(out, 500).label_map is out.label_map


# ---------------------------------------------------------------------------
# majority vote


def _consistent_probs(labels, rng):
    """Random WT/TC/ET probabilities that decode to ``labels``."""
    hi = lambda: rng.uniform(0.5, 1.0, labels.shape)
    lo = lambda: rng.uniform(0.0, 0.499, labels.shape)
    wt = np.where(labels > 0, hi(), lo())
    tc = np.where((labels == 1) | (labels == 4), hi(), lo())
    et = np.where(labels == 4, hi(), lo())
    probs = np.stack([wt, tc, et]).astype(np.float32)
    assert np.array_equal(decode_regions(probs), labels)
    return probs


def vote_oracle(preds):
    dims = preds[0].label_map.shape
    out = np.zeros(dims, np.uint8)
    for idx in np.ndindex(*dims):
        votes = {lab: 0 for lab in LABELS}
        for p in preds:
            votes[int(p.label_map[idx])] += 1
        top = max(votes.values())
        tied = [lab for lab in LABELS if votes[lab] == top]
        if len(tied) == 1:
            out[idx] = tied[0]
            continue
        score = {lab: 0.0 for lab in LABELS}
        for p in preds:
            wt, tc, et = (float(p.probabilities[c][idx]) for c in range(3))
            cat = {0: 1 - wt, 1: max(tc - et, 0.0), 2: max(wt - tc, 0.0), 4: et}
            s = sum(cat.values())
            for lab in LABELS:
                score[lab] += cat[lab] / s / len(preds)
        out[idx] = max(tied, key=lambda lab: score[lab])
    return out


@pytest.mark.parametrize("k", [1, 2, 3])
def test_vote_matches_exhaustive_oracle(k):
    rng = np.random.default_rng(k)
    patterns = list(itertools.product(LABELS, repeat=k))  # every vote pattern, one voxel each
    reps = 4
    n = len(patterns) * reps
    maps = np.array([patterns[i % len(patterns)] for i in range(n)], np.uint8).T  # (k, n)
    preds = [CasePrediction(m.reshape(n, 1, 1), _consistent_probs(m.reshape(n, 1, 1), rng), f"m{i}", 1)
             for i, m in enumerate(maps)]
    assert np.array_equal(majority_vote(preds), vote_oracle(preds))


def test_vote_permutation_invariant():
    rng = np.random.default_rng(10)
    dims = (6, 6, 6)
    preds = []
    for i in range(5):
        lab = rng.choice(np.array(LABELS, np.uint8), size=dims)
        preds.append(CasePrediction(lab, _consistent_probs(lab, rng), f"m{i}", 1))
    ref = majority_vote(preds)
    for _ in range(100):
        order = rng.permutation(len(preds))
        assert np.array_equal(majority_vote([preds[i] for i in order]), ref)


def test_vote_of_copies_is_identity():
    rng = np.random.default_rng(11)
    lab = rng.choice(np.array(LABELS, np.uint8), size=(5, 5, 5))
    p = CasePrediction(lab, _consistent_probs(lab, rng), "m", 1)
    for k in (1, 2, 5):
        assert np.array_equal(majority_vote([p] * k), lab)


def test_vote_errors():
    with pytest.raises(ValueError, match="no predictions"):
        majority_vote([])
    a = CasePrediction(np.zeros((2, 2, 2), np.uint8), np.zeros((3, 2, 2, 2)), "a", 1)
    b = CasePrediction(np.zeros((2, 2, 3), np.uint8), np.zeros((3, 2, 2, 3)), "b", 1)
    with pytest.raises(ValueError, match="dims"):
        majority_vote([a, b])


# ---------------------------------------------------------------------------
# cascade orchestration


@pytest.fixture(scope="module")
def case():
    return generate_phantom(5, (24, 24, 24))


def _stage2(seed, dims=(16, 16, 16)):
    return build_stage2(tiny_config(in_channels=7, use_attention_gates=True, input_dims=dims), seed=seed)


def test_three_by_five_gives_fifteen(case):
    s1 = [build_stage1(tiny_config(), seed=s) for s in range(3)]
    s2 = [_stage2(10 + s) for s in range(5)]
    preds = run_cascades(s1, s2, case[0])
    assert len(preds) == 15
    assert all(p.stage == 2 and p.label_map.shape == (24, 24, 24) for p in preds)
    assert all(np.array_equal(decode_regions(p.probabilities), p.label_map) for p in preds)
    fused = majority_vote(preds)
    assert fused.shape == (24, 24, 24) and set(np.unique(fused)) <= set(LABELS)


def test_empty_stage2_list_returns_stage1(case):
    s1 = [build_stage1(tiny_config(), seed=s) for s in range(3)]
    preds = run_cascades(s1, [], case[0])
    assert len(preds) == 3 and all(p.stage == 1 for p in preds)


def test_stage2_replaces_only_inside_window(case):
    s1 = build_stage1(tiny_config(), seed=0)
    (pred,) = run_cascade(s1, [_stage2(1)], case[0])
    p1 = predict_padded(s1, normalize(case[0].data))
    changed = np.any(pred.probabilities != p1, axis=0)
    idx = np.argwhere(changed)
    assert idx.size
    extent = idx.max(axis=0) - idx.min(axis=0) + 1
    assert np.all(extent <= 16)


def test_cascade_checkpoint_paths_and_errors(case, tmp_path):
    s1 = build_stage1(tiny_config(), seed=0)
    s2 = _stage2(1)
    save_checkpoint(tmp_path / "a.ckpt", s1, {"model_id": "a"})
    save_checkpoint(tmp_path / "b.ckpt", s2, {"model_id": "b"})
    (pred,) = run_cascade(tmp_path / "a.ckpt", [tmp_path / "b.ckpt"], case[0])
    assert pred.source_model_id == "a+b"
    with pytest.raises(ValueError, match="stage 1"):
        run_cascade(tmp_path / "b.ckpt", [], case[0])
    with pytest.raises(ValueError, match="channels"):
        run_cascade(s1, [], case[0].data[:3])


# ---------------------------------------------------------------------------
# attention export


def test_attention_export(case, tmp_path):
    s1 = build_stage1(tiny_config(), seed=0)
    s2 = _stage2(3)
    paths = export_attention_maps(s2, case[0], tmp_path, stage1=s1)
    assert [p.rsplit("/", 1)[1] for p in map(str, paths)] == [
        "attention_level2.cseg", "attention_level1.cseg", "attention_level0.cseg"]
    for p in paths:
        arr, _ = read_cseg(p)
        assert np.all((arr > 0) & (arr < 1))
    finest, _ = read_cseg(tmp_path / "attention_level0.cseg")
    assert finest.shape == (1, 16, 16, 16)
    assert (tmp_path / "attention_level0_axial.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")


def test_attention_maps_shapes_and_errors():
    s2 = _stage2(4)
    x = np.random.default_rng(0).normal(size=(7, 16, 16, 16))
    maps = attention_maps(s2, x)
    assert [m.shape for m in maps] == [(1, 4, 4, 4), (1, 8, 8, 8), (1, 16, 16, 16)]
    with pytest.raises(ValueError, match="stage-2"):
        attention_maps(build_stage1(tiny_config()), x)
    with pytest.raises(ValueError, match="channels"):
        export_attention_maps(s2, x[:4], "/tmp/unused_attention")
