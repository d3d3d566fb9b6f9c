import numpy as np
import pytest
from scipy.ndimage import binary_erosion, gaussian_filter, generate_binary_structure

from cascadeseg.data import LABELS
from cascadeseg.metrics import (
    HD95_EMPTY,
    RegionReport,
    aggregate,
    confusion,
    dice_score,
    evaluate_case,
    hausdorff95,
    sensitivity_specificity,
    surface,
    to_csv,
    to_pretty,
)

# ---------------------------------------------------------------------------
# brute-force oracles


def surface_oracle(m):
    # voxels removed by one 6-connected erosion; outside the volume counts as background
    return m & ~binary_erosion(m, generate_binary_structure(3, 1), border_value=0)


def directed_oracle(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    n = len(d)
    # smallest distance v with at least 95% of the distances <= v
    for v in np.unique(d):
        if (d <= v).sum() * 100 >= 95 * n:
            return float(v)


def hd95_oracle(p, t):
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return HD95_EMPTY
    a = np.argwhere(surface_oracle(p)).astype(np.float64)
    b = np.argwhere(surface_oracle(t)).astype(np.float64)
    return max(directed_oracle(a, b), directed_oracle(b, a))


def dice_oracle(p, t):
    inter = sum(1 for x, y in zip(p.ravel().tolist(), t.ravel().tolist()) if x and y)
    total = int(p.sum()) + int(t.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def random_pair(rng):
    dims = tuple(int(d) for d in rng.integers(1, 17, size=3))
    kind = rng.integers(3)
    if kind == 0:   # independent noise
        p = rng.random(dims) < rng.random()
        t = rng.random(dims) < rng.random()
    else:           # smooth blobs, correlated when kind == 2
        f = gaussian_filter(rng.normal(size=dims), 1.5)
        g = f + (0 if kind == 2 else 1) * gaussian_filter(rng.normal(size=dims), 1.5) + 0.3 * rng.normal(size=dims) * (kind == 2)
        p, t = f > rng.normal(0, 0.1), g > rng.normal(0, 0.1)
    if rng.random() < 0.05:
        p = np.zeros(dims, bool)
    if rng.random() < 0.05:
        t = np.zeros(dims, bool)
    return p, t


def test_surface_matches_erosion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = random_pair(rng)[0]
        assert np.array_equal(surface(m), surface_oracle(m))


def test_metrics_bit_exact_against_oracles_1000_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        p, t = random_pair(rng)
        assert hausdorff95(p, t) == hd95_oracle(p, t)
        assert dice_score(p, t) == dice_oracle(p, t)


# ---------------------------------------------------------------------------
# hand examples


def test_hd95_hand_examples():
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hausdorff95(a, b) == 3.0
    assert hausdorff95(a, b, spacing=(2.0, 1.0, 1.0)) == 6.0
    assert hausdorff95(a, a) == 0.0
    empty = np.zeros_like(a)
    assert hausdorff95(empty, empty) == 0.0
    assert hausdorff95(a, empty) == HD95_EMPTY == hausdorff95(empty, a)


def test_hd95_ignores_five_percent_outliers():
    # 40 coincident surface points plus one far outlier: rank ceil(0.95 * 41) = 39 is still 0
    a = np.zeros((4, 60, 4), bool)
    a[0, :40, 0] = True
    b = a.copy()
    b[3, 59, 3] = True
    assert hausdorff95(a, b) == 0.0
    b[3, 50:59, 3] = True   # 10 outliers out of 50 exceed 5%
    assert hausdorff95(a, b) > 0


def test_dice_hand_example_and_empty():
    a = np.zeros(8, bool)
    b = np.zeros(8, bool)
    a[:4] = True
    b[2:6] = True
    assert dice_score(a, b) == 0.5
    assert dice_score(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    assert dice_score(a, np.zeros(8, bool)) == 0.0


def test_dice_symmetry_and_flip_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p, t = random_pair(rng)
        d = dice_score(p, t)
        assert dice_score(t, p) == d
        axes = tuple(i for i in range(3) if rng.random() < 0.5)
        assert dice_score(np.flip(p, axes), np.flip(t, axes)) == d
        perm = tuple(rng.permutation(3))
        assert dice_score(p.transpose(perm), t.transpose(perm)) == d


def test_confusion_sensitivity_specificity():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p, t = random_pair(rng)
        tp, fp, fn, tn = confusion(p, t)
        P, T = p.ravel().tolist(), t.ravel().tolist()
        assert (tp, fp, fn, tn) == (
            sum(x and y for x, y in zip(P, T)),
            sum(x and not y for x, y in zip(P, T)),
            sum(y and not x for x, y in zip(P, T)),
            sum(not x and not y for x, y in zip(P, T)),
        )
        sens, spec = sensitivity_specificity(p, t)
        if tp + fn:
            assert sens == tp / (tp + fn)
        if tn + fp:
            assert spec == tn / (tn + fp)
        if tp + fp + fn:
            assert abs(dice_score(p, t) - 2 * tp / (2 * tp + fp + fn)) < 1e-15
    assert sensitivity_specificity(np.zeros(4, bool), np.zeros(4, bool)) == (1.0, 1.0)
    assert sensitivity_specificity(np.ones(4, bool), np.ones(4, bool)) == (1.0, 1.0)


def test_metric_input_errors():
    with pytest.raises(ValueError, match="differ"):
        dice_score(np.zeros(3, bool), np.zeros(4, bool))
    with pytest.raises(ValueError, match="binary"):
        hausdorff95(np.full((2, 2, 2), 2), np.zeros((2, 2, 2)))


# ---------------------------------------------------------------------------
# per-case evaluation and aggregation


def _labels(rng, dims=(12, 12, 12)):
    lab = np.zeros(dims, np.uint8)
    lab[3:9, 3:9, 3:9] = 2
    lab[4:8, 4:8, 4:8] = 4
    lab[5:7, 5:7, 5:7] = 1
    noise = rng.random(dims) < 0.05
    lab[noise] = rng.choice(np.array(LABELS, np.uint8), size=int(noise.sum()))
    return lab


def test_evaluate_perfect_case():
    lab = _labels(np.random.default_rng(0))
    rep = evaluate_case(lab, lab, case_id="x")
    for region in ("WT", "TC", "ET"):
        assert rep[region]["dice"] == 1.0 and rep[region]["hd95"] == 0.0
        assert rep[region]["sensitivity"] == 1.0 and rep[region]["specificity"] == 1.0


def test_edema_changes_only_affect_whole_tumor():
    rng = np.random.default_rng(1)
    truth, pred = _labels(rng), _labels(rng)
    base = evaluate_case(pred, truth)
    grown = pred.copy()
    grown[(grown == 0) & (rng.random(grown.shape) < 0.3)] = 2
    rep = evaluate_case(grown, truth)
    assert rep["TC"] == base["TC"] and rep["ET"] == base["ET"]
    assert rep["WT"] != base["WT"]


def test_evaluate_counts_consistent():
    rng = np.random.default_rng(2)
    rep = evaluate_case(_labels(rng), _labels(rng))
    for region in ("WT", "TC", "ET"):
        c = rep.counts[region]
        assert sum(c.values()) == 12 ** 3
        assert abs(rep[region]["dice"] - 2 * c["tp"] / (2 * c["tp"] + c["fp"] + c["fn"])) < 1e-15


def test_evaluate_dims_mismatch():
    with pytest.raises(ValueError, match="differ"):
        evaluate_case(np.zeros((4, 4, 4), np.uint8), np.zeros((4, 4, 5), np.uint8))


def test_aggregate_and_tables():
    reports = []
    for i, d in enumerate([0.2, 0.4, 0.9]):
        reports.append(RegionReport(f"c{i}", {r: {"dice": d, "hd95": 10 * d, "sensitivity": 1.0, "specificity": d}
                                              for r in ("WT", "TC", "ET")}))
    agg = aggregate(reports)
    vals = np.array([0.2, 0.4, 0.9])
    assert agg["WT"]["dice"] == (float(vals.mean()), float(vals.std()))
    assert agg["ET"]["sensitivity"] == (1.0, 0.0)
    csv = to_csv(reports).splitlines()
    assert csv[0] == "case,Dice_ET,Dice_WT,Dice_TC,Hausdorff_ET,Hausdorff_WT,Hausdorff_TC"
    assert [line.split(",")[0] for line in csv[1:]] == ["c0", "c1", "c2", "mean", "sd"]
    assert "Hausdorff TC" in to_pretty(reports)
    with pytest.raises(ValueError):
        aggregate([])
