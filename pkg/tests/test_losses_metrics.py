import numpy as np
import pytest

from awsup import autodiff as ad
from awsup import losses as L
from awsup import metrics as M
from awsup.errors import ContractError, DimensionError

from oracles import (asd_oracle, dice_counts, grad_check, hd_oracle, jaccard_counts,
                     t_pvalue_quadrature)


def rand_masks(seed, shape=(12, 12), p=0.4):
    r = np.random.default_rng(seed)
    return r.random(shape) < p, r.random(shape) < p


# ---------------------------------------------------------------- losses

def test_dice_score_identity_and_disjoint():
    g = np.zeros((1, 4, 4))
    g[0, :2] = 1
    assert L.dice_score(g, g)[0] == 1.0
    p = np.zeros((1, 4, 4))
    p[0, 2:] = 1
    A = 8
    assert L.dice_score(p, g)[0] == pytest.approx(1.0 / (2 * A + 1.0), abs=1e-15)


def test_dice_score_counting_oracle():
    a, b = rand_masks(0, (8, 8))
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    ref = (2 * inter + 1.0) / (a.sum() + b.sum() + 1.0)
    assert L.dice_score(a[None], b[None])[0] == pytest.approx(ref, abs=1e-12)
    assert L.dice_score(a[None], b[None])[0] == L.dice_score(b[None], a[None])[0]


def test_dice_loss_values_and_grad():
    g = np.zeros((2, 3, 3))
    g[0, 0] = 1
    g[1, 1:] = 1
    assert L.dice_loss(g, g).item() == 0.0
    h = np.zeros((1, 4, 4))
    h[0, :2] = 1
    A = 8
    assert L.dice_loss(h[:, ::-1], h).item() == pytest.approx(1 - 1 / (2 * A + 1), abs=1e-12)
    q = ad.parameter(np.random.default_rng(1).random((2, 3, 3)))
    assert grad_check(lambda: L.dice_loss(q, g), [q]) <= 1e-5


def test_dice_shape_mismatch():
    with pytest.raises(DimensionError):
        L.dice_score(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


def test_hybrid_loss_parts():
    r = np.random.default_rng(2)
    z = r.normal(size=(3, 4, 4))
    y = r.integers(0, 3, size=(4, 4))
    dice = L.dice_loss(ad.softmax_channel(z), ad.one_hot(y, 3)).item()
    ce = ad.cross_entropy(z, y).item()
    assert L.hybrid_layer_loss(z, y, L.LossConfig(lambda_ce=0.0)).item() == pytest.approx(dice, abs=1e-15)
    assert L.hybrid_layer_loss(z, y).item() == pytest.approx(dice + 0.25 * ce, abs=1e-12)
    p = ad.parameter(z)
    assert grad_check(lambda: L.hybrid_layer_loss(p, y), [p]) <= 1e-5


def test_hybrid_perfect_limit():
    y = np.array([[0, 1], [2, 1]])
    z = 60.0 * ad.one_hot(y, 3)
    assert L.hybrid_layer_loss(z, y).item() < 1e-20


def test_weighted_total_loss():
    ls = [0.3, 1.2, 0.7, 2.0]
    assert L.weighted_total_loss(ls, [1, 0, 0, 0]) == 0.3
    assert L.weighted_total_loss(ls, [0.25] * 4) == pytest.approx(np.mean(ls), abs=1e-15)
    assert L.weighted_total_loss([1.0] * 4, [0.156, 0.200, 0.240, 0.404]) == pytest.approx(1.0, abs=1e-12)
    r = np.random.default_rng(3)
    for _ in range(50):
        a = r.dirichlet(np.ones(4))
        v = L.weighted_total_loss(ls, a)
        assert min(ls) - 1e-12 <= v <= max(ls) + 1e-12


def test_weighted_total_loss_contract():
    with pytest.raises(ContractError):
        L.weighted_total_loss([1.0, 1.0], [0.7, 0.7])
    with pytest.raises(DimensionError):
        L.weighted_total_loss([1.0, 1.0], [1.0])


# ---------------------------------------------------------------- metrics

def test_overlap_metrics_oracle():
    for s in range(30):
        a, b = rand_masks(s, (8, 8))
        assert M.metric_dice(a, b) == pytest.approx(dice_counts(a, b), abs=1e-12)
        assert M.metric_jaccard(a, b) == pytest.approx(jaccard_counts(a, b), abs=1e-12)
        assert M.metric_jaccard(a, b) <= M.metric_dice(a, b)


def test_overlap_edge_cases():
    a = np.zeros((4, 4), bool)
    a[1, 1] = True
    assert M.metric_dice(a, a) == 1.0 and M.metric_jaccard(a, a) == 1.0
    assert M.metric_dice(a, ~a) == 0.0 and M.metric_jaccard(a, ~a) == 0.0


def test_hd_examples():
    a = np.zeros((6, 6), bool)
    b = np.zeros((6, 6), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert M.metric_hd(a, b) == 5.0
    assert M.metric_hd(a, a) == 0.0


def test_asd_parallel_lines():
    a = np.zeros((8, 8), bool)
    b = np.zeros((8, 8), bool)
    a[2, 1:7] = True
    b[5, 1:7] = True
    assert M.metric_asd(a, b) == 3.0
    assert M.metric_asd(a, a) == 0.0


def test_distance_metrics_brute_force():
    for s in range(20):
        a, b = rand_masks(100 + s)
        if not a.any() or not b.any():
            continue
        assert M.metric_hd(a, b) == hd_oracle(a, b)
        assert M.metric_asd(a, b) == asd_oracle(a, b)
        assert M.metric_hd(a, b) >= M.metric_asd(a, b)


def test_empty_sentinels():
    z = np.zeros((3, 4), bool)
    o = z.copy()
    o[1, 1] = True
    assert M.metric_hd(z, z) == 0.0 and M.metric_asd(z, z) == 0.0
    assert M.metric_hd(z, o) == 5.0 and M.metric_asd(o, z) == 5.0


def test_t_test_conventions():
    x = np.array([0.1, 0.5, 0.3])
    assert M.paired_t_test(x, x) == (0.0, 1.0)
    t, p = M.paired_t_test(x + 1, x)
    assert t == np.inf and p == 0.0
    with pytest.raises(ContractError):
        M.paired_t_test([1.0], [2.0])


def test_t_test_quadrature_reference():
    r = np.random.default_rng(7)
    x, y = r.normal(size=10), r.normal(0.5, 1.0, size=10)
    t, p = M.paired_t_test(x, y)
    d = x - y
    assert t == pytest.approx(d.mean() / (d.std(ddof=1) / np.sqrt(10)), abs=1e-12)
    assert p == pytest.approx(t_pvalue_quadrature(t, 9), abs=1e-6)


def test_metrics_csv_round_trip(tmp_path):
    a, b = rand_masks(9, (10, 10))
    gt = a.astype(int) + b.astype(int)
    pred = np.roll(gt, 1, axis=0)
    rows = M.evaluate_case("case_0001", pred, gt, [(1, "one"), (2, "two")])
    path = tmp_path / "m.csv"
    M.write_metrics_csv(rows, path)
    assert path.read_text().splitlines()[0] == "case_id,class,dice,jaccard,hd_px,asd_px"
    assert M.read_metrics_csv(path) == rows
