import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from oodmat.errors import DomainError
from oodmat.evidential import NIGParams
from oodmat.metrics import (MetricReport, average_ranks, d_eviu, d_mae, d_unc, eviu, mae, read_report_csv, score,
                            spearman, summarize, write_report_csv)
from oodmat.training import PassTensor


def tensor(gamma, nu=None, alpha=None, beta=None):
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    nu = np.ones_like(g) if nu is None else np.atleast_2d(nu)
    alpha = np.full_like(g, 2.0) if alpha is None else np.atleast_2d(alpha)
    beta = np.ones_like(g) if beta is None else np.atleast_2d(beta)
    return PassTensor(g, nu, alpha, beta)


def test_mae_examples():
    assert mae([1, 2], [1, 2]) == 0
    assert mae([1, 3], [0, 1]) == 1.5
    assert mae([11, 13], [10, 11]) == 1.5
    with pytest.raises(ValueError):
        mae([1], [1, 2])


def test_d_mae_and_d_unc_examples():
    p = tensor([[0.0], [2.0]])
    assert d_mae(p, [1.0]) == 0.0
    assert d_unc(p).tolist() == [1.0]
    same = tensor([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
    assert d_unc(same).tolist() == [0.0, 0.0]
    assert d_mae(same, [0.0, 0.0]) == mae([1.0, 2.0], [0.0, 0.0])
    assert d_unc(tensor([[4.0, 5.0]])).tolist() == [0.0, 0.0]


def test_eviu_examples():
    m, per = eviu(NIGParams([0, 0], [1.0, 2.0], [2.0, 3.0], [1.0, 4.0]))
    assert m == 2.5 and per.tolist() == [2.0, 3.0]
    assert eviu(NIGParams([0.0], [1.0], [2.0], [1.0]))[0] == 2.0
    with pytest.raises(ValueError):
        eviu(NIGParams([], [], [], []))
    with pytest.raises(DomainError):
        eviu(NIGParams([0.0], [1.0], [1.0], [1.0]))


def test_d_eviu_examples():
    p = tensor([[0.0], [0.0]], nu=[[1.0], [3.0]], alpha=[[2.0], [4.0]], beta=[[1.0], [3.0]])
    m, per = d_eviu(p)
    assert m == 1.5 and per.tolist() == [1.5]


def test_degenerate_equalities():
    rng = np.random.default_rng(0)
    g, nu, a, b = rng.normal(size=6), rng.uniform(.1, 5, 6), rng.uniform(1.1, 5, 6), rng.uniform(.1, 5, 6)
    one = tensor([g], [nu], [a], [b])
    assert d_eviu(one)[0] == eviu(NIGParams(g, nu, a, b))[0]
    assert np.array_equal(d_eviu(one)[1], eviu(NIGParams(g, nu, a, b))[1])
    rep = tensor(np.tile(g, (6, 1)), np.tile(nu, (6, 1)), np.tile(a, (6, 1)), np.tile(b, (6, 1)))
    y = rng.normal(size=6)
    assert d_mae(rep, y) == mae(g, y)
    assert np.all(d_unc(rep) == 0)


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([3, 2, 1], [10, 20, 30]) == -1.0
    assert abs(spearman([1, 2, 2, 3], [1, 3, 2, 4]) - 0.9487) < 1e-4
    assert abs(spearman([1, 2, 2, 3], [1, 3, 2, 4]) - spearmanr([1, 2, 2, 3], [1, 3, 2, 4])[0]) < 1e-14
    assert spearman([1, 1, 1], [1, 2, 3], full=True) == (0.0, True)
    with pytest.raises(ValueError):
        spearman([1], [1])


def test_average_ranks():
    assert average_ranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


@pytest.mark.filterwarnings("ignore::scipy.stats.ConstantInputWarning")
@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=3, max_size=30), st.integers(0, 2**31))
def test_spearman_matches_scipy_and_is_rank_invariant(u, seed):
    e = np.random.default_rng(seed).integers(-3, 4, len(u)).astype(float)
    u = np.asarray(u, dtype=float)
    ref = spearmanr(u, e)[0]
    ours = spearman(u, e)
    if np.isnan(ref):
        assert ours == 0.0
    else:
        assert abs(ours - ref) < 1e-12
        assert spearman(np.exp(u), e ** 3) == pytest.approx(ours, abs=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(2)
    g = rng.normal(size=(5, 8))
    y = rng.normal(size=8)
    perm = rng.permutation(8)
    a = score(y, NIGParams(g[0], np.ones(8), np.full(8, 2.0), np.ones(8)), tensor(g))
    b = score(y[perm], NIGParams(g[0][perm], np.ones(8), np.full(8, 2.0), np.ones(8)), tensor(g[:, perm]))
    for k in ("mae", "eviu", "d_mae", "d_unc", "d_eviu"):
        assert getattr(a, k) == pytest.approx(getattr(b, k), rel=1e-14)


def test_score_and_summary(tmp_path):
    p = tensor([[0.0, 1.0, 3.0], [2.0, 1.0, 5.0]])
    rep = score([1.0, 1.0, 1.0], p.pass_params(0), p, name="t0")
    assert rep.d_mae == pytest.approx(np.mean([0.0, 0.0, 3.0]))
    assert set(rep.spearman) == {"eviu", "d_unc", "d_eviu"}
    assert all(-1 <= v <= 1 for v in rep.spearman.values())
    r2 = MetricReport("t1", 2, mae=1.0, d_mae=3.0)
    summ = summarize([rep, r2])
    assert summ.mae == pytest.approx((rep.mae + 1.0) / 2)
    assert summ.eviu == rep.eviu and summ.n == 5
    write_report_csv([rep, r2], summ, tmp_path / "r.csv")
    rows = read_report_csv(tmp_path / "r.csv")
    assert [r["task"] for r in rows] == ["t0", "t1", "summary"]
    assert rows[1]["eviu"] is None and rows[0]["mae"] == rep.mae


def test_score_length_mismatch():
    with pytest.raises(ValueError):
        score([1.0, 2.0], None, tensor([[1.0, 2.0, 3.0]]))
