import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msm_iv.errors import PanelError
from msm_iv.panel import (Panel, PanelSchema, Regime, enumerate_regimes, history_vars, load_panel,
                          moment_rows, regime_index, write_panel)


def small_panel(n=5, J=2, seed=0, series=False):
    r = np.random.default_rng(seed)
    L = r.integers(0, 2, (n, J, 2)).astype(float)
    Z = r.integers(0, 2, (n, J))
    A = r.integers(0, 2, (n, J))
    Y = r.normal(size=(n, J)) if series else r.normal(size=n)
    return Panel(L, Z, A, Y, ("l", "v"), ("v",))


def test_shapes_and_access():
    p = small_panel()
    assert (p.n, p.J) == (5, 2)
    assert np.array_equal(p.column(("z", 1)), p.Z[:, 1])
    assert np.array_equal(p.column(("v", 0)), p.L[:, 0, 1])
    assert p.V.shape == (5, 1)
    assert p.total_weight == 5


def test_rejects_non_binary_and_bad_shapes():
    L = np.zeros((2, 2, 1))
    with pytest.raises(PanelError, match="binary"):
        Panel(L, [[0, 2], [1, 0]], [[0, 1], [1, 0]], [0.0, 1.0], ("l",))
    with pytest.raises(PanelError, match="shape"):
        Panel(L, [[0, 1]], [[0, 1], [1, 0]], [0.0, 1.0], ("l",))
    with pytest.raises(PanelError, match="V columns"):
        Panel(L, [[0, 1], [1, 0]], [[0, 1], [1, 0]], [0.0, 1.0], ("l",), ("w",))
    with pytest.raises(PanelError, match="non-finite"):
        Panel(L, [[0, 1], [1, 0]], [[0, 1], [1, 0]], [0.0, np.nan], ("l",))


def test_immutable():
    p = small_panel()
    with pytest.raises(ValueError):
        p.A[0, 0] = 1


def test_regimes_order_and_index():
    regs = enumerate_regimes(3)
    assert [r.a for r in regs[:3]] == [(0, 0, 0), (0, 0, 1), (0, 1, 0)]
    assert all(r.index == i for i, r in enumerate(regs))
    A = np.array([r.a for r in regs])
    assert np.array_equal(regime_index(A), np.arange(8))
    with pytest.raises(ValueError):
        enumerate_regimes(0)
    with pytest.raises(ValueError):
        Regime((0, 2))


@given(st.integers(1, 10))
def test_regime_count(J):
    regs = enumerate_regimes(J)
    assert len(regs) == 2 ** J
    assert len({r.a for r in regs}) == 2 ** J


def test_history_vars_order():
    hv = history_vars(("l", "m"), 1, 1, 0)
    assert hv == [("l", 0), ("m", 0), ("z", 0), ("a", 0), ("l", 1), ("m", 1), ("z", 1)]
    assert ("l", 1) not in history_vars(("l", "m"), 1, 0, 0, omit=("l",))


def test_moment_rows_reproduce_moments():
    r = np.random.default_rng(1)
    mean = r.normal(size=(3, 2))
    B = r.normal(size=(3, 2, 2))
    cov = B @ B.transpose(0, 2, 1)
    cell, Y, w = moment_rows(mean, cov, np.array([1.0, 2.0, 0.5]))
    for c in range(3):
        m = cell == c
        wc = w[m] / w[m].sum()
        mu = wc @ Y[m]
        assert np.allclose(mu, mean[c])
        d = Y[m] - mu
        assert np.allclose((d * wc[:, None]).T @ d, cov[c])
        assert np.isclose(w[m].sum(), [1.0, 2.0, 0.5][c])


def test_compress_preserves_affine_sums(desk_panel):
    c = desk_panel.compress()
    assert c.n < desk_panel.n
    assert np.isclose(c.w.sum(), desk_panel.n)
    # sums and second moments of Y within each treatment-history cell
    for p in (desk_panel, c):
        key = p.A[:, 0] * 2 + p.A[:, 1]
        s1 = np.bincount(key, weights=p.w * p.Y, minlength=4)
        s2 = np.bincount(key, weights=p.w * p.Y ** 2, minlength=4)
        if p is desk_panel:
            ref = (s1, s2)
    assert np.allclose(ref[0], s1) and np.allclose(ref[1], s2)


def test_csv_round_trip(tmp_path):
    p = small_panel(series=False)
    f = tmp_path / "p.csv"
    write_panel(p, f)
    q = load_panel(f, PanelSchema(v_columns=("v",)))
    assert q.equals(p)


def test_csv_series_round_trip(tmp_path):
    p = small_panel(series=True)
    f = tmp_path / "p.csv"
    write_panel(p, f)
    q = load_panel(f, PanelSchema(v_columns=("v",), outcome="series"))
    assert q.equals(p)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 8), J=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_csv_round_trip_property(tmp_path_factory, n, J, seed):
    p = small_panel(n, J, seed)
    f = tmp_path_factory.mktemp("rt") / "p.csv"
    write_panel(p, f)
    assert load_panel(f, PanelSchema(v_columns=("v",))).equals(p)


def _write(tmp_path, text):
    f = tmp_path / "x.csv"
    f.write_text(text)
    return f


def test_load_errors_name_the_problem(tmp_path):
    ragged = "subject_id,time,l,Z,A,Y\n1,0,0,1,0,\n1,1,0,1,1,2.0\n2,0,1,0,0,1.0\n"
    with pytest.raises(PanelError, match="subject 2 is missing time"):
        load_panel(_write(tmp_path, ragged))
    nonbin = "subject_id,time,l,Z,A,Y\n1,0,0,3,0,1.0\n"
    with pytest.raises(PanelError, match="subject 1, time 0: column Z"):
        load_panel(_write(tmp_path, nonbin))
    noy = "subject_id,time,l,Z,A,Y\n1,0,0,1,0,\n"
    with pytest.raises(PanelError, match="missing terminal outcome"):
        load_panel(_write(tmp_path, noy))
    with pytest.raises(PanelError, match="missing column 'A'"):
        load_panel(_write(tmp_path, "subject_id,time,l,Z,Y\n1,0,0,1,1.0\n"))


def test_take_and_weights():
    p = small_panel()
    q = p.take([0, 2])
    assert q.n == 2 and np.array_equal(q.A, p.A[[0, 2]])
    w = p.with_weights(np.arange(5.0))
    assert w.total_weight == 10
    with pytest.raises(PanelError):
        p.with_weights(-np.ones(5))
