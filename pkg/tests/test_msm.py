import numpy as np
import pytest

from msm_iv.errors import ConfigError
from msm_iv.msm import MsmSpec, d_sm, linear_parts, regime_features
from msm_iv.panel import Panel

A = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
V = np.array([[0.0], [1.0], [0.0], [1.0]])


def test_default_features():
    m = MsmSpec("1.1", v_columns=("l",))
    assert m.features == ("1", "sum_a", "l")
    X = m.design(A, V)
    assert X.tolist() == [[1, 0, 0], [1, 1, 1], [1, 1, 0], [1, 2, 1]]


def test_tokens_and_products():
    m = MsmSpec("1.1", features=("a0", "a1", "I(a=11)", "sum_a*l"), v_columns=("l",))
    X = m.design(A, V)
    assert X[:, 0].tolist() == [0, 0, 1, 1]
    assert X[:, 2].tolist() == [0, 0, 0, 1]
    assert X[:, 3].tolist() == [0, 1, 0, 2]


@pytest.mark.parametrize("bad", ["b0", "sum", "I(a=2)", "m=1"])
def test_bad_tokens(bad):
    with pytest.raises(ConfigError):
        MsmSpec("1.1", features=(bad,))


def test_regime_length_mismatch():
    with pytest.raises(ConfigError):
        MsmSpec("1.1", features=("I(a=101)",)).design(A, V)


def test_series_truncates_history():
    m = MsmSpec("1.4", features=("1", "sum_a", "m=2"))
    X1 = m.design(A, V, 1)
    X2 = m.design(A, V, 2)
    assert X1[:, 1].tolist() == [0, 0, 1, 1]
    assert X2[:, 1].tolist() == [0, 1, 1, 2]
    assert X1[:, 2].tolist() == [0] * 4 and X2[:, 2].tolist() == [1] * 4


def test_d_sm_is_affine():
    p = Panel(np.zeros((4, 2, 1)), np.zeros((4, 2)), A, np.array([1.0, 2.0, 3.0, 4.0]), ("l",))
    m = MsmSpec("1.1")
    beta = np.array([0.3, -0.2])
    c, B = m.linear_parts(p)
    x = m.design(A, V)
    assert np.allclose(d_sm(m, p, beta), x * (p.Y - x @ beta)[:, None])
    assert np.allclose(c - B @ beta, d_sm(m, p, beta))


def test_custom_index_function():
    m = MsmSpec("1.1", h=lambda A, V: np.column_stack([np.ones(len(A)), 2 * A.sum(1)]))
    c, B = linear_parts(m, A, V, np.ones(4))
    assert np.allclose(c[:, 1], 2 * A.sum(1))


def test_family_outcome_mismatch():
    with pytest.raises(ConfigError):
        linear_parts(MsmSpec("1.4"), A, V, np.ones(4))
    with pytest.raises(ConfigError):
        MsmSpec("2.1")


def test_regime_features_shape():
    m = MsmSpec("1.1", v_columns=("l",))
    R = regime_features(m, 2, np.array([[0.0], [1.0]]))
    assert R.shape == (2, 4, 3)
    assert R[1, 3].tolist() == [1, 2, 1]
