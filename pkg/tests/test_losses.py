import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rddpm.losses import (
    BatchResiduals, RobustLossSpec, huber_loss, l1_loss, l2_loss, lts_loss, lts_select,
    residuals, residuals_from_prediction,
)
from rddpm.diffusion import NoisySample


def make_res(r):
    r = np.asarray(r, dtype=np.float64)
    return residuals_from_prediction(r, np.zeros_like(r))


def fd_grad_wrt_pred(loss_fn, eps, pred, h=1e-4):
    """Central differences of loss(eps - pred) w.r.t. every prediction element."""
    g = np.zeros_like(pred)
    for i in np.ndindex(pred.shape):
        p = pred.copy(); p[i] += h
        lp = loss_fn(residuals_from_prediction(eps, p))[0]
        p[i] -= 2 * h
        lm = loss_fn(residuals_from_prediction(eps, p))[0]
        g[i] = (lp - lm) / (2 * h)
    return g


class EpsModel:
    def __init__(self, out):
        self.out = out

    def __call__(self, x, t):
        return self.out


def test_residual_scores():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((3, 1, 4, 4))
    batch = NoisySample(eps.copy(), eps, np.array([1, 2, 3]))
    assert np.all(residuals(batch, EpsModel(eps)).per_sample_score == 0)
    res = residuals(batch, EpsModel(np.zeros_like(eps)))
    np.testing.assert_allclose(res.per_sample_score, (eps ** 2).mean(axis=(1, 2, 3)))
    pred = rng.standard_normal(eps.shape)
    res = residuals(batch, EpsModel(pred))
    for i in range(3):
        acc = 0.0
        for v in (eps[i] - pred[i]).ravel():
            acc += v * v
        assert abs(res.per_sample_score[i] - acc / 16) < 1e-9


def test_l2_examples():
    loss, g = l2_loss(make_res(np.zeros((2, 3))))
    assert loss == 0 and not g.any()
    loss, g = l2_loss(make_res([[3.0]]))
    assert loss == 9 and g[0, 0] == -6


@pytest.mark.parametrize("kind", ["l2", "huber", "l1"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((4, 1, 3, 3))
    pred = rng.standard_normal((4, 1, 3, 3)) * 0.5
    fn = {"l2": l2_loss, "huber": lambda r: huber_loss(r, 0.2), "l1": l1_loss}[kind]
    r = eps - pred
    if kind != "l2":  # stay off the kinks
        assert np.min(np.abs(np.abs(r) - 0.2)) > 1e-3 and np.min(np.abs(r)) > 1e-3
    _, g = fn(residuals_from_prediction(eps, pred))
    num = fd_grad_wrt_pred(fn, eps, pred)
    rel = np.abs(g - num) / np.maximum(np.abs(num), 1e-12)
    assert rel.max() < 1e-4


def test_huber_examples():
    assert huber_loss(make_res([[0.1]]), 0.2)[0] == pytest.approx(0.005, abs=1e-15)
    assert huber_loss(make_res([[1.0]]), 0.2)[0] == pytest.approx(0.18, abs=1e-15)
    d = 0.2
    loss, g = huber_loss(make_res([[d]]), d)
    assert loss == pytest.approx(d * d / 2, abs=1e-15)
    assert d * (d - d / 2) == pytest.approx(d * d / 2)
    assert abs(g[0, 0]) == pytest.approx(d)
    with pytest.raises(ValueError):
        huber_loss(make_res([[1.0]]), 0.0)


def test_huber_continuity_at_delta():
    d, h = 0.2, 1e-6
    up = huber_loss(make_res([[d + h]]), d)[0]
    lo = huber_loss(make_res([[d - h]]), d)[0]
    assert abs(up - lo) < 1e-5


def test_huber_equals_half_l2_inside_delta():
    rng = np.random.default_rng(2)
    r = rng.uniform(-0.19, 0.19, (5, 1, 4, 4))
    lh, gh = huber_loss(make_res(r), 0.2)
    l2, g2 = l2_loss(make_res(r))
    assert lh == pytest.approx(l2 / 2, rel=1e-14)
    np.testing.assert_array_equal(gh * 2, g2)


def test_outlier_gradient_ordering():
    rng = np.random.default_rng(3)
    r = rng.standard_normal((4, 1, 4, 4)) * 0.1
    r[2] += 5.0
    res = make_res(r)
    _, g2 = l2_loss(res)
    _, gh = huber_loss(res, 0.2)
    _, gl = lts_loss(res, 0.75)
    assert np.linalg.norm(gh[2]) <= np.linalg.norm(g2[2])
    assert not gl[2].any()


def test_lts_select_examples():
    res = BatchResiduals(np.zeros((4, 1)), np.array([4.0, 1.0, 3.0, 2.0]))
    assert lts_select(res, 0.5).tolist() == [1, 3]
    assert lts_select(res, 1.0).tolist() == [0, 1, 2, 3]
    assert lts_select(res, 0.01).tolist() == [1]
    tied = BatchResiduals(np.zeros((4, 1)), np.array([1.0, 1.0, 1.0, 1.0]))
    assert lts_select(tied, 0.5).tolist() == [0, 1]
    with pytest.raises(ValueError):
        lts_select(res, 0.0)


def test_lts_lambda_one_is_l2_bitwise():
    rng = np.random.default_rng(4)
    res = make_res(rng.standard_normal((6, 1, 5, 5)).astype(np.float32))
    l_a, g_a = lts_loss(res, 1.0)
    l_b, g_b = l2_loss(res)
    assert l_a == l_b
    assert g_a.tobytes() == g_b.tobytes()


def test_lts_trims_large_outlier():
    rng = np.random.default_rng(5)
    B = 5
    r = rng.standard_normal((B, 1, 3, 3))
    r[3] *= np.sqrt(10.0) * np.max(np.abs(r)) / np.min(np.abs(r[3]))
    res = make_res(r)
    _, g = lts_loss(res, (B - 1) / B)
    assert not g[3].any()
    assert g[[0, 1, 2, 4]].any()


def test_lts_loss_is_l2_on_oracle_subset():
    rng = np.random.default_rng(6)
    for _ in range(20):
        B = int(rng.integers(1, 12))
        lam = float(rng.uniform(0.05, 1))
        res = make_res(rng.standard_normal((B, 1, 3, 3)))
        s = max(1, int(np.floor(lam * B + 1e-9)))
        keep = sorted(range(B), key=lambda i: (res.per_sample_score[i], i))[:s]
        loss, _ = lts_loss(res, lam)
        sub = res.per_element[keep]
        assert loss == pytest.approx(np.mean(sub ** 2), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_losses_permutation_invariant(B, seed):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((B, 1, 2, 2))
    perm = rng.permutation(B)
    res, rp = make_res(r), make_res(r[perm])
    for fn in (l2_loss, lambda x: huber_loss(x, 0.2), lambda x: lts_loss(x, 0.6)):
        assert fn(res)[0] == pytest.approx(fn(rp)[0], rel=1e-12)
    sel = lts_select(res, 0.6)
    sel_p = lts_select(rp, 0.6)
    assert np.allclose(np.sort(res.per_sample_score[sel]), np.sort(rp.per_sample_score[sel_p]))


def test_spec_validation_and_config():
    with pytest.raises(ValueError):
        RobustLossSpec("huber", delta=0.0)
    with pytest.raises(ValueError):
        RobustLossSpec("lts", lam=1.5)
    with pytest.raises(ValueError):
        RobustLossSpec("cauchy")
    assert RobustLossSpec.from_config({"kind": "huber", "delta": 0.0, "l1": True}).kind == "l1"
    s = RobustLossSpec.from_config({"kind": "lts", "lambda": 0.8})
    assert s.lam == 0.8 and RobustLossSpec.from_config(s.to_config()) == s
