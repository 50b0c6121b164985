import numpy as np
import pytest

from rddpm.schedule import NoiseSchedule, linear_schedule


def naive_alpha_bars(betas):
    out, prod = [], 1.0
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return np.array(out)


def test_default_endpoints():
    s = linear_schedule(1000, 0.001, 0.02)
    assert s.betas[0] == 0.001
    assert s.betas[-1] == 0.02
    assert np.all(np.diff(s.betas) >= 0)


def test_single_step():
    s = linear_schedule(1, 0.001, 0.001)
    assert s.alpha_bars[0] == pytest.approx(0.999, abs=1e-15)


@pytest.mark.parametrize("T", [1, 2, 200, 1000])
def test_alpha_bar_matches_naive_product(T):
    s = linear_schedule(T, 0.001, 0.02)
    ref = naive_alpha_bars([0.001 + (i / (T - 1) if T > 1 else 0) * 0.019 for i in range(T)])
    np.testing.assert_allclose(s.alpha_bars, ref, rtol=1e-12, atol=0)
    rec = s.alphas[1:] * s.alpha_bars[:-1]
    assert np.max(np.abs(s.alpha_bars[1:] - rec), initial=0) <= 1e-12


def test_invariants():
    s = linear_schedule(200)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[0] == 1 - s.betas[0]
    assert 0 < s.alpha_bars[-1] < 1
    ident = np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1 - s.alpha_bars) ** 2
    np.testing.assert_allclose(ident, 1.0, atol=1e-12)
    np.testing.assert_array_equal(s.sigmas, np.sqrt(s.betas))


@pytest.mark.parametrize("args", [(0, 0.001, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 0.001, 1.0)])
def test_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_triple_roundtrip_and_immutability():
    s = linear_schedule(50, 0.0001, 0.02)
    s2 = NoiseSchedule.from_triple(s.to_triple())
    np.testing.assert_array_equal(s.alpha_bars, s2.alpha_bars)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5
    with pytest.raises(ValueError):
        s.check_t(51)
