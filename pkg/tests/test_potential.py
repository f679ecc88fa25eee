import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from loggas.potential import (
    PotentialSpec,
    UnsupportedOrderError,
    eval_derivatives,
    convexity_check,
    taylor_remainder_W,
)


def test_harmonic_derivatives():
    pot = PotentialSpec.harmonic()
    assert eval_derivatives(pot, 3.0, 3) == [4.5, 3.0, 1.0, 0.0]
    assert pot.deriv(-2.0, 1) == -2.0


def test_harmonic_scale():
    pot = PotentialSpec.harmonic(scale=2.0)
    assert pot.deriv(1.0, 0) == 1.0
    assert pot.deriv(1.0, 2) == 2.0


def test_landau_ginzburg_derivatives():
    # V = x^2/2 + lam x^4/4
    pot = PotentialSpec.landau_ginzburg(1.0)
    assert eval_derivatives(pot, 1.0, 4) == [0.75, 2.0, 4.0, 6.0, 6.0]
    assert pot.deriv(1.0, 5) == 0.0


def test_zero_trim_and_validation():
    pot = PotentialSpec.polynomial([0.0, 0.0, 0.5, 0.0])
    assert pot.degree == 2
    with pytest.raises(ValueError):
        PotentialSpec.polynomial([0.0, 1.0])  # odd degree
    with pytest.raises(ValueError):
        PotentialSpec.polynomial([0.0, 0.0, -1.0])  # not confining
    with pytest.raises(ValueError):
        PotentialSpec.landau_ginzburg(-0.5)


def test_order_cap():
    pot = PotentialSpec.harmonic()
    with pytest.raises(UnsupportedOrderError):
        eval_derivatives(pot, 0.0, 12)
    # order 11 itself is fine
    assert len(eval_derivatives(pot, 0.0, 11)) == 12


@settings(max_examples=40, deadline=None)
@given(
    c2=hst.floats(0.1, 3.0),
    c4=hst.floats(0.0, 2.0),
    x=hst.floats(-4.0, 4.0),
)
def test_first_derivative_matches_difference_quotient(c2, c4, x):
    pot = PotentialSpec.polynomial([0.0, 0.0, c2 / 2, 0.0, c4 / 4])
    eps = 1e-6
    fd = (pot.deriv(x + eps, 0) - pot.deriv(x - eps, 0)) / (2 * eps)
    assert pot.deriv(x, 1) == pytest.approx(fd, abs=1e-4, rel=1e-4)


def test_deriv_vectorized_matches_scalar():
    pot = PotentialSpec.landau_ginzburg(0.7)
    xs = np.linspace(-2, 2, 9)
    vec = pot.deriv(xs, 2)
    assert np.allclose(vec, [pot.deriv(float(x), 2) for x in xs])


def test_convexity_check():
    ok, m = convexity_check(PotentialSpec.harmonic(), (-5.0, 5.0))
    assert ok and m == pytest.approx(1.0)
    ok, _ = convexity_check(PotentialSpec.landau_ginzburg(1.0), (-3.0, 3.0))
    assert ok
    # double well: V'' = -1 + 3 x^2 < 0 near the origin
    dw = PotentialSpec.polynomial([0.0, 0.0, -0.25, 0.0, 0.25])
    ok, m = convexity_check(dw, (-1.0, 1.0))
    assert not ok and m < 0


def test_taylor_remainder_cubic_weight():
    # V'(a+u) minus its second order Taylor polynomial equals u^3 W(a, u)
    pot = PotentialSpec.landau_ginzburg(1.0)
    assert taylor_remainder_W(pot, 1.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    a, u = 0.4, 0.9
    lhs = pot.deriv(a + u, 1) - (
        pot.deriv(a, 1) + pot.deriv(a, 2) * u + 0.5 * pot.deriv(a, 3) * u**2
    )
    assert taylor_remainder_W(pot, a, u) == pytest.approx(lhs / u**3, rel=1e-10)


def test_taylor_remainder_zero_limit():
    pot = PotentialSpec.landau_ginzburg(1.0)
    # u -> 0 limit is V''''(a)/6
    assert taylor_remainder_W(pot, 0.0, 0.0) == pytest.approx(1.0)
    assert taylor_remainder_W(pot, 0.7, 0.0) == pytest.approx(1.0)
    # no cancellation blowup for tiny u
    assert taylor_remainder_W(pot, 0.3, 1e-9) == pytest.approx(1.0, rel=1e-6)


def test_taylor_remainder_vectorized_and_harmonic():
    pot = PotentialSpec.harmonic()
    us = np.linspace(-2, 2, 11)
    assert np.allclose(taylor_remainder_W(pot, 0.5, us), 0.0)
    lg = PotentialSpec.landau_ginzburg(2.0)
    vals = taylor_remainder_W(lg, 0.0, us)
    scalars = [taylor_remainder_W(lg, 0.0, float(u)) for u in us]
    assert np.allclose(vals, scalars)


def test_dict_round_trip():
    pot = PotentialSpec.landau_ginzburg(0.3)
    clone = PotentialSpec.from_dict(pot.to_dict())
    assert clone.kind == pot.kind
    assert np.allclose(clone.coeffs, pot.coeffs)
    xs = np.linspace(-1, 1, 5)
    assert np.allclose(clone.deriv(xs, 3), pot.deriv(xs, 3))
