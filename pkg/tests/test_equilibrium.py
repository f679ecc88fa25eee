import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from loggas.potential import PotentialSpec
from loggas import equilibrium as eq

# Reference values computed independently with adaptive quadrature before this
# module existed. The quartic case is V = x^2/2 + x^4/4 at beta = 2, whose
# support radius solves 3 r^4 + 4 r^2 - 8 = 0, i.e. r^2 = (2/3)(sqrt(7) - 1).
SC_RADIUS = 1.4142135623730951
RHO_SC_0 = 0.45015815807855303
QUARTIC_RADIUS = 1.0474576558074924
QUARTIC_RHO_0 = 0.5163228033602452
QUARTIC_RHO_05 = 0.5269451980335935
QUARTIC_RHO_10 = 0.2528771835992859
QUARTIC_G1 = 1.9093850609724041
QUARTIC_G3 = 0.2873091350549706


@pytest.fixture(scope="module")
def sc():
    return eq.solve_cut_equation(PotentialSpec.harmonic(), beta=2.0)


@pytest.fixture(scope="module")
def quartic():
    return eq.solve_cut_equation(PotentialSpec.landau_ginzburg(1.0), beta=2.0)


def test_semicircle_support_and_density(sc):
    lo, hi = sc.support
    assert lo == pytest.approx(-SC_RADIUS, abs=1e-10)
    assert hi == pytest.approx(SC_RADIUS, abs=1e-10)
    assert sc.density_at(0.0) == pytest.approx(RHO_SC_0, abs=1e-12)
    # semicircle profile across the support
    xs = np.linspace(-1.2, 1.2, 25)
    ref = np.sqrt(2.0 - xs * xs) / np.pi
    assert np.allclose(sc.density_at(xs), ref, atol=1e-10)


def test_semicircle_mass_and_residual(sc):
    # normalization is exact at the coefficient level; the rendered grid
    # carries trapezoid error from the sqrt edges
    assert sc.radius * sc.g_coeffs[1] / 2.0 == pytest.approx(1.0, abs=1e-12)
    assert sc.density.mass() == pytest.approx(1.0, abs=1e-4)
    assert sc.residual < 1e-6


def test_harmonic_radius_scales_with_beta_and_curvature():
    # V = c x^2 / 2 gives radius sqrt(beta / c)
    for beta, c in ((1.0, 1.0), (4.0, 1.0), (2.0, 2.0)):
        m = eq.solve_cut_equation(PotentialSpec.harmonic(scale=c), beta=beta)
        assert m.radius == pytest.approx(np.sqrt(beta / c), abs=1e-9)
        assert m.center == pytest.approx(0.0, abs=1e-9)


def test_shifted_harmonic_center():
    # V = (x - 1)^2 / 2: same radius, center moves to 1
    pot = PotentialSpec.polynomial([0.5, -1.0, 0.5])
    m = eq.solve_cut_equation(pot, beta=2.0)
    assert m.center == pytest.approx(1.0, abs=1e-9)
    assert m.radius == pytest.approx(SC_RADIUS, abs=1e-9)
    assert m.density_at(1.0) == pytest.approx(RHO_SC_0, abs=1e-10)


def test_quartic_frozen_values(quartic):
    assert quartic.radius == pytest.approx(QUARTIC_RADIUS, abs=1e-10)
    assert quartic.density_at(0.0) == pytest.approx(QUARTIC_RHO_0, abs=1e-10)
    assert quartic.density_at(0.5) == pytest.approx(QUARTIC_RHO_05, abs=1e-10)
    assert quartic.density_at(1.0) == pytest.approx(QUARTIC_RHO_10, abs=1e-10)
    assert quartic.g_coeffs[1] == pytest.approx(QUARTIC_G1, abs=1e-10)
    assert quartic.g_coeffs[3] == pytest.approx(QUARTIC_G3, abs=1e-10)


def test_quartic_even_coefficients_vanish(quartic):
    # even potential: only odd Chebyshev modes survive
    even = quartic.g_coeffs[0::2]
    assert np.max(np.abs(even)) < 1e-12


def test_quartic_residual_and_mass(quartic):
    assert quartic.residual < 1e-6
    assert quartic.radius * quartic.g_coeffs[1] / 2.0 == pytest.approx(
        1.0, abs=1e-12
    )
    assert quartic.density.mass() == pytest.approx(1.0, abs=1e-4)


def test_cut_residual_explicit_points(quartic):
    ys = np.linspace(-0.8, 0.8, 7) * quartic.radius
    assert eq.cut_residual(quartic, ys) < 1e-6


def test_exact_stieltjes_semicircle(sc):
    m = eq.equilibrium_stieltjes_exact(sc, 2j)
    assert m == pytest.approx(1j * (np.sqrt(6.0) - 2.0), abs=1e-12)
    # matches direct quadrature of the solved density
    q = eq.equilibrium_stieltjes(sc, 2j)
    assert abs(m - q) < 1e-9


def test_exact_stieltjes_far_field(quartic):
    # M(z) ~ -1/z - m_1/z^2 - ... with m_1 = 0 for an even potential
    z = 50j
    m = eq.equilibrium_stieltjes_exact(quartic, z)
    assert abs(m + 1.0 / z) < 1e-4


def test_stieltjes_agree_off_axis(quartic):
    for z in (1 + 0.5j, -0.3 + 0.2j, 2j, 0.7 - 0.4j):
        a = eq.equilibrium_stieltjes_exact(quartic, z)
        b = eq.equilibrium_stieltjes(quartic, z)
        assert abs(a - b) < 1e-7


def test_stieltjes_derivative(quartic):
    z = 0.4 + 0.3j
    eps = 1e-6
    fd = (
        eq.equilibrium_stieltjes_exact(quartic, z + eps)
        - eq.equilibrium_stieltjes_exact(quartic, z - eps)
    ) / (2 * eps)
    assert eq.equilibrium_stieltjes_deriv(quartic, z) == pytest.approx(
        fd, abs=1e-7
    )


def test_stieltjes_on_cut_raises(sc):
    with pytest.raises(ValueError):
        eq.equilibrium_stieltjes(sc, 0.3)


def test_boundary_values_jump_and_sum(quartic):
    beta = quartic.beta
    for x in (0.0, 0.4, -0.7, 0.9):
        mp, mm = eq.boundary_values(quartic, x)
        # jump gives the density, sum gives the principal value relation
        dens = (mp - mm) / (2j * np.pi)
        assert dens.imag == pytest.approx(0.0, abs=1e-12)
        assert dens.real == pytest.approx(quartic.density_at(x), abs=1e-10)
        force = -(4.0 / beta) * quartic.potential.deriv(x, 1)
        assert (mp + mm).real == pytest.approx(force, abs=1e-10)
        assert mp.imag > 0.0


def test_beta_below_one_rejected():
    with pytest.raises(ValueError):
        eq.solve_cut_equation(PotentialSpec.harmonic(), beta=0.5)


def test_double_well_raises_multicut():
    dw = PotentialSpec.polynomial([0.0, 0.0, -0.5, 0.0, 0.25])
    with pytest.raises(eq.MultiCutError):
        eq.solve_cut_equation(dw, beta=2.0)


@settings(max_examples=10, deadline=None)
@given(c2=hst.floats(0.3, 2.0), c4=hst.floats(0.05, 1.0), beta=hst.floats(1.0, 4.0))
def test_random_convex_quartics_solve_cleanly(c2, c4, beta):
    pot = PotentialSpec.polynomial([0.0, 0.0, c2 / 2, 0.0, c4 / 4])
    m = eq.solve_cut_equation(pot, beta=beta)
    assert m.residual < 1e-8
    assert m.density.mass() == pytest.approx(1.0, abs=1e-4)
    assert np.all(m.density.values >= -1e-12)
    # boundary relation doubles as an independent check of the solve
    mp, mm = eq.boundary_values(m, 0.3 * m.radius)
    force = -(4.0 / beta) * pot.deriv(m.center + 0.3 * m.radius, 1)
    assert (mp + mm).real == pytest.approx(force, abs=1e-8)


def test_to_record(quartic):
    rec = quartic.to_record()
    assert rec["beta"] == 2.0
    lo, hi = rec["support"]
    assert hi - lo == pytest.approx(2 * QUARTIC_RADIUS, abs=1e-9)
    assert rec["residual"] < 1e-6
