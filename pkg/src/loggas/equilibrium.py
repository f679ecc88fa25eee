"""One-cut equilibrium measures for convex confining potentials.

The equilibrium density solves the singular integral equation

    p.v. integral rho(x) dx / (x - y) = -(2/beta) V'(y),  y in [a-, a+],

with rho >= 0, mass 1, and soft edges. Writing g = (2/beta) V' and expanding
g(center + radius*xi) in Chebyshev polynomials T_k, the bounded solution on a
single cut is

    rho(center + radius*u) = sqrt(1 - u^2)/pi * sum_{k>=1} g_k U_{k-1}(u),

and the endpoint conditions reduce to g_0 = 0 and radius*g_1/2 = 1. Those two
scalar equations determine (center, radius) by Newton iteration; mass 1 is
then automatic. The Stieltjes transform has the exact series

    M(z) = -sum_{k>=1} g_k phi(w)^k,  w = (z - center)/radius,

with phi(w) = w - sqrt(w^2 - 1) the inverse Joukowski map, |phi| <= 1.
"""

import json

import numpy as np
from scipy.fft import dct

from .potential import convexity_check
from .stieltjes import DensityGrid

N_CHEB_DEFAULT = 64
NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-12


class SolverError(RuntimeError):
    pass


class MultiCutError(RuntimeError):
    pass


class EquilibriumMeasure:
    def __init__(self, center, radius, g_coeffs, beta, potential, density,
                 residual):
        self.center = float(center)
        self.radius = float(radius)
        self.g_coeffs = np.asarray(g_coeffs, dtype=float)
        self.beta = float(beta)
        self.potential = potential
        self.density = density
        self.residual = float(residual)

    @property
    def support(self):
        return (self.center - self.radius, self.center + self.radius)

    def edge_radius(self):
        return self.radius

    def density_at(self, x):
        """Density values by the exact Chebyshev form (0 outside support)."""
        x = np.asarray(x, dtype=float)
        u = (x - self.center) / self.radius
        inside = np.abs(u) < 1.0
        out = np.zeros_like(u, dtype=float)
        if np.any(inside):
            ui = u[inside]
            out[inside] = np.sqrt(1.0 - ui * ui) / np.pi * self._S(ui)
        return out if out.ndim else float(out)

    def _S(self, u):
        """S(u) = sum_{k>=1} g_k U_{k-1}(u), via d/du of a T-series."""
        g = self.g_coeffs
        c = np.zeros_like(g)
        c[1:] = g[1:] / np.arange(1, g.size)
        return np.polynomial.chebyshev.chebval(u, np.polynomial.chebyshev.chebder(c))

    def to_record(self):
        return {
            "support": list(self.support),
            "beta": self.beta,
            "residual": self.residual,
            "n_cheb": int(self.g_coeffs.size),
            "potential": self.potential.to_dict(),
        }


def _g_cheb(pot, beta, center, radius, n):
    """Chebyshev coefficients of g(center + radius*xi), g = (2/beta) V'."""
    j = np.arange(n)
    theta = (2 * j + 1) * np.pi / (2 * n)
    xi = np.cos(theta)
    vals = (2.0 / beta) * pot.deriv(center + radius * xi, 1)
    c = dct(vals, type=2) / n  # c[k] = (2/n) sum vals_j cos(k theta_j)
    c[0] *= 0.5
    return c


def _endpoint_conditions(pot, beta, center, radius, n):
    g = _g_cheb(pot, beta, center, radius, n)
    return np.array([g[0], 0.5 * radius * g[1] - 1.0]), g


def solve_cut_equation(pot, beta, n_cheb=N_CHEB_DEFAULT, n_grid=2001):
    """Solve the one-cut equilibrium problem for a convex potential.

    Newton iteration on (center, radius) drives the two endpoint conditions
    to zero; the density follows in closed Chebyshev form. Raises SolverError
    on non-convergence and MultiCutError if the one-cut ansatz produces a
    negative density.
    """
    if beta < 1.0:
        raise ValueError("beta must be >= 1")
    if pot.degree < 2:
        raise SolverError("potential is not confining; no equilibrium measure")
    # initial guess: minimize V for the center, harmonic radius estimate
    center = 0.0
    for _ in range(100):
        v2 = pot.deriv(center, 2)
        if v2 <= 0:
            break
        step = pot.deriv(center, 1) / v2
        center -= step
        if abs(step) < 1e-14:
            break
    v2c = max(pot.deriv(center, 2), 1e-8)
    radius = float(np.sqrt(beta / v2c))

    theta = np.array([center, radius])
    res, _ = _endpoint_conditions(pot, beta, theta[0], theta[1], n_cheb)
    for _ in range(NEWTON_MAX_ITER):
        if np.max(np.abs(res)) < NEWTON_TOL:
            break
        jac = np.empty((2, 2))
        for k in range(2):
            eps = 1e-7 * max(1.0, abs(theta[k]))
            bumped = theta.copy()
            bumped[k] += eps
            res_b, _ = _endpoint_conditions(pot, beta, bumped[0], bumped[1], n_cheb)
            jac[:, k] = (res_b - res) / eps
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Newton system: {exc}") from exc
        theta = theta - step
        if theta[1] <= 0:
            theta[1] = 0.5 * (theta[1] + step[1])  # keep radius positive
        res, _ = _endpoint_conditions(pot, beta, theta[0], theta[1], n_cheb)
    else:
        raise SolverError(
            f"Newton did not converge; last residual {np.max(np.abs(res)):.3e}"
        )
    center, radius = float(theta[0]), float(theta[1])

    ok, vmin = convexity_check(pot, (center - 2 * radius, center + 2 * radius), 257)
    if not ok:
        raise MultiCutError(f"potential not convex near the cut (min V''={vmin:.3e})")

    _, g = _endpoint_conditions(pot, beta, center, radius, n_cheb)
    eqm = EquilibriumMeasure(center, radius, g, beta, pot, None, np.nan)
    xs = np.linspace(center - radius, center + radius, n_grid)
    vals = eqm.density_at(xs)
    if np.min(vals) < -1e-10:
        raise MultiCutError(
            f"negative density {np.min(vals):.3e}; one-cut ansatz inconsistent"
        )
    eqm.density = DensityGrid(xs, np.maximum(vals, 0.0))
    eqm.residual = cut_residual(eqm)
    return eqm


def cut_residual(eqm, ys=None):
    """Sup over interior collocation of |p.v. integral + (2/beta) V'|.

    The principal value is evaluated with the substitution x = center +
    radius*cos(theta), where the integrand becomes a trigonometric polynomial
    minus its value at the singular angle; the uniform theta rule then
    integrates it exactly, so the residual reflects only the solve itself.
    """
    if ys is None:
        u = np.cos(np.linspace(0.08 * np.pi, 0.92 * np.pi, 101))
        ys = eqm.center + eqm.radius * u
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    n_theta = 4 * eqm.g_coeffs.size + 64
    theta = np.linspace(0.0, np.pi, n_theta + 1)
    ct = np.cos(theta)
    st2 = 1.0 - ct * ct
    N_theta = st2 * eqm._S(ct)
    worst = 0.0
    for y in ys:
        v = (y - eqm.center) / eqm.radius
        if not (-1.0 < v < 1.0):
            raise ValueError("collocation point outside the cut")
        N_v = (1.0 - v * v) * eqm._S(v)
        diff = ct - v
        with np.errstate(divide="ignore", invalid="ignore"):
            integ = (N_theta - N_v) / diff
        bad = np.abs(diff) < 1e-12
        if np.any(bad):
            # removable point: limit is -N'(theta0)/sin(theta0)
            h = 1e-6
            integ[bad] = (
                ((1 - (v + h) ** 2) * eqm._S(v + h) - (1 - (v - h) ** 2) * eqm._S(v - h))
                / (2 * h)
            )
        pv = np.trapezoid(integ, theta) / np.pi
        target = -(2.0 / eqm.beta) * eqm.potential.deriv(y, 1)
        worst = max(worst, abs(pv - target))
    return float(worst)


def _joukowski_inverse(w):
    """phi(w) = w - sqrt(w^2-1) on the branch with |phi| <= 1."""
    w = np.asarray(w, dtype=complex)
    sq = np.sqrt(w * w - 1.0)
    phi = w - sq
    other = w + sq
    swap = np.abs(phi) > np.abs(other)
    phi = np.where(swap, other, phi)
    sq = np.where(swap, -sq, sq)
    return phi, sq


def equilibrium_stieltjes_exact(eqm, z):
    """M(z) by the exact inverse-Joukowski series (any z off the cut)."""
    w = (np.asarray(z, dtype=complex) - eqm.center) / eqm.radius
    phi, _ = _joukowski_inverse(w)
    g = eqm.g_coeffs
    acc = np.zeros_like(phi)
    p = np.ones_like(phi)
    for k in range(1, g.size):
        p = p * phi
        acc = acc + g[k] * p
    return -acc if acc.ndim else complex(-acc)


def equilibrium_stieltjes_deriv(eqm, z):
    """M'(z) for the exact series; branch matched to the transform."""
    w = (np.asarray(z, dtype=complex) - eqm.center) / eqm.radius
    phi, sq = _joukowski_inverse(w)
    g = eqm.g_coeffs
    acc = np.zeros_like(phi)
    p = np.ones_like(phi)
    for k in range(1, g.size):
        p = p * phi
        acc = acc + k * g[k] * p
    out = acc / (eqm.radius * sq)
    return out if out.ndim else complex(out)


def equilibrium_stieltjes(eqm, z, n_quad=512):
    """M(z) by Gauss-Chebyshev quadrature of the density.

    Spectral accuracy for z off the real axis; use boundary_values for the
    on-cut limits.
    """
    z = np.asarray(z, dtype=complex)
    if np.any((z.imag == 0.0) & (np.abs(z.real - eqm.center) <= eqm.radius)):
        raise ValueError("z on the cut: use boundary_values")
    j = np.arange(1, n_quad + 1)
    t = j * np.pi / (n_quad + 1)
    u = np.cos(t)
    w = np.pi / (n_quad + 1) * np.sin(t) ** 2
    S = eqm._S(u)
    x = eqm.center + eqm.radius * u
    if z.ndim == 0:
        return complex(eqm.radius / np.pi * np.sum(w * S / (x - complex(z))))
    flat = z.ravel()
    vals = [eqm.radius / np.pi * np.sum(w * S / (x - zz)) for zz in flat]
    out = np.empty(z.shape, dtype=complex)
    out.ravel()[:] = vals
    return out


def boundary_values(eqm, x):
    """(M(x+i0), M(x-i0)) for x inside the support, exact.

    They satisfy M+ + M- = -(4/beta) V'(x) and M+ - M- = 2*pi*i*rho(x).
    """
    u = (np.asarray(x, dtype=float) - eqm.center) / eqm.radius
    if np.any(np.abs(u) >= 1.0):
        raise ValueError("x must lie strictly inside the support")
    theta = np.arccos(u)
    g = eqm.g_coeffs
    k = np.arange(1, g.size)
    phase = np.exp(-1j * np.outer(np.atleast_1d(theta), k))
    Mp = -(phase @ g[1:])
    Mm = np.conj(Mp)
    if np.ndim(x) == 0:
        return complex(Mp[0]), complex(Mm[0])
    return Mp, Mm


def equilibrium_to_json(eqm, path):
    with open(path, "w") as fh:
        json.dump(eqm.to_record(), fh, indent=2)
