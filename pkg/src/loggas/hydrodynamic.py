"""Deterministic large-N limit of the particle system.

Two independent routes to the limiting density rho_t and its transform M_t:

* a noise-free particle method: the quantiles of rho_0 follow the ODE
  obtained by dropping the Brownian term from the interacting system, and
* a strip PDE: M_t solves dM/dt = d/dz [ (beta/4) M^2 + V'(z) M + P_t(z) ]
  where P_t(z) = int (V'(x) - V'(z))/(x - z) X_t(dx) is, for polynomial V,
  a polynomial in z whose coefficients are moments of X_t. The moments are
  advanced by their own closed ODE system alongside the field.

The PDE route integrates along the complex characteristics dz/dt = -s,
s = (beta/2) M + V': the upstream point for the value at z is z + s dt,
which lies higher in the strip because Im s > 0 for a Herglotz field, so
each step samples in the direction where the field is smoother. Row-local
one-sided differences cannot do this: inside the support s is nearly
purely imaginary and either stencil side feeds the counter-analytic modes.
What is stepped is the deviation from the exact equilibrium field, which
makes the stationary solution a fixed point of the scheme to roundoff.

The particle route is primary; the PDE route is the cross-check.
"""

import json
import os
import numpy as np

from . import equilibrium as eq
from . import particle as pt
from . import stieltjes as st
from .stieltjes import DensityGrid, StripField

K_MOMENTS = 12
CFL = 0.4
RK4_BASE_STEPS = 400
KDE_FACTOR = 1.06  # Silverman bandwidth 1.06 sigma n^(-1/5)
HERGLOTZ_TOL = 0.05  # square-root edges are not grid-resolvable at b ~ da


class InstabilityError(RuntimeError):
    """The PDE field lost the positive-imaginary (Herglotz) property."""


class HydroSolution:
    """Time slices of the limiting measure in both representations."""

    def __init__(self, times, densities, stieltjes_fields, method_tag,
                 particles=None, moments=None):
        self.times = np.asarray(times, dtype=float)
        self.densities = densities
        self.stieltjes_fields = stieltjes_fields
        self.method_tag = method_tag
        self.particles = particles  # particle route: sorted quantile snapshots
        self.moments = moments  # pde route: moment trajectories
        self.work = None  # pde route: resumable state above the stored strip

    def observable(self, time_index, phi):
        """<X_t, phi> evaluated without kernel smoothing when possible."""
        if self.particles is not None:
            return float(np.mean(phi(self.particles[time_index])))
        d = self.densities[time_index]
        return float(np.trapezoid(phi(d.x) * d.values, d.x))


def default_strip_grid(a_half=4.0, n_a=257, center=0.0):
    a = center + np.linspace(-a_half, a_half, n_a)
    b = st.geometric_b_grid(b_max=st.B_MAX)
    return a, b


def empirical_strip_field(lam, a_grid, b_grid):
    """Exact Stieltjes transform of the empirical measure on the strip."""
    z = a_grid[:, None] + 1j * b_grid[None, :]
    vals = np.mean(1.0 / (lam[None, None, :] - z[:, :, None]), axis=2)
    return StripField(a_grid, b_grid, vals)


def kde_density(lam, x_grid):
    """Gaussian kernel estimate with Silverman bandwidth, renormalized.

    Bandwidth is clipped below at two grid steps so the kernel is resolved.
    """
    n = lam.size
    bw = KDE_FACTOR * np.std(lam) * n ** (-0.2)
    dx = x_grid[1] - x_grid[0]
    bw = max(bw, 2.0 * dx)
    u = (x_grid[:, None] - lam[None, :]) / bw
    vals = np.mean(np.exp(-0.5 * u * u), axis=1) / (bw * np.sqrt(2 * np.pi))
    g = DensityGrid(x_grid, vals)
    return DensityGrid(x_grid, vals / g.mass())


def _det_velocity(lam, pot, beta):
    out = -pot.deriv(lam, 1)
    if lam.size > 1:
        out = out + (beta / (2.0 * lam.size)) * pt._interaction_sum(lam)
    return out


def _rk4_ordered_step(lam, pot, beta, dt):
    """One RK4 step with ordering backoff; returns (new lam, dt used)."""
    for _ in range(pt.MAX_HALVINGS + 1):
        k1 = _det_velocity(lam, pot, beta)
        k2 = _det_velocity(lam + 0.5 * dt * k1, pot, beta)
        k3 = _det_velocity(lam + 0.5 * dt * k2, pot, beta)
        k4 = _det_velocity(lam + dt * k3, pot, beta)
        prop = lam + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if lam.size == 1 or np.min(np.diff(prop)) > 0.0:
            return prop, dt
        dt *= 0.5
    raise pt.StiffnessError("deterministic step could not preserve ordering")


def evolve_density_particle(rho0, pot, beta, t_final, n_det=512, n_times=11,
                            x_grid=None, a_grid=None, b_grid=None,
                            init_particles=None, dt_base=None):
    """Quantile-particle solution of the limiting equation.

    The stored densities are kernel estimates for rendering; quantitative
    work should use .particles or .observable, which bypass smoothing.
    """
    if init_particles is not None:
        lam = np.sort(np.asarray(init_particles, dtype=float))
    else:
        lam = pt.quantile_init(rho0, n_det)
    times = np.linspace(0.0, t_final, n_times)
    if dt_base is None:
        dt_base = t_final / RK4_BASE_STEPS
        if lam.size > 1:
            vmax = float(np.max(np.abs(_det_velocity(lam, pot, beta))))
            gap = float(np.min(np.diff(lam)))
            dt_base = min(dt_base, 0.2 * gap / max(vmax, 1e-12))
    if x_grid is None:
        span = lam[-1] - lam[0]
        pad = 0.75 * span + 1.0
        x_grid = np.linspace(lam[0] - pad, lam[-1] + pad, 801)
    if a_grid is None or b_grid is None:
        center = 0.5 * (lam[0] + lam[-1])
        half = 0.75 * (lam[-1] - lam[0]) + 2.0
        a_grid, b_grid = default_strip_grid(half, 257, center)

    snapshots, densities, fields = [], [], []
    t = 0.0
    for t_next in times:
        while t < t_next - 1e-12:
            lam, used = _rk4_ordered_step(lam, pot, beta, min(dt_base, t_next - t))
            t += used
        snapshots.append(lam.copy())
        densities.append(kde_density(lam, x_grid))
        fields.append(empirical_strip_field(lam, a_grid, b_grid))
    return HydroSolution(times, densities, fields, "particle",
                         particles=snapshots)


# ----------------------------------------------------------------- strip PDE


def _moment_rates(m, pot, beta, kmax):
    """d m_k / dt for the closed hierarchy; entries above kmax are frozen."""
    dcoef = np.polynomial.polynomial.polyder(pot.coeffs)
    rates = np.zeros_like(m)
    for k in range(1, kmax + 1):
        pull = 0.0
        for p, c in enumerate(dcoef):
            if c != 0.0:
                pull += c * m[p + k - 1]
        pair = 0.0
        for j in range(0, k - 1):
            pair += m[j] * m[k - 2 - j]
        rates[k] = -k * pull + beta * k / 4.0 * pair
    return rates


def _poly_part(m, pot, z):
    """P(z) = int (V'(x) - V'(z))/(x - z) X(dx) via moments of X."""
    dcoef = np.polynomial.polynomial.polyder(pot.coeffs)
    out = np.zeros_like(z)
    for p, c in enumerate(dcoef):
        if c == 0.0 or p == 0:
            continue
        for q in range(p):
            out = out + c * m[q] * z ** (p - 1 - q)
    return out


def _poly_part_deriv(m, pot, z):
    dcoef = np.polynomial.polynomial.polyder(pot.coeffs)
    out = np.zeros_like(z)
    for p, c in enumerate(dcoef):
        if c == 0.0 or p < 2:
            continue
        for q in range(p - 1):
            out = out + c * m[q] * (p - 1 - q) * z ** (p - 2 - q)
    return out


TAIL_TERMS = 5  # deviation tail keeps moment differences 1..5


def _tail_delta(z, dm):
    """-sum_k dm_k / z^(k+1): the deviation field far from the support."""
    out = np.zeros(np.shape(z), dtype=complex)
    zp = z * z
    for k in range(1, TAIL_TERMS + 1):
        out = out - dm[k] / zp
        zp = zp * z
    return out


def _sample_delta(D, a, b, logb, dm, zq):
    """Deviation field at arbitrary strip points, bilinear in (a, log b).

    Points outside the working box fall back to the moment-difference tail;
    points below the bottom row are clamped onto it (upstream points always
    climb while the field is Herglotz, so that branch is defensive only).
    """
    aq = np.ravel(zq.real)
    bq = np.clip(np.ravel(zq.imag), b[0], None)
    out = np.empty(aq.size, dtype=complex)
    outside = (aq < a[0]) | (aq > a[-1]) | (bq > b[-1])
    if np.any(outside):
        out[outside] = _tail_delta(aq[outside] + 1j * bq[outside], dm)
    ins = ~outside
    if np.any(ins):
        ai, lbi = aq[ins], np.log(bq[ins])
        ia = np.clip(np.searchsorted(a, ai) - 1, 0, a.size - 2)
        ib = np.clip(np.searchsorted(logb, lbi) - 1, 0, logb.size - 2)
        ta = (ai - a[ia]) / (a[ia + 1] - a[ia])
        tb = (lbi - logb[ib]) / (logb[ib + 1] - logb[ib])
        out[ins] = ((1 - ta) * (1 - tb) * D[ia, ib]
                    + ta * (1 - tb) * D[ia + 1, ib]
                    + (1 - ta) * tb * D[ia, ib + 1]
                    + ta * tb * D[ia + 1, ib + 1])
    return out.reshape(zq.shape)


def _stationary_reference(pot, beta, n_mom):
    """Exact stationary field, its derivative, and moments, for subtraction.

    When the potential has no one-cut equilibrium (free evolution, say) the
    reference is zero and the plain form of the equation is recovered.
    """
    try:
        eqm = eq.solve_cut_equation(pot, beta)
    except (eq.SolverError, eq.MultiCutError):
        def zero(z):
            return np.zeros(np.shape(z), dtype=complex)

        return zero, zero, np.zeros(n_mom + 1)
    g = eqm.g_coeffs
    keep = np.nonzero(np.abs(g) > 1e-13 * np.max(np.abs(g)))[0]
    eqm.g_coeffs = g[: keep[-1] + 1]  # polynomial V: only a few terms survive
    d = eqm.density
    m_ref = np.array([float(np.trapezoid(d.values * d.x**k, d.x))
                      for k in range(n_mom + 1)])
    m_ref[0] = 1.0  # match the normalization forced on the evolved moments
    return (lambda z: eq.equilibrium_stieltjes_exact(eqm, z),
            lambda z: eq.equilibrium_stieltjes_deriv(eqm, z),
            m_ref)


def evolve_stieltjes_pde(M0, pot, beta, t_final, moments0=None, rho0=None,
                         n_times=11, kmax=K_MOMENTS, resume=None):
    """Advance the strip field by the nonlocal complex transport equation.

    moments0 (or rho0, from which moments are integrated) seeds the moment
    ODEs that close the polynomial part; the harmonic case needs none. The
    deviation from the exact stationary field is stepped with a midpoint
    rule along the characteristics z -> z + s dt, and the Herglotz property
    Im M > 0 is enforced after every step.

    resume accepts the .work payload of a previous solution on the same
    grid, restoring the rows above the stored strip exactly so that runs
    compose: evolve to T/2, resume to T/2 again, equals evolve to T.
    """
    deg = int(pot.degree)
    need = kmax + max(deg - 1, 1)
    if moments0 is None and resume is None:
        if rho0 is not None:
            moments0 = [
                float(np.trapezoid(rho0.values * rho0.x**k, rho0.x))
                for k in range(need + 1)
            ]
        elif deg <= 2:
            moments0 = [1.0] + [0.0] * need  # harmonic closure ignores these
        else:
            raise ValueError("non-harmonic potential needs moments0 or rho0")

    a, b_store = M0.a_grid, M0.b_grid
    nb_store = b_store.size
    da = M0.da
    # working rows above the stored strip: upstream points climb over time,
    # and the moment tail is only trustworthy once |z| is a few support radii
    ratio = b_store[-1] / b_store[-2]
    b_hi = max(2.0, 0.375 * (a[-1] - a[0]))
    rows = [b_store]
    top = b_store[-1]
    while top < b_hi:
        top *= ratio
        rows.append(np.array([top]))
    b = np.concatenate(rows)
    logb = np.log(b)
    z = a[:, None] + 1j * b[None, :]

    ref, dref, m_ref = _stationary_reference(pot, beta, need)
    Mref_grid = ref(z)
    if resume is not None:
        if resume["D"].shape != z.shape:
            raise ValueError("resume payload does not match the strip grid")
        D = resume["D"].copy()
        m = resume["m"].copy()
    else:
        m = np.asarray(moments0, dtype=float)
        if m.size < need + 1:
            m = np.concatenate([m, np.zeros(need + 1 - m.size)])
        m[0] = 1.0
        dm = m - m_ref
        D = np.zeros(z.shape, dtype=complex)
        D[:, :nb_store] = M0.values.astype(complex) - Mref_grid[:, :nb_store]
        if nb_store < b.size:
            z_ext = z[:, nb_store:]
            if rho0 is not None:
                D[:, nb_store:] = st.stieltjes_density(rho0, z_ext) - Mref_grid[:, nb_store:]
            else:
                D[:, nb_store:] = _tail_delta(z_ext, dm)
    dm = m - m_ref
    if np.min((Mref_grid + D).imag) <= -HERGLOTZ_TOL:
        raise InstabilityError("initial field is not Herglotz (Im M <= 0)")

    times = np.linspace(0.0, t_final, n_times)
    out_fields = [StripField(a, b_store, (Mref_grid + D)[:, :nb_store].copy())]
    out_moments = [m.copy()]

    t = 0.0
    for t_next in times[1:]:
        while t < t_next - 1e-12:
            s0 = 0.5 * beta * (Mref_grid + D) + pot.deriv(z, 1)
            smax = float(np.max(np.abs(s0)))
            dt = min(CFL * da / max(smax, 1e-12), t_next - t)
            # midpoint along the characteristic; the deviation obeys
            # dD/dt = [(beta/2) Mref' + V''] D + Q'(z) along dz/dt = -s
            z_mid = z + 0.5 * dt * s0
            D_mid = _sample_delta(D, a, b, logb, dm, z_mid)
            s_mid = 0.5 * beta * (ref(z_mid) + D_mid) + pot.deriv(z_mid, 1)
            q1 = _moment_rates(m, pot, beta, kmax)
            q2 = _moment_rates(m + 0.5 * dt * q1, pot, beta, kmax)
            q3 = _moment_rates(m + 0.5 * dt * q2, pot, beta, kmax)
            q4 = _moment_rates(m + dt * q3, pot, beta, kmax)
            dm_mid = (m + 0.5 * dt * q1) - m_ref
            coef = 0.5 * beta * dref(z_mid) + pot.deriv(z_mid, 2)
            src = coef * D_mid + _poly_part_deriv(dm_mid, pot, z_mid)
            D = _sample_delta(D, a, b, logb, dm, z + dt * s_mid) + dt * src
            m = m + dt / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)
            dm = m - m_ref
            t += dt
            # a strict check would trip on benign overshoot in the bottom
            # cells next to a support edge; macroscopic negativity is what
            # signals an actual instability
            if np.min((Mref_grid + D).imag) <= -HERGLOTZ_TOL:
                raise InstabilityError(
                    f"Im M <= 0 at t={t:.6g}; field left the Herglotz class"
                )
        out_fields.append(StripField(a, b_store, (Mref_grid + D)[:, :nb_store].copy()))
        out_moments.append(m.copy())

    densities = [_plemelj_density(f) for f in out_fields]
    sol = HydroSolution(times, densities, out_fields, "stieltjes_pde",
                        moments=out_moments)
    sol.work = {"D": D.copy(), "m": m.copy(), "b": b.copy()}
    return sol


def _plemelj_density(field, n_rows=4):
    """Column-wise boundary extrapolation of Im M / pi to the real axis.

    Renormalized to unit mass, matching the kernel-density route; the
    moment system carries the exactly conserved mass.
    """
    bs = field.b_grid[:n_rows][::-1]  # decreasing
    vals = np.empty(field.a_grid.size)
    for i in range(field.a_grid.size):
        col = field.values[i, :n_rows][::-1]
        dens, _ = st.plemelj_extract(col, bs)
        vals[i] = max(dens, 0.0)
    g = DensityGrid(field.a_grid, vals)
    mass = g.mass()
    if mass > 0.0:
        g = DensityGrid(field.a_grid, vals / mass)
    return g


def stationarity_residual(rho, pot, beta, phis=None):
    """Weak-form size of the right side of the limiting equation at rho.

    d/dt <rho, phi> = -int (V' - (beta/2) pv-convolution) rho phi' dx; the
    p.v. term is evaluated by the regularized principal value on the grid.
    Returns the max absolute rate over a fixed panel of smooth phi.
    """
    x, vals = rho.x, rho.values
    if phis is None:
        phis = [
            lambda y: y,
            lambda y: y**2 / 2.0,
            lambda y: y**3 / 3.0,
            lambda y: np.exp(-(y**2) / 2.0),
            lambda y: np.tanh(y),
        ]
    support = vals > 1e-12 * np.max(vals)
    # the p.v. diverges logarithmically at the exact grid ends; the weak
    # integral is still finite, so skip those two points
    support[0] = support[-1] = False
    pv = np.zeros_like(x)
    pv[support] = np.array([st.pv_integral(rho, xx) for xx in x[support]])
    force = (pot.deriv(x, 1) - 0.5 * beta * pv) * vals
    worst = 0.0
    eps = 1e-6
    for phi in phis:
        dphi = (phi(x + eps) - phi(x - eps)) / (2 * eps)
        worst = max(worst, abs(float(np.trapezoid(force * dphi, x))))
    return worst


def export_hydro(sol, outdir, parameters=None):
    """Directory layout: densities/*.csv, stieltjes/*.csv, manifest.json."""
    dens_dir = os.path.join(outdir, "densities")
    stj_dir = os.path.join(outdir, "stieltjes")
    os.makedirs(dens_dir, exist_ok=True)
    os.makedirs(stj_dir, exist_ok=True)
    for i, t in enumerate(sol.times):
        st.density_to_csv(sol.densities[i], os.path.join(dens_dir, f"t{i:03d}.csv"))
        st.strip_to_csv(sol.stieltjes_fields[i], os.path.join(stj_dir, f"t{i:03d}.csv"))
    manifest = {
        "times": sol.times.tolist(),
        "method_tag": sol.method_tag,
        "parameters": parameters or {},
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return outdir
