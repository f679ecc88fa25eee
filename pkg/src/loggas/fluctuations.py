"""Monte Carlo statistics of the rescaled deviation from the deterministic
limit.

The central object is the fluctuation pairing N(<X^N_t, phi> - <X_t, phi>)
sampled over independent replicas.  The module builds the Gaussian
prediction for its terminal law by evolving the test function backward,
compares samples against it (normality plus characteristic function), and
runs two self-consistency probes: the pathwise compensator identity and the
size of the centered Stieltjes transform on the strip.

Aggregation always runs in replica order, so every statistic is bitwise
reproducible from the master seed.
"""

import csv
import json
import math
import warnings

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import stats as sps

from . import particle as pt
from . import stieltjes as st
from .equilibrium import EquilibriumMeasure, equilibrium_stieltjes_exact
from .generators import MeasurePath, evolve_test_function
from .potential import PotentialSpec

POWER_FLOOR = 500


class PanelFunction:
    """One real test function with an identifier and optional extras.

    poly holds power-basis coefficients valid where the window equals one;
    the pathwise accumulators need them, plain sampling does not.
    """

    def __init__(self, phi_id, fn, poly=None):
        self.phi_id = str(phi_id)
        self.fn = fn
        self.poly = None if poly is None else np.asarray(poly, dtype=float)

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def __repr__(self):
        return f"PanelFunction({self.phi_id!r})"


def standard_panel(window_R, z_points=(1j, 0.5j, 1.0 + 0.5j)):
    """Shipped test functions: windowed monomials x, x^2, x^3, windowed
    real and imaginary Cauchy kernels at the given strip points, and one
    smooth compactly supported bump."""
    R = float(window_R)

    def windowed(g):
        return lambda x: st.mollifier_chi(x, R) * g(x)

    def bump(x):
        u = np.clip(np.abs(x) / R, 0.0, 1.0)
        out = np.zeros_like(u)
        inside = u < 1.0
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
        return out

    panel = [
        PanelFunction("x", windowed(lambda x: x), poly=[0.0, 1.0]),
        PanelFunction("x2", windowed(lambda x: x**2), poly=[0.0, 0.0, 1.0]),
        PanelFunction(
            "x3", windowed(lambda x: x**3), poly=[0.0, 0.0, 0.0, 1.0]
        ),
    ]
    for z in z_points:
        z = complex(z)
        zid = f"{z.real:g}{z.imag:+g}i"
        panel.append(
            PanelFunction(
                f"re_f_{zid}", windowed(lambda x, z=z: (1.0 / (x - z)).real)
            )
        )
        panel.append(
            PanelFunction(
                f"im_f_{zid}", windowed(lambda x, z=z: (1.0 / (x - z)).imag)
            )
        )
    panel.append(PanelFunction("bump", bump))
    return panel


class FluctuationSample:
    """Per-replica matrix of fluctuation pairings.

    values[i, j] = N(<X^N, phi_j> - <X, phi_j>) at checkpoint time i,
    time 0 included.
    """

    def __init__(self, replica_seed, values, times=None, phi_ids=None):
        self.replica_seed = int(replica_seed)
        self.values = np.asarray(values, dtype=float)
        self.times = None if times is None else np.asarray(times, float)
        self.phi_ids = phi_ids


def _normalized_weights(x):
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += 0.5 * dx
    w[1:] += 0.5 * dx
    # renormalize until the constant function integrates to exactly one,
    # which makes the phi == 1 fluctuation column vanish identically
    for _ in range(3):
        s = w.sum()
        if s == 1.0:
            break
        w /= s
    return w


def density_pairing(density, fn):
    """<rho, fn> with weights normalized to unit total mass."""
    w = _normalized_weights(density.x)
    return float(np.sum(w * fn(density.x)))


def _limit_rows(hydro, times, panel):
    """Matrix <X_t, phi_j> of the deterministic limit at the given times."""
    if isinstance(hydro, EquilibriumMeasure):
        row = np.array([density_pairing(hydro.density, p.fn) for p in panel])
        return np.tile(row, (len(times), 1))
    rows = np.empty((len(times), len(panel)))
    ht = np.asarray(hydro.times, dtype=float)
    for i, t in enumerate(times):
        j = int(np.argmin(np.abs(ht - t)))
        if abs(ht[j] - t) > 1e-9 + 1e-6 * max(1.0, abs(t)):
            raise ValueError(
                f"no deterministic snapshot at t={t:g}; align checkpoints"
            )
        dens = hydro.densities[j]
        rows[i] = [density_pairing(dens, p.fn) for p in panel]
    return rows


def fluctuation_samples(plan, hydro, panel, n_replicas, seed,
                        return_records=False):
    """Sample the fluctuation pairing over independent replicas.

    The deterministic part comes from hydro (a stationary equilibrium
    measure or a solved time-dependent record with matching checkpoint
    times); replica k uses the noise stream keyed by (seed, k) and can be
    regenerated alone.
    """
    run_plan = pt.SimulationPlan(
        plan.n_particles,
        plan.beta,
        plan.pot,
        plan.t_final,
        checkpoint_times=plan.checkpoint_times,
        init=plan.init,
        dt_base=plan.dt_base,
        store="observables",
        observables=[p.fn for p in panel],
        probe_polys=plan.probe_polys,
    )
    times = np.concatenate([[0.0], plan.checkpoint_times])
    limit = _limit_rows(hydro, times, panel)
    n = plan.n_particles
    phi_ids = [p.phi_id for p in panel]
    samples = []
    records = []
    for k in range(int(n_replicas)):
        rec = pt.simulate(run_plan, seed, replica=k)
        obs = np.vstack(rec.payloads())
        samples.append(
            FluctuationSample(
                k, n * (obs - limit), times=times, phi_ids=phi_ids
            )
        )
        if return_records:
            records.append(rec)
    if return_records:
        return samples, records
    return samples


class GaussPrediction:
    """Terminal Gaussian law predicted for one test function.

    mean = (1/2)(1 - beta/2) int_0^T <X_s, f_s''> ds and
    variance = int_0^T <X_s, (f_s')^2> ds, with f evolved backward from
    f_T; the t=0 conditioning enters through a separate initial term.
    """

    def __init__(self, mean, variance, f_path, beta, T):
        if variance < 0.0:
            raise ValueError("variance must be nonnegative")
        self.mean = float(mean)
        self.variance = float(variance)
        self.f_path = f_path
        self.beta = float(beta)
        self.T = float(T)

    def cf(self, theta):
        th = np.asarray(theta, dtype=float)
        return np.exp(1j * th * self.mean - 0.5 * th**2 * self.variance)


def _as_measure_path(hydro, beta):
    if isinstance(hydro, MeasurePath):
        return hydro
    if isinstance(hydro, EquilibriumMeasure):
        return MeasurePath([0.0], [hydro], mode="asymptotic", beta=beta)
    return MeasurePath(
        hydro.times, list(hydro.densities), mode="asymptotic", beta=beta
    )


def _pairing_density(hydro, t):
    if isinstance(hydro, EquilibriumMeasure):
        return hydro.density
    ht = np.asarray(hydro.times, dtype=float)
    j = int(np.argmin(np.abs(ht - t)))
    return hydro.densities[j]


def gaussian_predictor(f_T, hydro, pot, beta, T, n_times=33, dt=None):
    """Predicted (mean, variance) of the terminal fluctuation pairing.

    Evolves the test function backward over [0, T] against the limiting
    measure, then time-quadratures the second-derivative pairing (mean,
    prefactor (1-beta/2)/2) and the squared-gradient pairing (variance).
    """
    path = _as_measure_path(hydro, beta)
    kw = {"mode": "asymptotic", "n_times": int(n_times)}
    if dt is not None:
        kw["dt"] = float(dt)
    flow = evolve_test_function(f_T, path, pot, T, **kw)
    x = flow.x_grid
    dx = x[1] - x[0]
    m_vals = np.empty(flow.times.size)
    v_vals = np.empty(flow.times.size)
    for i, t in enumerate(flow.times):
        f = flow.value(t, x)
        fp = np.gradient(f, dx)
        fpp = np.gradient(fp, dx)
        dens = _pairing_density(hydro, t)
        w = _normalized_weights(dens.x) * dens.values
        w /= np.sum(w)
        fp_d = np.interp(dens.x, x, fp)
        fpp_d = np.interp(dens.x, x, fpp)
        m_vals[i] = np.sum(w * fpp_d)
        v_vals[i] = np.sum(w * fp_d**2)
    mean = 0.5 * (1.0 - beta / 2.0) * np.trapz(m_vals, flow.times)
    variance = np.trapz(v_vals, flow.times)
    return GaussPrediction(mean, max(variance, 0.0), flow, beta, T)


def initial_fluctuation(prediction, init_positions, hydro):
    """<Y_0, f_0> for one replica's starting configuration."""
    lam = np.sort(np.asarray(init_positions, dtype=float))
    flow = prediction.f_path
    f0 = lambda x: flow.value(0.0, x)
    dens = _pairing_density(hydro, 0.0)
    n = lam.size
    return float(n * (np.mean(f0(lam)) - density_pairing(dens, f0)))


def _ad_pvalue(a2, n):
    # Stephens' approximation for the normal case with fitted moments
    s = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    if s < 0.2:
        return 1.0 - math.exp(-13.436 + 101.14 * s - 223.73 * s * s)
    if s < 0.34:
        return 1.0 - math.exp(-8.318 + 42.796 * s - 59.938 * s * s)
    if s < 0.6:
        return math.exp(0.9177 - 4.279 * s - 1.38 * s * s)
    return max(math.exp(1.2937 - 5.709 * s + 0.0186 * s * s), 0.0)


def _terminal_column(samples, phi_index):
    if isinstance(samples, np.ndarray) and samples.ndim == 1:
        return np.asarray(samples, dtype=float)
    if phi_index is None:
        raise ValueError("phi_index is required for sample lists")
    return np.array([s.values[-1, phi_index] for s in samples])


def normality_and_cf_test(samples, prediction, theta_grid, phi_index=None,
                          y0=None):
    """Normality and characteristic-function comparison at the terminal time.

    samples may be a list of replica sample matrices (with phi_index
    choosing the column) or a plain vector of terminal values.  y0 carries
    the per-replica initial pairings <Y_0, f_0>; their empirical average of
    e^{i theta y0} multiplies the predicted characteristic function, which
    avoids assuming the initial fluctuation vanishes.  PASS needs the
    normality test to survive at the 1% level and the empirical
    characteristic function to sit within 3 standard errors everywhere.
    """
    term = _terminal_column(samples, phi_index)
    m = term.size
    power_warning = m < POWER_FLOOR
    if power_warning:
        warnings.warn(
            f"only {m} samples; statistical power is limited below "
            f"{POWER_FLOOR}"
        )
    ad = sps.anderson(term, dist="norm")
    crit_1pct = float(ad.critical_values[-1])
    ad_stat = float(ad.statistic)
    normal_pass = bool(ad_stat < crit_1pct)

    if y0 is None:
        y0 = np.zeros(1)
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))

    rows = []
    cf_pass = True
    for th in theta_grid:
        th = float(th)
        w = th * term
        emp = complex(np.mean(np.exp(1j * w)))
        se = math.sqrt(
            (np.var(np.cos(w)) + np.var(np.sin(w))) / m
        )
        pred = complex(prediction.cf(th) * np.mean(np.exp(1j * th * y0)))
        diff = abs(emp - pred)
        ok = bool(diff <= 3.0 * se)
        cf_pass = cf_pass and ok
        rows.append(
            {
                "theta": th,
                "emp_re": emp.real,
                "emp_im": emp.imag,
                "pred_re": pred.real,
                "pred_im": pred.imag,
                "abs_diff": diff,
                "se": se,
                "pass": ok,
            }
        )
    return {
        "n_samples": int(m),
        "power_warning": bool(power_warning),
        "ad_stat": ad_stat,
        "ad_crit_1pct": crit_1pct,
        "ad_pvalue": float(_ad_pvalue(ad_stat, m)),
        "normal_pass": normal_pass,
        "mean": float(np.mean(term)),
        "variance": float(np.var(term, ddof=1)),
        "pred_mean": prediction.mean,
        "pred_variance": prediction.variance,
        "cf": rows,
        "cf_pass": bool(cf_pass),
        "pass": bool(normal_pass and cf_pass),
    }


def _poly_rate(lam, coeffs, dcoeffs, ddcoeffs, pot, beta):
    n = lam.size
    vprime = pot.deriv(lam, 1)
    dv = npoly.polyval(lam, dcoeffs)
    ddv = npoly.polyval(lam, ddcoeffs)
    rate = -np.mean(vprime * dv) + 0.5 / n * np.mean(ddv)
    if n > 1:
        rate += beta / 4.0 * pt._poly_pair_sum(dcoeffs, lam)
    return rate


def martingale_residual(records, F, phi_polys, phi_ids=None, pot=None,
                        limit_values=None, flip_sign=False):
    """Compensator residual of the fluctuation pairing over an ensemble.

    F selects the functional: "u" uses the pathwise drift accumulators, so
    the residual N(delta value - drift integral) is the realized noise
    integral and must average to zero; "u2" squares the pairing, which
    brings in the quadratic-variation compensator <X^N, (phi')^2> and a
    checkpoint-quadrature of the drift bracket, needing stored positions
    and a stationary limit value per test function.  flip_sign reverses
    the compensator, a control that must break the zero-mean consistency.
    """
    if F not in ("u", "u2"):
        raise ValueError("F must be 'u' or 'u2'")
    sgn = -1.0 if flip_sign else 1.0
    nrec = len(records)
    n = records[0].n_particles
    beta = records[0].beta
    nphi = len(phi_polys)
    if phi_ids is None:
        phi_ids = [f"phi{j}" for j in range(nphi)]

    resid = np.empty((nrec, nphi))
    drift_tot = np.empty((nrec, nphi))
    if F == "u":
        for i, rec in enumerate(records):
            pb = rec.probes
            if pb is None:
                raise ValueError("records lack pathwise accumulators")
            dv = pb["value"][-1] - pb["value"][0]
            resid[i] = n * (dv - sgn * pb["drift_int"][-1])
            drift_tot[i] = n * pb["drift_int"][-1]
    else:
        if pot is None or limit_values is None:
            raise ValueError("'u2' needs pot and stationary limit values")
        d1 = [npoly.polyder(c) for c in phi_polys]
        d2 = [npoly.polyder(c) for c in d1]
        times0 = np.asarray(records[0].times)
        if times0.size < 51:
            warnings.warn(
                "fewer than 50 checkpoints; quadrature of the drift "
                "bracket may be coarse"
            )
        for i, rec in enumerate(records):
            ts = np.asarray(rec.times)
            pos = rec.payloads()
            if np.ndim(pos[0]) != 1 or len(pos[0]) != n:
                raise ValueError("'u2' needs stored positions")
            for j in range(nphi):
                y = np.array(
                    [
                        n * (np.mean(npoly.polyval(p, phi_polys[j]))
                             - limit_values[j])
                        for p in pos
                    ]
                )
                bracket = np.array(
                    [
                        2.0 * yv * n * _poly_rate(p, phi_polys[j], d1[j],
                                                  d2[j], pot, beta)
                        + np.mean(npoly.polyval(p, d1[j]) ** 2)
                        for yv, p in zip(y, pos)
                    ]
                )
                comp = np.trapz(bracket, ts)
                resid[i, j] = y[-1] ** 2 - y[0] ** 2 - sgn * comp
                drift_tot[i, j] = comp

    per_phi = []
    all_ok = True
    for j in range(nphi):
        mu = float(np.mean(resid[:, j]))
        se = float(np.std(resid[:, j], ddof=1) / math.sqrt(nrec))
        ok = bool(abs(mu) <= 3.0 * se)
        all_ok = all_ok and ok
        per_phi.append(
            {
                "phi_id": phi_ids[j],
                "mean": mu,
                "se": se,
                "pass": ok,
                "mean_compensator": float(np.mean(drift_tot[:, j])),
            }
        )
    return {
        "F": F,
        "flip_sign": bool(flip_sign),
        "n_replicas": int(nrec),
        "n_particles": int(n),
        "per_phi": per_phi,
        "pass": bool(all_ok),
    }


def fundamental_scaling_probe(n_list, z_list, n_replicas, pot, beta, T,
                              seed, eqm=None, dt_base=None):
    """Mean-square size of the centered Stieltjes transform on the strip.

    For each system size and strip point, estimates E|N(M^N - M)(z)|^2 at
    the terminal time (and records the deterministic t=0 value from the
    quantile start).  Fits the size exponent per point (order one expected)
    and the height exponent per system size; both are reported, the height
    fit with its regression error.
    """
    if eqm is None:
        from .equilibrium import solve_cut_equation

        eqm = solve_cut_equation(pot, beta)
    zs = [complex(z) for z in z_list]
    obs = []
    for z in zs:
        obs.append(lambda lam, z=z: (1.0 / (lam - z)).real)
        obs.append(lambda lam, z=z: (1.0 / (lam - z)).imag)
    limit = np.array([equilibrium_stieltjes_exact(eqm, z) for z in zs])

    msq = np.empty((len(n_list), len(zs)))
    msq0 = np.empty((len(n_list), len(zs)))
    for a, nn in enumerate(n_list):
        plan = pt.SimulationPlan(
            nn,
            beta,
            pot,
            T,
            checkpoint_times=[T],
            init={"kind": "quantile", "density": eqm.density},
            dt_base=dt_base,
            store="observables",
            observables=obs,
        )
        acc = np.zeros(len(zs))
        first = None
        for k in range(int(n_replicas)):
            rec = pt.simulate(plan, seed, replica=k)
            rows = np.vstack(rec.payloads())
            mn_T = rows[-1, 0::2] + 1j * rows[-1, 1::2]
            acc += np.abs(nn * (mn_T - limit)) ** 2
            if first is None:
                mn_0 = rows[0, 0::2] + 1j * rows[0, 1::2]
                first = np.abs(nn * (mn_0 - limit)) ** 2
        msq[a] = acc / n_replicas
        msq0[a] = first

    logn = np.log(np.asarray(n_list, dtype=float))
    n_exponents = [
        float(np.polyfit(logn, np.log(msq[:, j]), 1)[0])
        for j in range(len(zs))
    ]
    logb = np.log(np.array([z.imag for z in zs]))
    b_fits = []
    for a in range(len(n_list)):
        fit = sps.linregress(logb, np.log(msq[a]))
        b_fits.append(
            {
                "n": int(n_list[a]),
                "exponent": float(fit.slope),
                "stderr": float(fit.stderr),
            }
        )
    fit0 = sps.linregress(logb, np.log(np.maximum(msq0[-1], 1e-300)))
    return {
        "n_list": [int(v) for v in n_list],
        "z_list": [str(z) for z in zs],
        "msq": msq.tolist(),
        "msq_initial": msq0.tolist(),
        "n_exponents": n_exponents,
        "b_exponent_fits": b_fits,
        "initial_b_exponent": float(fit0.slope),
        "n_replicas": int(n_replicas),
    }


# ---------------------------------------------------------------- artifacts


def samples_to_csv(samples, path):
    """Long-form table: replica, time, phi_id, value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "time", "phi_id", "value"])
        for s in samples:
            for i, t in enumerate(s.times):
                for j, pid in enumerate(s.phi_ids):
                    w.writerow(
                        [s.replica_seed, repr(float(t)), pid,
                         repr(float(s.values[i, j]))]
                    )


def cf_table_to_csv(report, path):
    """Plot-ready characteristic function comparison."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["theta", "emp_re", "emp_im", "pred_re", "pred_im",
             "abs_diff", "se", "pass"]
        )
        for row in report["cf"]:
            w.writerow(
                [repr(row["theta"]), repr(row["emp_re"]),
                 repr(row["emp_im"]), repr(row["pred_re"]),
                 repr(row["pred_im"]), repr(row["abs_diff"]),
                 repr(row["se"]), int(row["pass"])]
            )


def report_to_json(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
