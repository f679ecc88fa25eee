"""Interacting particle system with logarithmic repulsion.

Integrates, for beta >= 1 and a confining polynomial potential V,

    d lambda_i = (1/sqrt(N)) dW_i - V'(lambda_i) dt
                 + (beta/2N) sum_{j != i} dt / (lambda_i - lambda_j),

keeping the particles strictly ordered at every accepted step. Time stepping
is explicit Euler-Maruyama with a gap-based rejection rule: a proposal whose
minimum gap falls below GAMMA_SAFETY * sqrt(dt/N) is rejected and retried
with dt/2 (same Gaussian draw, rescaled), up to MAX_HALVINGS times. One
Gaussian vector is consumed per accepted step, so trajectories are
reproducible regardless of how many rejections occurred.
"""

import csv
import numpy as np

from .potential import PotentialSpec

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

GAMMA_SAFETY = 3.0
MAX_HALVINGS = 40
BASE_STEPS = 2000  # base dt = min(T / BASE_STEPS, (min gap)^2 / 10)
WILSON_Z = 1.959963984540054  # 95% normal quantile


class CollisionError(ValueError):
    """Two particle positions coincide (or are out of order)."""


class StiffnessError(RuntimeError):
    """Backoff exhausted: no acceptable step found after MAX_HALVINGS."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


if HAVE_NUMBA:

    @njit(cache=True)
    def _interaction_sum(lam):
        n = lam.size
        out = np.zeros(n)
        for i in range(n):
            li = lam[i]
            acc = 0.0
            for j in range(i + 1, n):
                inv = 1.0 / (li - lam[j])
                acc += inv
                out[j] -= inv
            out[i] += acc
        return out

    @njit(cache=True)
    def _polyval_nb(x, c):
        # Horner in the same ascending-coefficient convention as numpy;
        # zero-padded high-order coefficients are exact no-ops
        out = np.full(x.size, c[-1])
        for k in range(c.size - 2, -1, -1):
            ck = c[k]
            for i in range(x.size):
                out[i] = ck + out[i] * x[i]
        return out

    @njit(cache=True)
    def _step_nb(lam, dt_try, gauss, beta, dvc, dphi, ddphi,
                 step_rate, step_mart):
        """Drift, probe rates, and the gap-rejection step, fused.

        Mutates lam to the accepted proposal and fills the per-step probe
        arrays. Returns (accepted dt, halvings); dt < 0 flags stiffness.
        """
        n = lam.size
        vp = _polyval_nb(lam, dvc)
        dr = np.empty(n)
        if n > 1:
            inter = _interaction_sum(lam)
            cb = beta / (2.0 * n)
            for i in range(n):
                dr[i] = -vp[i] + cb * inter[i]
        else:
            for i in range(n):
                dr[i] = -vp[i]
        for p in range(step_rate.size):
            dv = _polyval_nb(lam, dphi[p])
            ddv = _polyval_nb(lam, ddphi[p])
            acc_vd = 0.0
            acc_dd = 0.0
            acc_m = 0.0
            for i in range(n):
                acc_vd += vp[i] * dv[i]
                acc_dd += ddv[i]
                acc_m += dv[i] * gauss[i]
            rate = -acc_vd / n + 0.5 * acc_dd / (n * n)
            if n > 1:
                ps = 0.0
                for i in range(n):
                    for j in range(i + 1, n):
                        ps += 2.0 * (dv[i] - dv[j]) / (lam[i] - lam[j])
                rate += beta / 4.0 * ps / (n * n)
            step_rate[p] = rate
            step_mart[p] = acc_m
        prop = np.empty(n)
        dt = dt_try
        halvings = 0
        while True:
            s = np.sqrt(dt / n)
            prop[0] = lam[0] + dr[0] * dt + s * gauss[0]
            gmin = np.inf
            for i in range(1, n):
                prop[i] = lam[i] + dr[i] * dt + s * gauss[i]
                g = prop[i] - prop[i - 1]
                if g < gmin:
                    gmin = g
            if n == 1 or gmin >= GAMMA_SAFETY * s:
                break
            dt *= 0.5
            halvings += 1
            if halvings > MAX_HALVINGS:
                return -1.0, halvings
        for i in range(n):
            lam[i] = prop[i]
        return dt, halvings

else:

    def _interaction_sum(lam):
        diff = lam[:, None] - lam[None, :]
        np.fill_diagonal(diff, np.inf)
        return np.sum(1.0 / diff, axis=1)


class ParticleState:
    """Sorted particle configuration at a fixed time."""

    def __init__(self, lambdas, time, beta, pot):
        lam = np.asarray(lambdas, dtype=float)
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("need a 1d, nonempty position vector")
        if np.any(np.diff(lam) <= 0.0):
            raise CollisionError("positions must be strictly increasing")
        self.lambdas = lam
        self.time = float(time)
        self.beta = float(beta)
        self.pot = pot

    @property
    def n(self):
        return self.lambdas.size

    def min_gap(self):
        if self.n < 2:
            return np.inf
        return float(np.min(np.diff(self.lambdas)))

    def copy(self):
        return ParticleState(self.lambdas.copy(), self.time, self.beta, self.pot)


class TrajectoryRecord:
    """Checkpointed output of one trajectory.

    checkpoints is a list of (time, payload) pairs with strictly increasing
    times, the last equal to t_final; payload is either the sorted position
    vector or a vector of observables, per the plan.
    """

    def __init__(self, checkpoints, seed, dt_stats, n_particles, beta,
                 max_abs, min_gap, n_steps, n_rejections, probes=None):
        self.checkpoints = checkpoints
        self.seed = seed
        self.dt_stats = dt_stats  # (min, max, mean accepted dt)
        self.n_particles = n_particles
        self.beta = beta
        self.max_abs = max_abs  # sup over steps of max_i |lambda_i|
        self.min_gap = min_gap  # inf over steps of the minimum gap
        self.n_steps = n_steps
        self.n_rejections = n_rejections
        self.probes = probes  # {name: arrays} for pathwise integral checks

    @property
    def times(self):
        return np.array([t for t, _ in self.checkpoints])

    def payloads(self):
        return [p for _, p in self.checkpoints]


def drift(state):
    """Deterministic velocity field: confinement plus pairwise repulsion."""
    lam = state.lambdas
    if lam.size > 1 and np.min(np.diff(lam)) <= 0.0:
        raise CollisionError("duplicate or unordered positions")
    out = -state.pot.deriv(lam, 1)
    if lam.size > 1:
        out = out + (state.beta / (2.0 * lam.size)) * _interaction_sum(lam)
    return out


def step(state, dt, gauss, drift_vec=None):
    """One accepted Euler-Maruyama step with gap-rejection backoff.

    The Gaussian vector is fixed across retries; only dt shrinks. Returns the
    new state, whose time advance equals the dt actually accepted.
    """
    gauss = np.asarray(gauss, dtype=float)
    if gauss.shape != state.lambdas.shape:
        raise ValueError("gauss must match the particle count")
    if drift_vec is None:
        drift_vec = drift(state)
    lam = state.lambdas
    n = lam.size
    for _ in range(MAX_HALVINGS + 1):
        prop = lam + drift_vec * dt + np.sqrt(dt / n) * gauss
        gaps = np.diff(prop)
        if n == 1 or np.min(gaps) >= GAMMA_SAFETY * np.sqrt(dt / n):
            return ParticleState(prop, state.time + dt, state.beta, state.pot)
        dt *= 0.5
    raise StiffnessError(
        f"no acceptable step at t={state.time:.6g} (min gap "
        f"{state.min_gap():.3e})",
        state=state,
    )


class SimulationPlan:
    """What to run: system size, physics, horizon, checkpoints, init."""

    def __init__(self, n_particles, beta, pot, t_final, n_checkpoints=10,
                 checkpoint_times=None, init=None, dt_base=None,
                 store="positions", observables=None, probe_polys=None):
        if beta < 1.0:
            raise ValueError("beta must be >= 1 for collision-free dynamics")
        if t_final <= 0.0:
            raise ValueError("t_final must be positive")
        self.n_particles = int(n_particles)
        self.beta = float(beta)
        self.pot = pot
        self.t_final = float(t_final)
        if checkpoint_times is None:
            checkpoint_times = np.linspace(0.0, t_final, n_checkpoints + 1)[1:]
        ct = np.asarray(checkpoint_times, dtype=float)
        if np.any(np.diff(ct) <= 0) or abs(ct[-1] - t_final) > 1e-12:
            raise ValueError("checkpoint times must increase and end at t_final")
        self.checkpoint_times = ct
        self.init = init if init is not None else {"kind": "quantile"}
        self.dt_base = dt_base
        if store not in ("positions", "observables"):
            raise ValueError("store must be 'positions' or 'observables'")
        self.store = store
        self.observables = observables or []
        # polynomial coefficient arrays; switches on pathwise accumulators
        self.probe_polys = probe_polys


def suggested_dt(n, beta, rho_max):
    """Coarse base step tuned to the gap-rejection rule for bulk ensembles.

    The acceptance test binds at the typical minimum gap, which sits a
    factor n^{1/(1+beta)} below the mean bulk spacing 1/(n rho_max); the
    returned dt makes GAMMA_SAFETY sqrt(dt/n) equal that gap, so most
    steps accept outright and near-collisions fall back to local halving.
    Roughly a factor n larger than the conservative default, at matching
    ensemble statistics (weak error stays O(dt)).
    """
    gap = 1.0 / (n * rho_max * n ** (1.0 / (1.0 + beta)))
    return n * (gap / GAMMA_SAFETY) ** 2


def quantile_init(density, n):
    """Deterministic positions at the (i - 1/2)/n quantiles of a density."""
    x, rho = density.x, np.maximum(density.values, 0.0)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    # keep the interpolant invertible where the density vanishes
    cdf, idx = np.unique(cdf, return_index=True)
    q = (np.arange(n) + 0.5) / n
    lam = np.sort(np.interp(q, cdf, x[idx]))
    if n > 1 and np.min(np.diff(lam)) <= 0.0:
        # split ties from flat CDF stretches
        lam = lam + 1e-12 * np.arange(n)
    return lam


def gibbs_init(eqm, n, rng, n_sweeps=50, step_scale=None):
    """Metropolis sampling of the joint equilibrium law of the particles.

    Target density: prod_{i<j} |x_i - x_j|^beta * exp(-2 n sum_i V(x_i)).
    Single-site random-walk updates, started from the quantile grid of the
    continuum equilibrium density. Validated by moment checks only.
    """
    lam = quantile_init(eqm.density, n)
    beta, pot = eqm.beta, eqm.potential
    if step_scale is None:
        step_scale = eqm.radius / (2.0 * n)
    for _ in range(n_sweeps):
        offs = rng.normal(scale=step_scale, size=n)
        us = np.log(rng.uniform(size=n))
        for i in range(n):
            xi, xn = lam[i], lam[i] + offs[i]
            others = np.delete(lam, i)
            dlog = beta * np.sum(
                np.log(np.abs(xn - others)) - np.log(np.abs(xi - others))
            )
            dlog -= 2.0 * n * (pot(xn) - pot(xi))
            if us[i] < dlog:
                lam[i] = xn
    lam = np.sort(lam)
    if n > 1 and np.min(np.diff(lam)) <= 0.0:
        raise CollisionError("degenerate Gibbs sample")
    return lam


def _initial_positions(plan, rng):
    init = plan.init
    kind = init.get("kind", "quantile")
    if kind == "list":
        return np.sort(np.asarray(init["positions"], dtype=float))
    if kind == "quantile":
        dens = init.get("density")
        if dens is None:
            from .equilibrium import solve_cut_equation

            dens = solve_cut_equation(plan.pot, plan.beta).density
        return quantile_init(dens, plan.n_particles)
    if kind == "gibbs":
        eqm = init.get("measure")
        if eqm is None:
            from .equilibrium import solve_cut_equation

            eqm = solve_cut_equation(plan.pot, plan.beta)
        return gibbs_init(
            eqm, plan.n_particles, rng, n_sweeps=init.get("n_sweeps", 50)
        )
    raise ValueError(f"unknown init kind {kind!r}")


def _poly_pair_sum(dphi, lam):
    # (1/n^2) sum_{i != j} (phi'(x_i) - phi'(x_j)) / (x_i - x_j)
    vals = np.polynomial.polynomial.polyval(lam, dphi)
    diff = lam[:, None] - lam[None, :]
    np.fill_diagonal(diff, 1.0)
    num = vals[:, None] - vals[None, :]
    np.fill_diagonal(num, 0.0)
    return float(np.sum(num / diff)) / lam.size**2


def simulate(plan, seed, replica=0):
    """Run one trajectory; reproducible given (seed, replica).

    The noise stream is a counter-based generator keyed by (seed, replica),
    so replicas of an ensemble are independent and any one of them can be
    regenerated in isolation.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, replica))))
    lam0 = _initial_positions(plan, rng)
    state = ParticleState(lam0, 0.0, plan.beta, plan.pot)
    n = plan.n_particles
    if lam0.size != n:
        raise ValueError("init produced the wrong particle count")

    if plan.dt_base is not None:
        dt_base = plan.dt_base
    else:
        dt_base = plan.t_final / BASE_STEPS
        if n > 1:
            dt_base = min(dt_base, state.min_gap() ** 2 / 10.0)

    probes = None
    dphis = None
    if plan.probe_polys is not None:
        dphis = [np.polynomial.polynomial.polyder(c) for c in plan.probe_polys]
        ddphis = [np.polynomial.polynomial.polyder(c) for c in dphis]
        nprob = len(plan.probe_polys)
        probes = {
            "value": np.zeros((plan.checkpoint_times.size + 1, nprob)),
            "drift_int": np.zeros((plan.checkpoint_times.size + 1, nprob)),
            "mart": np.zeros((plan.checkpoint_times.size + 1, nprob)),
        }
        for k, c in enumerate(plan.probe_polys):
            probes["value"][0, k] = np.mean(
                np.polynomial.polynomial.polyval(lam0, c)
            )
        acc_drift = np.zeros(nprob)
        acc_mart = np.zeros(nprob)

    checkpoints = [(0.0, _payload(state, plan))]
    dt_min, dt_max, dt_sum, n_steps, n_rej = np.inf, 0.0, 0.0, 0, 0
    max_abs = float(np.max(np.abs(lam0)))
    min_gap = state.min_gap()

    use_kernel = HAVE_NUMBA and hasattr(plan.pot, "_dcoeffs")
    if use_kernel:
        # fused compiled step: same draws, same acceptance rule
        dvc = np.ascontiguousarray(plan.pot._dcoeffs[1], dtype=float)
        nprob = 0 if dphis is None else len(dphis)
        pad = 1
        if nprob:
            pad = max(max(c.size for c in dphis), 1)
            pad = max(pad, max(c.size for c in ddphis))
        dpad = np.zeros((max(nprob, 1), pad))
        ddpad = np.zeros((max(nprob, 1), pad))
        for k in range(nprob):
            dpad[k, : dphis[k].size] = dphis[k]
            ddpad[k, : ddphis[k].size] = ddphis[k]
        step_rate = np.empty(nprob)
        step_mart = np.empty(nprob)
        lam_work = state.lambdas.copy()
        t_now = 0.0

    for ci, t_next in enumerate(plan.checkpoint_times):
        if use_kernel:
            while t_now < t_next - 1e-12:
                dt_try = min(dt_base, t_next - t_now)
                gauss = rng.standard_normal(n)
                dt_acc, halvings = _step_nb(
                    lam_work, dt_try, gauss, plan.beta, dvc, dpad, ddpad,
                    step_rate, step_mart,
                )
                if dt_acc < 0.0:
                    state = ParticleState(lam_work, t_now, plan.beta, plan.pot)
                    raise StiffnessError(
                        f"no acceptable step at t={t_now:.6g} (min gap "
                        f"{state.min_gap():.3e})",
                        state=state,
                    )
                if dphis is not None:
                    acc_drift += step_rate * dt_acc
                    acc_mart += step_mart * np.sqrt(dt_acc) / n**1.5
                t_now += dt_acc
                dt_min = min(dt_min, dt_acc)
                dt_max = max(dt_max, dt_acc)
                dt_sum += dt_acc
                n_steps += 1
                n_rej += halvings
                max_abs = max(max_abs, float(np.max(np.abs(lam_work))))
                if n > 1:
                    min_gap = min(min_gap, float(np.min(np.diff(lam_work))))
            state = ParticleState(lam_work.copy(), t_now, plan.beta, plan.pot)
        else:
            while state.time < t_next - 1e-12:
                dt_try = min(dt_base, t_next - state.time)
                gauss = rng.standard_normal(n)
                dvec = drift(state)
                if dphis is not None:
                    lam = state.lambdas
                    vprime = plan.pot.deriv(lam, 1)
                    step_rate = np.empty(len(dphis))
                    step_mart = np.empty(len(dphis))
                    for k in range(len(dphis)):
                        dv = np.polynomial.polynomial.polyval(lam, dphis[k])
                        ddv = np.polynomial.polynomial.polyval(lam, ddphis[k])
                        rate = -np.mean(vprime * dv) + 0.5 / n * np.mean(ddv)
                        if n > 1:
                            rate += plan.beta / 4.0 * _poly_pair_sum(
                                dphis[k], lam
                            )
                        step_rate[k] = rate
                        step_mart[k] = np.sum(dv * gauss)
                new = step(state, dt_try, gauss, drift_vec=dvec)
                dt_acc = new.time - state.time
                if dphis is not None:
                    # left-endpoint quadrature of the generator, and the
                    # martingale increment (1/n^1.5) sum phi'(lam_i) dW_i
                    acc_drift += step_rate * dt_acc
                    acc_mart += step_mart * np.sqrt(dt_acc) / n**1.5
                state = new
                dt_min = min(dt_min, dt_acc)
                dt_max = max(dt_max, dt_acc)
                dt_sum += dt_acc
                n_steps += 1
                n_rej += max(0, int(round(np.log2(dt_try / dt_acc))))
                max_abs = max(max_abs, float(np.max(np.abs(state.lambdas))))
                min_gap = min(min_gap, state.min_gap())
        checkpoints.append((state.time, _payload(state, plan)))
        if probes is not None:
            for k, c in enumerate(plan.probe_polys):
                probes["value"][ci + 1, k] = np.mean(
                    np.polynomial.polynomial.polyval(state.lambdas, c)
                )
            probes["drift_int"][ci + 1] = acc_drift
            probes["mart"][ci + 1] = acc_mart

    stats = (dt_min, dt_max, dt_sum / max(n_steps, 1))
    return TrajectoryRecord(
        checkpoints, seed, stats, n, plan.beta, max_abs, min_gap,
        n_steps, n_rej, probes=probes,
    )


def _payload(state, plan):
    if plan.store == "positions":
        return state.lambdas.copy()
    return np.array([observable(state, phi) for phi in plan.observables])


def observable(state, phi):
    """Empirical average (1/N) sum_i phi(lambda_i)."""
    return float(np.mean(phi(state.lambdas)))


def wilson_interval(k, m, z=WILSON_Z):
    """Wilson score interval for a binomial proportion."""
    if m == 0:
        return 0.0, 1.0
    p = k / m
    denom = 1.0 + z * z / m
    center = (p + z * z / (2 * m)) / denom
    half = z * np.sqrt(p * (1 - p) / m + z * z / (4 * m * m)) / denom
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == m else min(1.0, center + half)
    return lo, hi


def support_excursion_stats(records_by_n, radius):
    """Excursion probabilities P[sup_t max_i |lambda_i| > R] per system size.

    records_by_n maps N to a list of TrajectoryRecords with identical physical
    parameters. Returns (overall fraction, rows sorted by N), each row carrying
    a Wilson 95% confidence interval.
    """
    rows = []
    tot_k = tot_m = 0
    for n in sorted(records_by_n):
        recs = records_by_n[n]
        k = sum(1 for r in recs if r.max_abs > radius)
        m = len(recs)
        lo, hi = wilson_interval(k, m)
        rows.append(
            {
                "n": n,
                "replicas": m,
                "exceeded": k,
                "fraction": k / m if m else 0.0,
                "ci_low": lo,
                "ci_high": hi,
            }
        )
        tot_k += k
        tot_m += m
    overall = tot_k / tot_m if tot_m else 0.0
    return overall, rows


def trajectory_to_csv(record, path):
    """One row per checkpoint: time then the stored payload entries."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = len(record.checkpoints[0][1])
        w.writerow(["time"] + [f"v{j}" for j in range(width)])
        for t, payload in record.checkpoints:
            w.writerow([repr(float(t))] + [repr(float(v)) for v in payload])
