import numpy as np
import pytest

from loggas.potential import PotentialSpec
from loggas.equilibrium import solve_cut_equation
from loggas import particle as pt
from loggas import stieltjes as st


@pytest.fixture(scope="module")
def sc_measure():
    return solve_cut_equation(PotentialSpec.harmonic(), beta=2.0)


def make_plan(**kw):
    defaults = dict(
        n_particles=32, beta=2.0, pot=PotentialSpec.harmonic(), t_final=0.1,
        n_checkpoints=4,
    )
    defaults.update(kw)
    return pt.SimulationPlan(**defaults)


# ----------------------------------------------------------------------- drift


def test_drift_single_particle():
    s = pt.ParticleState([2.0], 0.0, 2.0, PotentialSpec.harmonic())
    assert pt.drift(s) == pytest.approx([-2.0])


def test_drift_free_pair_antisymmetric():
    s = pt.ParticleState([-1.0, 1.0], 0.0, 2.0, PotentialSpec.free())
    assert pt.drift(s) == pytest.approx([-0.25, 0.25])


def test_drift_free_symmetric_triple():
    s = pt.ParticleState([-1.0, 0.0, 1.0], 0.0, 2.0, PotentialSpec.free())
    d = pt.drift(s)
    assert d[1] == pytest.approx(0.0, abs=1e-15)
    assert d[0] == pytest.approx(-d[2])


def test_drift_interaction_sum_matches_dense():
    rng = np.random.default_rng(3)
    lam = np.sort(rng.normal(size=40))
    s = pt.ParticleState(lam, 0.0, 1.5, PotentialSpec.landau_ginzburg(0.5))
    diff = lam[:, None] - lam[None, :]
    np.fill_diagonal(diff, np.inf)
    ref = -s.pot.deriv(lam, 1) + 1.5 / 80.0 * np.sum(1.0 / diff, axis=1)
    assert np.allclose(pt.drift(s), ref, atol=1e-10)


def test_state_rejects_disorder():
    with pytest.raises(pt.CollisionError):
        pt.ParticleState([0.0, 0.0], 0.0, 2.0, PotentialSpec.harmonic())
    with pytest.raises(pt.CollisionError):
        pt.ParticleState([1.0, -1.0], 0.0, 2.0, PotentialSpec.harmonic())


# ------------------------------------------------------------------------ step


def test_step_deterministic_pair():
    # drift at -1 is -V'(-1) + (1/2)/(-2) = 1 - 0.25 = 0.75
    s = pt.ParticleState([-1.0, 1.0], 0.0, 2.0, PotentialSpec.harmonic())
    new = pt.step(s, 0.01, np.zeros(2))
    assert new.lambdas == pytest.approx([-0.9925, 0.9925])
    assert new.time == pytest.approx(0.01)


def test_step_single_particle_noise():
    s = pt.ParticleState([0.0], 0.0, 2.0, PotentialSpec.free())
    new = pt.step(s, 1.0, np.array([0.37]))
    assert new.lambdas == pytest.approx([0.37])


def test_step_backoff_shrinks_dt():
    # strong inward noise at a small gap forces at least one halving
    s = pt.ParticleState([-0.01, 0.01], 0.0, 2.0, PotentialSpec.harmonic())
    new = pt.step(s, 0.01, np.array([4.0, -4.0]))
    assert new.time < 0.01
    assert new.min_gap() > 0.0


def test_step_stiffness_error():
    # noise pull far beyond what 40 halvings can tame
    s = pt.ParticleState([0.0, 1e-3], 0.0, 2.0, PotentialSpec.harmonic())
    with pytest.raises(pt.StiffnessError) as ei:
        pt.step(s, 1.0, np.array([1e8, -1e8]))
    assert ei.value.state is not None


def test_step_ordering_preserved_under_noise():
    rng = np.random.default_rng(11)
    lam = np.sort(rng.normal(size=64))
    s = pt.ParticleState(lam, 0.0, 1.0, PotentialSpec.harmonic())
    for _ in range(200):
        s = pt.step(s, 1e-4, rng.standard_normal(64))
        assert np.all(np.diff(s.lambdas) > 0)


# -------------------------------------------------------------------- simulate


def test_simulate_deterministic_given_seed(sc_measure):
    plan = make_plan(init={"kind": "quantile", "density": sc_measure.density})
    r1 = pt.simulate(plan, 1234)
    r2 = pt.simulate(plan, 1234)
    assert r1.n_steps == r2.n_steps
    for (t1, p1), (t2, p2) in zip(r1.checkpoints, r2.checkpoints):
        assert t1 == t2
        assert np.array_equal(p1, p2)


def test_simulate_replicas_differ(sc_measure):
    plan = make_plan(init={"kind": "quantile", "density": sc_measure.density})
    r0 = pt.simulate(plan, 1234, replica=0)
    r1 = pt.simulate(plan, 1234, replica=1)
    assert not np.array_equal(r0.checkpoints[-1][1], r1.checkpoints[-1][1])


def test_simulate_checkpoint_grid(sc_measure):
    plan = make_plan(init={"kind": "quantile", "density": sc_measure.density})
    rec = pt.simulate(plan, 5)
    assert np.allclose(rec.times, [0.0, 0.025, 0.05, 0.075, 0.1])
    assert rec.times[-1] == pytest.approx(plan.t_final)
    assert np.all(np.diff(rec.times) > 0)


def test_simulate_sorted_input_equivalence(sc_measure):
    lam0 = pt.quantile_init(sc_measure.density, 16)
    shuffled = lam0[np.random.default_rng(0).permutation(16)]
    p1 = make_plan(n_particles=16, init={"kind": "list", "positions": lam0})
    p2 = make_plan(n_particles=16, init={"kind": "list", "positions": shuffled})
    r1 = pt.simulate(p1, 99)
    r2 = pt.simulate(p2, 99)
    assert np.array_equal(r1.checkpoints[-1][1], r2.checkpoints[-1][1])


def test_simulate_stationary_w1(sc_measure):
    # quantile-seeded stationary run stays near the limit shape
    plan = make_plan(
        n_particles=64, t_final=0.5,
        init={"kind": "quantile", "density": sc_measure.density},
    )
    rec = pt.simulate(plan, 2024)
    ref = pt.quantile_init(sc_measure.density, 64)
    w1 = np.mean(np.abs(rec.checkpoints[-1][1] - ref))
    assert w1 < 0.1


def test_simulate_single_free_particle_variance():
    # scaled Brownian motion: terminal variance T (exact for Euler, any dt)
    plan = pt.SimulationPlan(
        1, 2.0, PotentialSpec.free(), 0.25, n_checkpoints=1,
        init={"kind": "list", "positions": [0.0]}, dt_base=0.0125,
    )
    finals = [pt.simulate(plan, 7, replica=r).checkpoints[-1][1][0]
              for r in range(200)]
    v = np.var(finals)
    assert abs(v - 0.25) < 0.08  # 3 standard errors at 200 replicas


def test_simulate_empirical_stieltjes_bound(sc_measure):
    plan = make_plan(init={"kind": "quantile", "density": sc_measure.density})
    rec = pt.simulate(plan, 31)
    for _, lam in rec.checkpoints:
        m = st.stieltjes_points(lam, 0.5j)
        assert abs(m) <= 1.0 / 0.5 + 1e-12


def test_simulate_mean_decay_harmonic():
    # closed form: E <X, x>_t = <X, x>_0 e^{-t} + O(dt) for V = x^2/2
    sc = solve_cut_equation(PotentialSpec.harmonic(), 2.0)
    lam0 = pt.quantile_init(sc.density, 32) + 1.0
    plan = pt.SimulationPlan(
        32, 2.0, PotentialSpec.harmonic(), 0.2, n_checkpoints=1,
        init={"kind": "list", "positions": lam0},
    )
    means = [np.mean(pt.simulate(plan, 400, replica=r).checkpoints[-1][1])
             for r in range(20)]
    se = np.std(means, ddof=1) / np.sqrt(len(means))
    target = np.mean(lam0) * np.exp(-0.2)
    assert abs(np.mean(means) - target) < 3 * se + 2e-3


def test_ito_residual_shrinks_with_dt(sc_measure):
    # pathwise identity: increment of <X, phi> minus generator quadrature
    # minus reconstructed martingale term vanishes as dt -> 0
    def residual(dt_base):
        plan = make_plan(
            n_particles=32, t_final=0.05, n_checkpoints=5,
            init={"kind": "quantile", "density": sc_measure.density},
            dt_base=dt_base,
            probe_polys=[np.array([0.0, 1.0]), np.array([0.0, 0.0, 1.0])],
        )
        rec = pt.simulate(plan, 77)
        val = rec.probes["value"]
        res = (val - val[0]) - rec.probes["drift_int"] - rec.probes["mart"]
        return float(np.sqrt(np.mean(res[1:] ** 2)))

    r_coarse = residual(1e-3)
    r_fine = residual(1e-4)
    assert r_fine < r_coarse
    assert r_fine < 5e-5


# --------------------------------------------------------------- init samplers


def test_quantile_init_moments(sc_measure):
    lam = pt.quantile_init(sc_measure.density, 256)
    assert np.all(np.diff(lam) > 0)
    assert np.mean(lam) == pytest.approx(0.0, abs=1e-12)
    assert np.mean(lam**2) == pytest.approx(0.5, abs=0.02)


def test_quantile_init_respects_support(sc_measure):
    lam = pt.quantile_init(sc_measure.density, 64)
    lo, hi = sc_measure.support
    assert lam[0] > lo and lam[-1] < hi


def test_gibbs_init_mofor_moments(sc_measure):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((7, 0))))
    lam = pt.gibbs_init(sc_measure, 64, rng)
    assert np.all(np.diff(lam) > 0)
    assert abs(np.mean(lam)) < 0.05
    assert abs(np.mean(lam**2) - 0.5) < 0.06


# ------------------------------------------------------- excursions, plumbing


def _fake_record(max_abs):
    return pt.TrajectoryRecord(
        [(0.0, np.zeros(2)), (1.0, np.zeros(2))], 0, (0.1, 0.1, 0.1),
        2, 2.0, max_abs, 1.0, 10, 0,
    )


def test_support_excursion_trivial_radii():
    by_n = {
        32: [_fake_record(1.2), _fake_record(1.4)],
        64: [_fake_record(1.3), _fake_record(1.35)],
    }
    frac_lo, rows_lo = pt.support_excursion_stats(by_n, 1.0)
    assert frac_lo == 1.0
    assert all(r["fraction"] == 1.0 for r in rows_lo)
    frac_hi, rows_hi = pt.support_excursion_stats(by_n, 100.0)
    assert frac_hi == 0.0
    assert all(r["ci_low"] == 0.0 for r in rows_hi)
    assert [r["n"] for r in rows_lo] == [32, 64]


def test_wilson_interval_basic():
    lo, hi = pt.wilson_interval(5, 10)
    assert 0.0 < lo < 0.5 < hi < 1.0
    lo0, hi0 = pt.wilson_interval(0, 50)
    assert lo0 == 0.0 and hi0 < 0.1


def test_observable_consistency(sc_measure):
    lam = pt.quantile_init(sc_measure.density, 128)
    s = pt.ParticleState(lam, 0.0, 2.0, PotentialSpec.harmonic())
    assert pt.observable(s, lambda x: np.ones_like(x)) == 1.0
    z = 1j
    got = pt.observable(s, lambda x: (1.0 / (x - z)).imag)
    want = st.stieltjes_points(lam, z).imag
    assert got == pytest.approx(want, rel=1e-12)


def test_trajectory_csv(tmp_path, sc_measure):
    plan = make_plan(
        n_particles=8, init={"kind": "quantile", "density": sc_measure.density}
    )
    rec = pt.simulate(plan, 1)
    path = tmp_path / "traj.csv"
    pt.trajectory_to_csv(rec, path)
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    assert data.shape == (5, 9)
    assert np.allclose(data[:, 0], rec.times)
    assert np.allclose(data[-1, 1:], rec.checkpoints[-1][1])


def test_plan_validation():
    with pytest.raises(ValueError):
        make_plan(beta=0.5)
    with pytest.raises(ValueError):
        make_plan(t_final=-1.0)
    with pytest.raises(ValueError):
        pt.SimulationPlan(
            4, 2.0, PotentialSpec.harmonic(), 1.0,
            checkpoint_times=[0.5, 0.4, 1.0],
        )
