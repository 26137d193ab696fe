from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfpf import pf
from lfpf.lf import LfHyperparams, LfModule
from lfpf.pf import (DegenerateSetError, FilterConfig, NumericalError, ParticleSet,
                     effective_sample_size, estimate_state, normalize, pf_step, reconstruct_pdf,
                     resample, resample_indices, run_filter, sis_proposal_moments, sis_propose,
                     weight_update)
from lfpf.ssm import (generate_dataset, generate_trajectory, make_radar, make_synthetic,
                      measurement_logpdf, motion_logpdf)
from oracles import kalman_filter


def _set(rng, n=5, t=1, d=3, normalized=True):
    w = rng.random(n) + 0.1
    return ParticleSet(rng.standard_normal((n, t, d)), w / w.sum() if normalized else w, normalized)


class Bank:
    def __init__(self, heights, sigmas):
        self.heights, self.sigmas = heights, sigmas


# normalize / ESS -------------------------------------------------------------

def test_normalize_examples():
    s = normalize(ParticleSet(np.zeros((2, 1, 1)), np.array([2.0, 2.0])))
    assert np.array_equal(s.weights, [0.5, 0.5]) and s.normalized
    rng = np.random.default_rng(0)
    w = rng.random(7) + 0.01
    out = normalize(ParticleSet(np.zeros((7, 1, 1)), w)).weights
    assert abs(out.sum() - 1) < 1e-12
    assert np.allclose(out / out[0], w / w[0], rtol=1e-12)


def test_normalize_fixed_point_and_values_untouched():
    s = _set(np.random.default_rng(1))
    again = normalize(s)
    assert again.weights is s.weights or np.array_equal(again.weights, s.weights)
    assert np.array_equal(again.particles, s.particles)


def test_normalize_rejects_zero_or_negative():
    with pytest.raises(DegenerateSetError):
        normalize(ParticleSet(np.zeros((2, 1, 1)), np.zeros(2)))
    with pytest.raises(DegenerateSetError):
        normalize(ParticleSet(np.zeros((2, 1, 1)), np.array([1.0, -0.5])))


@pytest.mark.parametrize("n", [1, 4, 25, 300])
def test_ess_uniform(n):
    assert np.isclose(effective_sample_size(ParticleSet.point_mass(np.zeros((1, 2)), n)), n)


def test_ess_examples():
    one_hot = ParticleSet(np.zeros((4, 1, 1)), np.array([0.0, 1.0, 0.0, 0.0]), True)
    assert effective_sample_size(one_hot) == 1.0
    half = ParticleSet(np.zeros((4, 1, 1)), np.array([0.5, 0.5, 0, 0]), True)
    assert effective_sample_size(half) == 2.0
    with pytest.raises(ValueError):
        effective_sample_size(replace(half, normalized=False))


def test_ess_equals_literal_formula_on_scaled_weights():
    w = np.random.default_rng(2).dirichlet(np.ones(9))
    literal = 9 / (1 + np.var(9 * w))
    assert np.isclose(effective_sample_size(ParticleSet(np.zeros((9, 1, 1)), w, True)), literal)


def test_filter_config_threshold():
    assert FilterConfig(30).threshold == 10
    with pytest.raises(ValueError):
        FilterConfig(10, resample_threshold=11)
    with pytest.raises(ValueError):
        FilterConfig(0)


# resampling ----------------------------------------------------------------

@pytest.mark.parametrize("scheme", ["systematic", "multinomial"])
def test_resample_one_hot(scheme):
    rng = np.random.default_rng(3)
    s = ParticleSet(rng.standard_normal((6, 1, 2)), np.eye(6)[4], True)
    out = resample(s, scheme, rng)
    assert np.array_equal(out.particles, np.repeat(s.particles[4:5], 6, axis=0))
    assert np.array_equal(out.weights, np.full(6, 1 / 6))


def test_systematic_uniform_keeps_every_particle_in_order():
    rng = np.random.default_rng(4)
    for n in (1, 5, 25, 300):
        idx = resample_indices(np.full(n, 1.0 / n), "systematic", rng)
        assert np.array_equal(idx, np.arange(n))


def test_multinomial_frequencies_match_weights():
    rng = np.random.default_rng(5)
    w = np.array([0.1, 0.2, 0.3, 0.4])
    counts = np.zeros(4)
    trials = 10_000
    for _ in range(trials):
        counts += np.bincount(resample_indices(w, "multinomial", rng), minlength=4)
    freq = counts / (trials * 4)
    se = np.sqrt(w * (1 - w) / (trials * 4))
    assert np.all(np.abs(freq - w) < 3 * se)


def test_systematic_variance_not_above_multinomial():
    rng = np.random.default_rng(6)
    w = rng.dirichlet(np.ones(8))
    counts = {s: np.array([np.bincount(resample_indices(w, s, rng), minlength=8) for _ in range(10_000)])
              for s in ("systematic", "multinomial")}
    assert np.all(counts["systematic"].var(0) <= counts["multinomial"].var(0) + 1e-12)


def test_resampling_preserves_estimate_in_expectation():
    rng = np.random.default_rng(7)
    s = _set(rng, n=6, t=2, d=2)
    ests = np.array([estimate_state(resample(s, "multinomial", rng)) for _ in range(10_000)])
    se = ests.std(0) / np.sqrt(len(ests))
    assert np.all(np.abs(ests.mean(0) - estimate_state(s)) < 3 * se + 1e-12)


def test_resample_requires_normalized():
    with pytest.raises(ValueError):
        resample(_set(np.random.default_rng(0), normalized=False), "systematic", np.random.default_rng(0))


# estimates / reconstruction --------------------------------------------------

def test_estimate_examples():
    rng = np.random.default_rng(8)
    p = rng.standard_normal((4, 2, 3))
    assert np.allclose(estimate_state(ParticleSet(p, np.full(4, 0.25), True)), p.mean(0), atol=1e-15)
    assert np.array_equal(estimate_state(ParticleSet(p, np.eye(4)[2], True)), p[2])
    s = _set(rng, n=4, t=2, d=3)
    loop = np.zeros((2, 3))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                loop[j, k] += s.weights[i] * s.particles[i, j, k]
    assert np.allclose(estimate_state(s), loop, atol=1e-12)


def test_reconstruct_single_particle_peak():
    s = ParticleSet(np.array([[[1.0, 2.0]]]), np.array([0.7]), True)
    val = reconstruct_pdf(s, Bank(np.array([[3.0]]), np.array([[0.5]])), np.array([[[1.0, 2.0]]]))
    assert np.isclose(val[0, 0], 3.0 * 0.7)


def test_reconstruct_linear_in_weights():
    q = np.random.default_rng(9).standard_normal((1, 20, 2))
    one = reconstruct_pdf(ParticleSet(np.ones((1, 1, 2)), np.ones(1), True),
                          Bank(np.ones((1, 1)), np.ones((1, 1))), q)
    two = reconstruct_pdf(ParticleSet(np.ones((2, 1, 2)), np.array([0.5, 0.5]), True),
                          Bank(np.ones((2, 1)), np.ones((2, 1))), q)
    assert np.allclose(one, two, atol=1e-15)


def test_reconstruct_matches_double_loop():
    rng = np.random.default_rng(10)
    s = _set(rng, n=5, t=2, d=3)
    h, sig = rng.random((5, 2)) + 0.1, rng.random((5, 2)) + 0.3
    q = rng.standard_normal((2, 100, 3))
    got = reconstruct_pdf(s, Bank(h, sig), q)
    for j in range(2):
        for m in range(100):
            ref = sum(s.weights[i] * h[i, j] * np.exp(-np.sum((q[j, m] - s.particles[i, j]) ** 2)
                                                       / (2 * sig[i, j] ** 2)) for i in range(5))
            assert abs(got[j, m] - ref) < 1e-12


def test_joint_pdf_is_product():
    rng = np.random.default_rng(11)
    s = _set(rng, n=3, t=2, d=2)
    bank = Bank(rng.random((3, 2)) + 0.5, rng.random((3, 2)) + 0.5)
    states = rng.standard_normal((4, 2, 2))
    per = reconstruct_pdf(s, bank, np.swapaxes(states, 0, 1))
    assert np.allclose(pf.joint_pdf(s, bank, states), per[0] * per[1])


def test_reconstruct_shape_errors():
    s = _set(np.random.default_rng(0), n=3, t=1, d=2)
    with pytest.raises(ValueError):
        reconstruct_pdf(s, Bank(np.ones((2, 1)), np.ones((2, 1))), np.zeros((1, 4, 2)))
    with pytest.raises(ValueError):
        reconstruct_pdf(s, Bank(np.ones((3, 1)), np.ones((3, 1))), np.zeros((1, 4, 3)))


# proposals and weights -------------------------------------------------------

def test_sis_limit_uninformative_measurement():
    m = make_synthetic("X1")
    m = replace(m, sigma_e=1e14 * np.eye(8), _cache={})
    x = np.random.default_rng(12).standard_normal((3, 1, 10))
    mean, cov = sis_proposal_moments(m, x, np.ones(8))
    assert np.allclose(mean, x[:, 0] @ m.A.T, atol=1e-8)
    assert np.allclose(cov, m.sigma_v, atol=1e-10)


def test_sis_limit_flat_motion_prior():
    base = make_synthetic("X1")
    m = replace(base, A=np.eye(10), sigma_v=1e12 * np.eye(10), C=np.vstack([base.C, np.eye(2, 10)]),
                d_m=10, sigma_e=np.eye(10), _cache={})
    z = np.random.default_rng(13).standard_normal(10)
    mean, _ = sis_proposal_moments(m, np.zeros((1, 1, 10)), z)
    ls = np.linalg.solve(m.C.T @ m.C, m.C.T @ z)
    assert np.allclose(mean[0], ls, atol=1e-6)


def test_sis_sample_mean_within_three_standard_errors():
    m = make_synthetic("X1")
    rng = np.random.default_rng(14)
    prev = ParticleSet.point_mass(rng.standard_normal((1, 10)), 100_000)
    z = rng.standard_normal(8)
    out = sis_propose(m, prev, z, rng)
    mean, cov = sis_proposal_moments(m, prev.particles[:1], z)
    se = np.sqrt(np.diag(cov) / prev.n)
    assert np.all(np.abs(out.particles[:, 0].mean(0) - mean[0]) < 3 * se)


def test_singular_proposal_is_numerical_error():
    m = make_synthetic("X1")
    m = replace(m, sigma_v=1e-16 * np.eye(10) + np.diag([1.0] + [1e-300] * 9), _cache={})
    with pytest.raises((NumericalError, ValueError)):
        sis_propose(m, ParticleSet.point_mass(np.zeros((1, 10)), 3), np.zeros(8), np.random.default_rng(0))


def test_weight_update_bootstrap_cancels_motion_terms():
    m = make_synthetic("X1")
    rng = np.random.default_rng(15)
    prev = _set(rng, n=4, d=10)
    prop = pf.bootstrap_propose(m, prev, rng)
    z = rng.standard_normal(8)
    w = weight_update(m, prop, prev, z).weights
    ref = prev.weights * np.exp(measurement_logpdf(m, prop.particles, z))
    assert np.allclose(w / w.sum(), ref / ref.sum(), rtol=1e-10)


def test_weight_update_identical_particles_stay_uniform():
    m = make_synthetic("X1")
    prev = ParticleSet.point_mass(np.zeros((1, 10)), 5)
    prop = ParticleSet(np.ones((5, 1, 10)), prev.weights, False, np.zeros(5))
    w = normalize(weight_update(m, prop, prev, np.ones(8))).weights
    assert np.allclose(w, 0.2, atol=1e-15)


def test_weight_update_hand_computation_n3():
    m = make_synthetic("X1")
    rng = np.random.default_rng(16)
    prev = ParticleSet(rng.standard_normal((3, 1, 10)), np.array([0.2, 0.3, 0.5]), True)
    x = rng.standard_normal((3, 1, 10))
    log_q = np.array([-3.0, -4.5, -2.0])
    z = rng.standard_normal(8)
    got = normalize(weight_update(m, ParticleSet(x, prev.weights, False, log_q), prev, z)).weights
    iv, ie = np.linalg.inv(m.sigma_v), np.linalg.inv(m.sigma_e)
    cv = np.log(np.linalg.det(2 * np.pi * m.sigma_v))
    ce = np.log(np.linalg.det(2 * np.pi * m.sigma_e))
    raw = []
    for i in range(3):
        rv = x[i, 0] - m.A @ prev.particles[i, 0]
        re = z - m.C @ x[i, 0]
        lik = np.exp(-0.5 * re @ ie @ re - 0.5 * ce)
        mot = np.exp(-0.5 * rv @ iv @ rv - 0.5 * cv)
        raw.append(lik * mot / np.exp(log_q[i]) * prev.weights[i])
    raw = np.array(raw)
    assert np.allclose(got, raw / raw.sum(), rtol=0, atol=1e-12)


def test_weight_underflow_is_degenerate():
    m = make_synthetic("X1")
    prev = ParticleSet(np.zeros((2, 1, 10)), np.array([1.0, 0.0]), True)
    prop = ParticleSet(np.zeros((2, 1, 10)), prev.weights, False, np.array([np.inf, 0.0]))
    with pytest.raises(DegenerateSetError):
        weight_update(m, prop, prev, np.zeros(8))


# full steps ------------------------------------------------------------------

def test_pf_step_is_chained_composition():
    m = make_synthetic("X1")
    rec = generate_trajectory(m, 1, 0)
    prev = ParticleSet.point_mass(rec.initial_state, 40)
    for thr in (0.0, 40.0):
        cfg = FilterConfig(40, resample_threshold=thr)
        a = pf_step(m, cfg, prev, rec.measurements[0], np.random.default_rng(1))
        rng = np.random.default_rng(1)
        z = rec.measurements[0]
        b = normalize(weight_update(m, sis_propose(m, prev, z, rng), prev, z))
        if effective_sample_size(b) < thr:
            b = resample(b, "systematic", rng)
        assert np.array_equal(a.particles, b.particles) and np.array_equal(a.weights, b.weights)
    prev = ParticleSet(prev.particles + np.random.default_rng(2).standard_normal((40, 1, 10)),
                       prev.weights, True)
    a = pf_step(m, cfg, prev, z, np.random.default_rng(1))
    rng = np.random.default_rng(1)
    b = resample(normalize(weight_update(m, sis_propose(m, prev, z, rng), prev, z)), "systematic", rng)
    assert np.array_equal(a.particles, b.particles) and np.array_equal(a.weights, b.weights)


def test_noise_free_single_particle_tracks_linear_recursion():
    m = make_synthetic("X1")
    m = replace(m, sigma_v=1e-20 * np.eye(10), sigma_e=np.eye(8), _cache={})
    x0 = np.random.default_rng(17).standard_normal((1, 10))
    est = run_filter(m, FilterConfig(1), np.zeros((5, 8)), x0, np.random.default_rng(0))
    for k in range(5):
        assert np.allclose(est[k, 0], np.linalg.matrix_power(m.A, k + 1) @ x0[0], atol=1e-8)


def test_zero_lf_is_bit_identical_to_plain():
    m = make_synthetic("X1")
    rec = generate_trajectory(m, 30, 3)
    lf = LfModule(LfHyperparams(P=8), 10, np.random.default_rng(0))
    cfg = FilterConfig(25)
    a = run_filter(m, cfg, rec.measurements, rec.initial_state, np.random.default_rng(9))
    b = run_filter(m, cfg, rec.measurements, rec.initial_state, np.random.default_rng(9), lf=lf)
    assert np.array_equal(a, b)


def test_zero_lf_is_bit_identical_for_aux():
    m = make_radar("Y3", t=2)
    rec = generate_trajectory(m, 8, 4)
    lf = LfModule(LfHyperparams(P=8, scale=10.0), 4, np.random.default_rng(0))
    cfg = FilterConfig(30, filter_kind="aux")
    a = run_filter(m, cfg, rec.measurements, rec.initial_state, np.random.default_rng(2))
    b = run_filter(m, cfg, rec.measurements, rec.initial_state, np.random.default_rng(2), lf=lf)
    assert np.array_equal(a, b)


def test_aux_point_mass_without_noise_recovers_truth():
    m = make_radar("Y1")
    m = replace(m, sigma_v=np.zeros((4, 4)), _cache={})
    rec = generate_trajectory(m, 5, 6)
    est = run_filter(m, FilterConfig(20, filter_kind="aux"), rec.measurements, rec.initial_state,
                     np.random.default_rng(0))
    assert np.allclose(est, rec.true_states, atol=1e-9)


def test_aux_two_far_targets_match_single_target_runs():
    two = make_radar("Y3", t=2, q=0.002)
    one = make_radar("Y1", q=0.002)
    errs_two, errs_one = [], []
    cfg = FilterConfig(100, filter_kind="aux")
    for s in range(12):
        rng = np.random.default_rng([s, 9])
        start = np.array([[20.0, 20.0, 0.0, 0.0], [100.0, 100.0, 0.0, 0.0]]) + \
            np.column_stack([rng.uniform(-3, 3, (2, 2)), 0.2 * rng.standard_normal((2, 2))])
        rec = generate_trajectory(two, 10, s, x0=start)
        est = run_filter(two, cfg, rec.measurements, rec.initial_state, np.random.default_rng(s))
        errs_two.append(np.sqrt(((est[..., :2] - rec.true_states[..., :2]) ** 2).sum(-1)).mean())
        for j in range(2):
            r1 = generate_trajectory(one, 10, 1000 + 2 * s + j, x0=start[j:j + 1])
            e1 = run_filter(one, cfg, r1.measurements, r1.initial_state, np.random.default_rng(s + 50))
            errs_one.append(np.sqrt(((e1[..., :2] - r1.true_states[..., :2]) ** 2).sum(-1)).mean())
    a, b = np.mean(errs_two), np.mean(errs_one)
    pooled = np.sqrt(np.var(errs_two) / len(errs_two) + np.var(errs_one) / len(errs_one))
    assert abs(a - b) < 4 * pooled + 0.1 * b


def test_aux_requires_radar():
    m = make_synthetic("X1")
    with pytest.raises(ValueError):
        pf.aux_propagate(m, FilterConfig(5, filter_kind="aux"), ParticleSet.point_mass(np.zeros((1, 10)), 5),
                         np.zeros(8), np.random.default_rng(0))


def test_sis_near_kalman_on_x1():
    m = make_synthetic("X1")
    recs = generate_dataset(m, 40, 12, 77)
    pf_err, kf_err = [], []
    for i, r in enumerate(recs):
        est = run_filter(m, FilterConfig(300), r.measurements, r.initial_state, np.random.default_rng(i))
        kf = kalman_filter(m.A, m.C, m.sigma_v, m.sigma_e, r.initial_state[0], r.measurements)
        pf_err.append(((est[:, 0] - r.true_states[:, 0]) ** 2).sum(-1).mean())
        kf_err.append(((kf - r.true_states[:, 0]) ** 2).sum(-1).mean())
    assert abs(np.mean(pf_err) / np.mean(kf_err) - 1) < 0.1


def test_particle_set_json_round_trip():
    s = _set(np.random.default_rng(18), n=4, t=2, d=3)
    back = ParticleSet.from_json(s.to_json())
    assert np.array_equal(back.particles, s.particles) and np.array_equal(back.weights, s.weights)
    with pytest.raises(ValueError):
        ParticleSet.from_json({"format": "other"})


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 10_000), st.sampled_from(["systematic", "multinomial"]))
def test_pf_step_postconditions(n, seed, scheme):
    m = make_synthetic("X2", snr_db=-5.0)
    rec = generate_trajectory(m, 3, seed)
    rng = np.random.default_rng(seed)
    s = ParticleSet.point_mass(rec.initial_state, n)
    for z in rec.measurements:
        s = pf_step(m, FilterConfig(n, resampling_scheme=scheme), s, z, rng)
        assert s.normalized and abs(s.weights.sum() - 1) < 1e-12 and np.all(s.weights >= 0)
        assert np.all(np.isfinite(s.particles))
        assert 1 - 1e-9 <= effective_sample_size(s) <= n + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30).filter(lambda w: sum(w) > 1e-3))
def test_normalize_property(w):
    s = normalize(ParticleSet(np.zeros((len(w), 1, 1)), np.array(w)))
    assert abs(s.weights.sum() - 1) < 1e-12 and np.all(s.weights >= 0)
    assert 1 - 1e-9 <= effective_sample_size(s) <= len(w) + 1e-9
