import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfpf.lf import LfHyperparams, LfModule, fpm_count, lf_apply, lf_forward, parameter_count
from lfpf.pf import ParticleSet


def randomized(hyper, d_sp, seed=0, scale=0.3):
    """A module whose zero-initialized output layers are filled with random values."""
    mod = LfModule(hyper, d_sp, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in mod.params.values():
        p.value[...] = p.value + scale * rng.standard_normal(p.shape)
    return mod


def random_set(rng, n, t, d):
    w = rng.dirichlet(np.ones(n))
    return ParticleSet(rng.standard_normal((n, t, d)), w, True)


def test_parameter_count_closed_form_matches_tensors():
    for hyper in (LfHyperparams(), LfHyperparams(P=8, J=1, S=1, E=2, B=1), LfHyperparams(P=4, J=3, S=3, B=3)):
        for d in (2, 4, 10):
            assert LfModule(hyper, d).n_parameters() == parameter_count(hyper, d)


def test_hyperparameter_validation():
    for bad in ({"B": 0}, {"P": 0}, {"J": 0}, {"S": 0}, {"E": 3}, {"scale": 0.0}):
        with pytest.raises(ValueError):
            LfHyperparams(**bad)


def test_zero_init_gives_zero_correction():
    mod = LfModule(LfHyperparams(P=8), 3, np.random.default_rng(0))
    s = random_set(np.random.default_rng(1), 7, 2, 3)
    assert np.array_equal(lf_forward(mod, s), np.zeros((7, 7)))
    out = lf_apply(mod, s)
    assert np.array_equal(out.particles, s.particles) and np.array_equal(out.weights, s.weights)


def test_lf_forward_rejects_unnormalized_and_wrong_dimension():
    mod = LfModule(LfHyperparams(P=4), 3)
    rng = np.random.default_rng(2)
    s = random_set(rng, 4, 1, 3)
    with pytest.raises(ValueError):
        lf_forward(mod, ParticleSet(s.particles, s.weights * 2, False))
    with pytest.raises(ValueError):
        lf_forward(mod, random_set(rng, 4, 1, 2))


def test_particle_permutation_equivariance():
    hyper = LfHyperparams(P=8, J=2, S=2, E=2, B=2)
    mod = randomized(hyper, 3)
    rng = np.random.default_rng(3)
    s = random_set(rng, 9, 3, 3)
    ref = lf_forward(mod, s)
    for _ in range(50):
        perm = rng.permutation(9)
        assert np.max(np.abs(lf_forward(mod, s.permuted(perm)) - ref[perm])) < 1e-10


@pytest.mark.parametrize("t", [1, 2, 3, 4])
def test_substate_permutation_equivariance_exhaustive(t):
    mod = randomized(LfHyperparams(P=8, J=2, S=1, E=2, B=1), 2)
    s = random_set(np.random.default_rng(4 + t), 6, t, 2)
    ref = lf_forward(mod, s)
    blocks = ref[:, :-1].reshape(6, t, 2)
    for perm in itertools.permutations(range(t)):
        out = lf_forward(mod, ParticleSet(s.particles[:, list(perm)], s.weights, True))
        assert np.max(np.abs(out[:, :-1].reshape(6, t, 2) - blocks[:, list(perm)])) < 1e-10
        assert np.max(np.abs(out[:, -1] - ref[:, -1])) < 1e-10


def test_baseline_component_is_row_constant():
    mod = randomized(LfHyperparams(P=8, J=2, S=1), 3)
    s = random_set(np.random.default_rng(5), 11, 2, 3)
    last = mod.forward_parts(s.particles, s.weights)[-1]
    base = np.broadcast_to(last["base_dx"].value, (11, 2, 3))
    assert np.max(np.abs(base - base[0])) == 0.0
    assert np.any(base != 0)


def test_single_block_has_no_baseline_head():
    mod = LfModule(LfHyperparams(P=4, J=1), 2)
    assert not any(".base." in k for k in mod.params)
    assert "base_dx" not in mod.forward_parts(np.zeros((3, 1, 2)), np.full(3, 1 / 3))[0]


def test_same_module_runs_for_any_n_and_t():
    mod = randomized(LfHyperparams(P=8), 4)
    rng = np.random.default_rng(6)
    for n, t in ((1, 1), (25, 1), (100, 1), (25, 3), (7, 10)):
        corr = lf_forward(mod, random_set(rng, n, t, 4))
        assert corr.shape == (n, t * 4 + 1) and np.all(np.isfinite(corr))


def test_batched_forward_matches_individual_sets():
    mod = randomized(LfHyperparams(P=8), 3)
    rng = np.random.default_rng(7)
    sets = [random_set(rng, 5, 2, 3) for _ in range(3)]
    dx, dw = mod.forward(np.stack([s.particles for s in sets]), np.stack([s.weights for s in sets]))
    for b, s in enumerate(sets):
        one = lf_forward(mod, s)
        assert np.allclose(dx.value[b].reshape(5, -1), one[:, :-1], atol=1e-12)
        assert np.allclose(dw.value[b], one[:, -1], atol=1e-12)


def test_per_substate_weights_flag():
    mod = randomized(LfHyperparams(P=4, per_substate_weights=True), 2)
    rng = np.random.default_rng(8)
    w = rng.dirichlet(np.ones(5), size=3).T  # (N, t)
    dx, dw = mod.forward(rng.standard_normal((5, 3, 2)), w)
    assert dx.shape == (5, 3, 2) and dw.shape == (5, 3)


def test_scale_hyperparameter_is_a_change_of_units():
    a = randomized(LfHyperparams(P=4, scale=1.0), 2, seed=9)
    b = LfModule(LfHyperparams(P=4, scale=10.0), 2, params={k: p for k, p in a.params.items()})
    s = random_set(np.random.default_rng(10), 4, 1, 2)
    big = ParticleSet(10 * s.particles, s.weights, True)
    ca, cb = lf_forward(a, s), lf_forward(b, big)
    assert np.allclose(10 * ca[:, :-1], cb[:, :-1], atol=1e-12)
    assert np.allclose(ca[:, -1], cb[:, -1], atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    mod = randomized(LfHyperparams(P=4, J=2, S=1, E=2), 3)
    mod.metadata = {"scenario": "X1", "epoch": 3}
    mod.save(tmp_path / "m.json")
    back = LfModule.load(tmp_path / "m.json")
    assert back.hyper == mod.hyper and back.metadata == mod.metadata
    for k, p in mod.params.items():
        assert np.array_equal(back.params[k].value, p.value)
    with pytest.raises(ValueError):
        LfModule.from_json({"format": "nope"})


def test_copy_is_independent():
    mod = randomized(LfHyperparams(P=4), 2)
    c = mod.copy()
    next(iter(c.params.values())).value[...] = 0
    assert not np.array_equal(next(iter(mod.params.values())).value, 0)


def test_zero_final_layers_restores_identity():
    mod = randomized(LfHyperparams(P=4), 2)
    mod.zero_final_layers()
    s = random_set(np.random.default_rng(11), 3, 2, 2)
    assert np.array_equal(lf_forward(mod, s), np.zeros((3, 5)))


def test_fpm_paper_configuration():
    c = fpm_count(LfHyperparams(P=64, B=2, J=2, S=2, E=1), 10, 1, 25)
    assert c["total"] == c["emb"] + c["sa"] + c["final"]
    assert abs(c["total"] / 4.23e5 - 1) < 0.05


def test_fpm_doubling_n_changes_only_attention_term():
    h = LfHyperparams(P=64, B=2)
    a, b = fpm_count(h, 10, 1, 25), fpm_count(h, 10, 1, 50)
    assert a["emb"] == b["emb"] and a["final"] == b["final"]
    assert np.isclose(b["sa"] - a["sa"], h.J * h.S * 2 * h.P ** 2 * 25 / h.P)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 1000))
def test_equivariance_property(n, t, seed):
    mod = randomized(LfHyperparams(P=4, J=2, S=1, E=2, B=1), 2, seed=seed % 7)
    rng = np.random.default_rng(seed)
    s = random_set(rng, n, t, 2)
    ref = lf_forward(mod, s)
    perm, sub = rng.permutation(n), rng.permutation(t)
    out = lf_forward(mod, ParticleSet(s.particles[perm][:, sub], s.weights[perm], True))
    expect = np.concatenate([ref[perm, :-1].reshape(n, t, 2)[:, sub].reshape(n, -1), ref[perm, -1:]], 1)
    assert np.max(np.abs(out - expect)) < 1e-10
