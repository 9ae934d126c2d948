import math

import numpy as np
import pytest

from partivae.errors import EvaluationError, ParameterError, TrainingError
from partivae.oracles import enumerate_lnZ
from partivae.seeding import derive_rng
from partivae.targets import IsingTarget, RankTarget, SbmTarget, planted_partition, synthetic_comparisons
from partivae.vae import (
    ElboEstimate,
    LatentSpec,
    TrainConfig,
    elbo_term,
    estimate_lnZ,
    init_model,
    mean_field,
    relaxed_elbo,
    sample_x,
    sweep_D,
    train,
)

from conftest import central_diff, rel_err

LN2 = math.log(2)


def random_model(target, D, hidden, rng, scale=0.5):
    m = init_model(target, D, hidden, rng)
    for net in (m.decoder.net, m.encoder.net):
        net.w2[:] = rng.normal(scale=scale, size=net.w2.shape)
        net.b1[:] = rng.normal(scale=scale, size=net.b1.shape)
        net.b2[:] = rng.normal(scale=scale, size=net.b2.shape)
    return m


def test_latent_spec():
    assert LatentSpec(3).log_prior == pytest.approx(-3 * LN2)
    with pytest.raises(ParameterError):
        LatentSpec(-1)
    y = LatentSpec(4).sample(np.random.default_rng(0), 1000)
    assert set(np.unique(y)) == {-1.0, 1.0}


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(tau=0)
    with pytest.raises(ParameterError):
        TrainConfig(n_steps=-1)


class TestElboTerm:
    def test_uniform_saturation(self, rng):
        t = IsingTarget(3, 0.0)
        m = init_model(t, 2, 16, rng)
        y = LatentSpec(2).sample(rng, 50)
        x = rng.choice([-1.0, 1.0], size=(50, 9))
        terms = elbo_term(t, m.decoder, m.encoder, y, x)
        np.testing.assert_allclose(terms, 9 * LN2, rtol=1e-14)

    def test_mean_field_summand(self, rng):
        t = IsingTarget(3, 0.4)
        m = random_model(t, 0, 8, rng)
        x = rng.choice([-1.0, 1.0], size=(20, 9))
        y = np.zeros((20, 0))
        phi, _ = m.decoder.fields(y)
        log_r = (x * phi - np.logaddexp(phi, -phi)).sum(axis=1)
        np.testing.assert_allclose(elbo_term(t, m.decoder, m.encoder, y, x), t.log_f(x) - log_r, rtol=1e-13)

    def test_ranking_uniform_decoder_gives_log_n_factorial(self, rng):
        t = RankTarget(5, np.zeros((0, 2)))
        m = init_model(t, 1, 8, rng)
        y = LatentSpec(1).sample(rng, 10)
        terms = elbo_term(t, m.decoder, m.encoder, y, rng.random((10, 5)))
        np.testing.assert_allclose(terms, math.log(120), rtol=1e-13)

    def test_non_finite_names_factor(self, rng):
        t = IsingTarget(3, 0.2)
        m = init_model(t, 1, 4, rng)
        m.decoder.net.b2[:] = np.inf
        with pytest.raises(EvaluationError, match="ln R"):
            elbo_term(t, m.decoder, m.encoder, np.ones((1, 1)), -np.ones((1, 9)))

    def test_small_random_nets_bound_holds(self):
        r = np.random.default_rng(1)
        t = IsingTarget(3, 0.35)
        exact = enumerate_lnZ(t).lnZ
        m = random_model(t, 2, 8, r)
        est = estimate_lnZ(t, m, 1_000_000, rng=r)
        assert est.mean <= exact + 3 * est.stderr


class TestEstimate:
    def test_saturated_zero_variance(self, rng):
        t = IsingTarget(4, 0.0)
        est = estimate_lnZ(t, init_model(t, 3, 8, rng), 1000)
        assert est.mean == pytest.approx(16 * LN2, rel=1e-14)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)

    def test_needs_two_samples(self, rng):
        t = IsingTarget(3, 0.1)
        with pytest.raises(ParameterError):
            estimate_lnZ(t, init_model(t, 1, 4, rng), 1)

    def test_stderr_scaling(self):
        r = np.random.default_rng(2)
        t = IsingTarget(3, 0.5)
        m = random_model(t, 2, 8, r)
        small = np.mean([estimate_lnZ(t, m, 2000, rng=r).stderr for _ in range(20)])
        large = np.mean([estimate_lnZ(t, m, 4000, rng=r).stderr for _ in range(20)])
        assert small / large == pytest.approx(math.sqrt(2), rel=0.05)

    def test_from_terms(self):
        est = ElboEstimate.from_terms([1.0, 2.0, 3.0])
        assert est.mean == 2.0
        assert est.stderr == pytest.approx(1.0 / math.sqrt(3))
        assert est.to_dict()["mode"] == "hard"

    def test_ranking_estimate_bounded(self, rng):
        comps, _ = synthetic_comparisons(5, 12, 0.75, rng)
        t = RankTarget(5, comps)
        exact = enumerate_lnZ(t).lnZ
        for s in range(5):
            est = estimate_lnZ(t, random_model(t, 2, 8, np.random.default_rng(s)), 20000, seed=s)
            assert est.mean <= exact + 3 * est.stderr


class TestSample:
    def test_large_fields_all_up(self, rng):
        t = IsingTarget(3, 0.3)
        m = init_model(t, 2, 8, rng, init_fields=np.full(9, 50.0))
        xs = sample_x(t, m.decoder, m.latent, 100)
        assert np.all(xs == 1)

    def test_zero_fields_fair(self, rng):
        t = IsingTarget(3, 0.3)
        m = init_model(t, 3, 8, rng)
        xs = sample_x(t, m.decoder, m.latent, 100_000, seed=4)
        assert np.abs(xs.mean(axis=0)).max() < 3 * 4 / math.sqrt(1e5)

    def test_rankings_are_permutations(self, rng):
        t = RankTarget(6, [(0, 1)])
        m = random_model(t, 2, 8, rng)
        xs = sample_x(t, m.decoder, m.latent, 500)
        np.testing.assert_array_equal(np.sort(xs * 6, axis=1), np.tile(np.arange(1, 7), (500, 1)))

    def test_trained_correlations_match_enumeration(self):
        t = IsingTarget(3, 0.2)
        ex = enumerate_lnZ(t, pairs=True)
        res = train(t, LatentSpec(8), TrainConfig())
        xs = sample_x(t, res.decoder, res.model.latent, 100_000, seed=3)
        emp = xs.T @ xs / len(xs)
        assert np.abs(emp - ex.pair_marginals).max() < 0.02


def _fd_relaxed(target, model, y, u, tau, target_grads=False):
    ev = relaxed_elbo(target, model, y, u, tau, grad=True, target_grads=target_grads)

    def f():
        return float(relaxed_elbo(target, model, y, u, tau, grad=False).values.mean())

    params = model.arrays() + (target.params() if target_grads else [])
    grads = ev.model_grads + (ev.target_grads if target_grads else [])
    fd = central_diff(f, params, h_rel=1e-6)
    return max(rel_err(g, d, floor=1e-4).max() for g, d in zip(grads, fd))


class TestRelaxedGradients:
    def test_ising(self, rng):
        t = IsingTarget(3, 0.4)
        m = random_model(t, 2, 6, rng, scale=0.3)
        assert _fd_relaxed(t, m, LatentSpec(2).sample(rng, 4), rng.uniform(0.05, 0.95, (4, 9)), 0.5) < 1e-3

    def test_sbm_with_omega(self, rng):
        G, _ = planted_partition(8, 0.6, 0.2, rng)
        t = SbmTarget(G, 0.6, 0.2)
        m = random_model(t, 2, 6, rng, scale=0.3)
        err = _fd_relaxed(t, m, LatentSpec(2).sample(rng, 4), rng.uniform(0.05, 0.95, (4, 8)), 0.5, True)
        assert err < 1e-3

    @pytest.mark.parametrize("family", ["kumaraswamy", "beta_newton"])
    def test_ranking(self, rng, family):
        comps, _ = synthetic_comparisons(5, 10, 0.75, rng)
        t = RankTarget(5, comps, sigmoid_k=5.0)
        m = random_model(t, 2, 6, rng, scale=0.3)
        m.decoder.family = family
        err = _fd_relaxed(t, m, LatentSpec(2).sample(rng, 4), rng.uniform(0.05, 0.95, (4, 5)), 0.5, True)
        assert err < 1e-3


class TestTrain:
    def test_zero_steps_unchanged(self, rng):
        t = IsingTarget(3, 0.3)
        m = init_model(t, 2, 8, rng)
        before = m.copy()
        res = train(t, LatentSpec(2), TrainConfig(n_steps=0), model=m)
        assert len(res.trace) == 0
        for a, b in zip(res.model.arrays(), before.arrays()):
            assert np.array_equal(a, b)

    def test_beta_zero_reaches_exact(self):
        t = IsingTarget(4, 0.0)
        res = train(t, LatentSpec(2), TrainConfig(n_steps=300, hidden=64))
        est = estimate_lnZ(t, res.model, 20000)
        assert est.mean == pytest.approx(16 * LN2, abs=0.05)

    def test_factorized_family_saturates(self):
        # D = 0 is the product family, which contains f = 1 exactly
        t = IsingTarget(4, 0.0)
        res = train(t, LatentSpec(0), TrainConfig())
        est = estimate_lnZ(t, res.model, 20000)
        assert est.mean == pytest.approx(16 * LN2, rel=0.005)
        assert est.stderr**2 * est.n_samples < 1e-3

    def test_deterministic(self):
        t = IsingTarget(3, 0.3)
        cfg = TrainConfig(n_steps=50, hidden=32, seed=9)
        a = train(t, LatentSpec(2), cfg)
        b = train(t, LatentSpec(2), cfg)
        assert np.array_equal(a.trace, b.trace)
        assert estimate_lnZ(t, a.model, 1000) == estimate_lnZ(t, b.model, 1000)

    def test_ranking_bound_holds_while_training(self):
        comps, _ = synthetic_comparisons(6, 20, 0.75, derive_rng(0, 4))
        t = RankTarget(6, comps)
        exact = enumerate_lnZ(t).lnZ
        for steps in (0, 50, 400):
            res = train(t, LatentSpec(2), TrainConfig(n_steps=steps, hidden=128))
            est = estimate_lnZ(t, res.model, 20000)
            assert est.mean <= exact + 3 * est.stderr

    def test_learns_omega(self):
        G, _ = planted_partition(12, 0.8, 0.1, derive_rng(1, 4))
        t = SbmTarget(G, 0.5, 0.5)
        res = train(t, LatentSpec(1), TrainConfig(n_steps=600, hidden=64, learn_omega=True),
                    init_fields=np.where(np.arange(12) < 6, 1.0, -1.0))
        assert len(res.target_params) == 1
        assert t.omega_in != 0.5 and t.omega_out != 0.5

    def test_omega_frozen_by_default(self):
        G, _ = planted_partition(8, 0.8, 0.1, derive_rng(1, 4))
        t = SbmTarget(G, 0.4, 0.2)
        train(t, LatentSpec(1), TrainConfig(n_steps=20, hidden=16))
        assert t.omega_in == pytest.approx(0.4) and t.omega_out == pytest.approx(0.2)

    def test_non_finite_aborts_with_step(self):
        class Exploding(IsingTarget):
            calls = 0

            def soft_log_f(self, x, grad=False):
                Exploding.calls += 1
                out = super().soft_log_f(x, grad)
                if Exploding.calls > 3:
                    return (out[0] * np.nan, out[1]) if grad else out * np.nan
                return out

        with pytest.raises(TrainingError) as info:
            train(Exploding(3, 0.2), LatentSpec(1), TrainConfig(n_steps=10, hidden=8))
        assert info.value.step == 3
        assert info.value.snapshot is not None


class TestSweep:
    def test_tie_goes_to_smallest_D(self):
        t = IsingTarget(3, 0.0)
        res = sweep_D(t, [4, 1, 2], TrainConfig(n_steps=0, hidden=8, eval_samples=100))
        assert [r.D for r in res.rows] == [1, 2, 4]
        assert all(r.estimate.mean == pytest.approx(9 * LN2) for r in res.rows)
        assert res.best_row.D == 1

    def test_rows_bounded(self):
        t = IsingTarget(3, 0.6)
        exact = enumerate_lnZ(t).lnZ
        res = sweep_D(t, [0, 1, 2], TrainConfig(n_steps=200, hidden=64, eval_samples=20000))
        for r in res.rows:
            assert r.estimate.mean <= exact + 3 * r.estimate.stderr
        assert res.best_row.estimate.mean == max(r.estimate.mean for r in res.rows)

    def test_empty_set(self):
        with pytest.raises(ParameterError):
            sweep_D(IsingTarget(3, 0.1), [], TrainConfig())

    def test_single_D_matches_train(self):
        t = IsingTarget(3, 0.3)
        cfg = TrainConfig(n_steps=30, hidden=16, eval_samples=500)
        sw = sweep_D(t, [2], cfg)
        tr = train(t, LatentSpec(2), cfg)
        assert np.array_equal(sw.rows[0].result.trace, tr.trace)


class TestMeanField:
    def test_beta_zero(self):
        t = IsingTarget(3, 0.0)
        phi, est, _ = mean_field(t, TrainConfig(n_steps=0, hidden=4, eval_samples=100))
        assert np.all(phi == 0)
        assert est.mean == pytest.approx(9 * LN2)

    def test_bounded(self):
        t = IsingTarget(3, 0.5)
        exact = enumerate_lnZ(t).lnZ
        phi, est, _ = mean_field(t, TrainConfig(n_steps=300, hidden=8, eval_samples=20000))
        assert phi.shape == (9,)
        assert est.mean <= exact + 3 * est.stderr

    def test_rejects_ranking(self):
        with pytest.raises(ParameterError):
            mean_field(RankTarget(3, [(0, 1)]), TrainConfig(n_steps=0))
