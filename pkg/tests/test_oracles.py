import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from partivae.errors import CapacityError, ParameterError
from partivae.oracles import (
    BETA_CRITICAL,
    McmcConfig,
    all_rankings,
    enumerate_lnZ,
    ising_exact_lnZ,
    mcmc_ising,
    mcmc_rank,
    mcmc_sbm,
    metropolis_acceptance,
    onsager_lnZ_per_site,
    position_marginals,
    total_variation,
)
from partivae.targets import IsingTarget, RankTarget, SbmTarget


def test_enumerate_ising_beta_zero():
    assert enumerate_lnZ(IsingTarget(3, 0.0)).lnZ == pytest.approx(6.23832462503950778, rel=1e-14)


def test_enumerate_rank_no_comparisons():
    assert enumerate_lnZ(RankTarget(3, np.zeros((0, 2)))).lnZ == pytest.approx(1.79175946922805500, rel=1e-14)


def test_enumerate_sbm_empty():
    res = enumerate_lnZ(SbmTarget(np.zeros((3, 3)), 0.1, 0.1))
    assert res.lnZ == pytest.approx(-0.31608154697347890, rel=1e-13)
    np.testing.assert_allclose(res.marginals, 0.0, atol=1e-15)


def test_enumerate_capacity():
    with pytest.raises(CapacityError):
        enumerate_lnZ(IsingTarget(5, 0.3))
    with pytest.raises(CapacityError):
        enumerate_lnZ(RankTarget(10, [(0, 1)]))


def test_enumerate_probabilities_sum_to_one():
    r = np.random.default_rng(0)
    comps = r.integers(0, 5, size=(12, 2))
    comps = comps[comps[:, 0] != comps[:, 1]]
    res = enumerate_lnZ(RankTarget(5, comps), top=200)
    assert abs(res.marginals.sum(axis=1) - 1).max() < 1e-10
    assert abs(res.marginals.sum(axis=0) - 1).max() < 1e-10
    assert sum(p for _, p in res.top_states) <= 1 + 1e-12


def test_enumeration_is_overflow_free():
    t = IsingTarget(3, 500.0)  # ln f reaches 9000
    res = enumerate_lnZ(t)
    assert res.lnZ == pytest.approx(9000 + math.log(2), rel=1e-12)


def test_chunked_enumeration_matches_single_pass():
    t = IsingTarget(4, 0.31)
    assert enumerate_lnZ(t, chunk=97).lnZ == pytest.approx(enumerate_lnZ(t).lnZ, rel=1e-13)


def test_top_states_sorted():
    res = enumerate_lnZ(IsingTarget(3, 0.8), top=4)
    probs = [p for _, p in res.top_states]
    assert probs == sorted(probs, reverse=True)
    assert np.all(np.abs(res.top_states[0][0]) == 1)
    assert abs(res.top_states[0][0].sum()) == 9


def test_all_rankings():
    perms = all_rankings(4)
    assert perms.shape == (24, 4)
    assert len({tuple(p) for p in perms}) == 24


@given(st.floats(0, 50))
@settings(max_examples=50, deadline=None)
def test_enumeration_bounds(beta):
    # the ground state aligns all 18 bonds; there are 2^9 states
    lnZ = enumerate_lnZ(IsingTarget(3, beta)).lnZ
    assert 18 * beta <= lnZ <= 18 * beta + 9 * math.log(2) + 1e-9


class TestExactIsing:
    def test_beta_zero(self):
        assert ising_exact_lnZ(4, 0.0) == pytest.approx(11.09035488895912495, rel=1e-15)

    @pytest.mark.parametrize("L", [3, 4])
    @pytest.mark.parametrize("beta", [0.0, 0.2, BETA_CRITICAL, 0.7, 1.0])
    def test_matches_enumeration(self, L, beta):
        exact = enumerate_lnZ(IsingTarget(L, beta)).lnZ
        assert abs(ising_exact_lnZ(L, beta) - exact) / abs(exact) <= 1e-9

    def test_critical_value(self):
        assert BETA_CRITICAL == pytest.approx(0.4406867935097715, rel=1e-15)

    def test_large_beta_no_overflow(self):
        v = ising_exact_lnZ(32, 50.0)
        # ground states dominate: ln 2 + 2 n beta
        assert v == pytest.approx(math.log(2) + 2 * 1024 * 50.0, rel=1e-12)

    def test_converges_to_onsager(self):
        inf = onsager_lnZ_per_site(0.7)
        gaps = [abs(ising_exact_lnZ(L, 0.7) / L**2 - inf) for L in (4, 8, 16, 32)]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        # ordered phase: the two magnetised sectors leave ln 2 / n on a finite torus
        assert gaps[-1] == pytest.approx(math.log(2) / 32**2, abs=1e-6)

    def test_rejects_small_lattice(self):
        with pytest.raises(ParameterError):
            ising_exact_lnZ(2, 0.3)


def test_metropolis_acceptance_values():
    # four aligned bonds broken at beta 0.5: bond-sum change -8
    assert metropolis_acceptance(0.5 * -8) == pytest.approx(0.01831563888873418, rel=1e-14)
    assert metropolis_acceptance(2 * math.log(1 / 3)) == pytest.approx(1 / 9, rel=1e-14)
    assert metropolis_acceptance(3.0) == 1.0


def test_mcmc_config_validation():
    assert McmcConfig(n_sweeps=100).burn_in == 10
    with pytest.raises(ParameterError):
        McmcConfig(n_sweeps=10, burn_in=10)
    with pytest.raises(ParameterError):
        McmcConfig(n_sweeps=10, thin=0)


def test_ising_beta_zero_accepts_everything():
    res = mcmc_ising(IsingTarget(3, 0.0), McmcConfig(n_sweeps=200, n_chains=50, seed=3))
    assert res.acceptance_rate == 1.0
    assert abs(res.samples.mean()) < 0.02


def test_sbm_empty_graph_uniform_labels():
    t = SbmTarget(np.zeros((6, 6)), 0.3, 0.3)
    res = mcmc_sbm(t, McmcConfig(n_sweeps=1000, n_chains=100, seed=4))
    assert np.abs((res.samples == 1).mean(axis=0) - 0.5).max() < 0.01


def test_sbm_two_cliques():
    G = np.zeros((8, 8))
    G[:4, :4] = 1
    G[4:, 4:] = 1
    np.fill_diagonal(G, 0)
    res = mcmc_sbm(SbmTarget(G, 0.9, 0.05), McmcConfig(n_sweeps=300, n_chains=20, seed=5))
    x = res.samples.astype(float)
    split = np.array([1, 1, 1, 1, -1, -1, -1, -1.0])
    assert np.mean(np.abs(x @ split) == 8) > 0.95


def test_rank_w_half_uniform():
    t = RankTarget(5, [(0, 1), (2, 3), (4, 0)], 0.5)
    res = mcmc_rank(t, McmcConfig(n_sweeps=4000, n_chains=20, seed=6))
    assert res.acceptance_rate == 1.0
    assert np.abs(position_marginals(res.samples, 5) - 0.2).max() < 0.01


@pytest.mark.parametrize("proposal", ["random", "adjacent"])
def test_rank_matches_enumeration_small(proposal):
    t = RankTarget(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 0.75)
    ex = enumerate_lnZ(t)
    res = mcmc_rank(t, McmcConfig(n_sweeps=4000, n_chains=20, seed=7, proposal=proposal))
    assert total_variation(position_marginals(res.samples, 4), ex.marginals).max() < 0.02


def test_mcmc_is_seeded():
    t = IsingTarget(3, 0.3)
    cfg = McmcConfig(n_sweeps=50, n_chains=4, seed=11)
    assert np.array_equal(mcmc_ising(t, cfg).samples, mcmc_ising(t, cfg).samples)


def test_total_variation():
    assert total_variation([0.5, 0.5], [1.0, 0.0]) == 0.5
    assert total_variation([[0.2, 0.8]], [[0.2, 0.8]])[0] == 0.0
