"""Ground truth and baselines: exact enumeration, Kaufman's finite-torus
Ising partition function, and Markov chain samplers.

The samplers run ``n_chains`` independent chains in lock-step (vectorised over
the chain axis); every chain obeys detailed balance on its own.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from partivae.errors import CapacityError, ParameterError
from partivae.targets import IsingTarget, RankTarget, SbmTarget

MAX_SPINS = 24
MAX_RANK_N = 8


@dataclass
class EnumerationResult:
    """Exact summary of a brute-forced target.

    ``marginals`` is ``E[x_i]`` for spin targets and the position matrix
    ``P[i, k] = Prob(object i has rank k+1)`` for rankings. ``pair_marginals``
    holds ``E[x_i x_j]`` (spins only, when requested).
    """

    lnZ: float
    marginals: np.ndarray
    pair_marginals: np.ndarray | None = None
    top_states: list[tuple[np.ndarray, float]] = field(default_factory=list)


def _spin_states(start: int, stop: int, n: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n, dtype=np.int64)) & 1
    return (2 * bits - 1).astype(np.float64)


def enumerate_lnZ(target, pairs: bool = False, top: int = 0, chunk: int = 1 << 15) -> EnumerationResult:
    """Exact ``ln sum_x f(x)`` with marginals, by brute force.

    Log-sum-exp is streamed over chunks so memory stays bounded.
    """
    if target.domain == "rank":
        return _enumerate_rank(target, top)
    n = target.n
    if n > MAX_SPINS:
        raise CapacityError(f"2^{n} states exceed the enumeration cap of 2^{MAX_SPINS}")
    total = 1 << n
    m = -np.inf
    s = 0.0
    sx = np.zeros(n)
    sxx = np.zeros((n, n)) if pairs else None
    best: list[tuple[float, np.ndarray]] = []
    for start in range(0, total, chunk):
        x = _spin_states(start, min(start + chunk, total), n)
        lf = np.asarray(target.log_f(x), dtype=np.float64)
        cm = lf.max()
        if cm > m:
            scale = np.exp(m - cm) if np.isfinite(m) else 0.0
            s *= scale
            sx *= scale
            if pairs:
                sxx *= scale
            m = cm
        wgt = np.exp(lf - m)
        s += wgt.sum()
        sx += wgt @ x
        if pairs:
            sxx += (x * wgt[:, None]).T @ x
        if top:
            k = min(top, len(lf))
            sel = np.argpartition(-lf, k - 1)[:k]
            best.extend((float(lf[i]), x[i].copy()) for i in sel)
            best = sorted(best, key=lambda t: -t[0])[:top]
    lnZ = float(m + np.log(s))
    return EnumerationResult(
        lnZ=lnZ,
        marginals=sx / s,
        pair_marginals=None if sxx is None else sxx / s,
        top_states=[(x, float(np.exp(lf - lnZ))) for lf, x in best],
    )


def all_rankings(n: int) -> np.ndarray:
    """Every permutation as integer ranks, shape (n!, n)."""
    return np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int64)


def _enumerate_rank(target: RankTarget, top: int) -> EnumerationResult:
    n = target.n
    if n > MAX_RANK_N:
        raise CapacityError(f"{n}! permutations exceed the enumeration cap of {MAX_RANK_N}!")
    ranks = all_rankings(n)
    lf = target.log_f(ranks / n)
    lnZ = float(special.logsumexp(lf))
    p = np.exp(lf - lnZ)
    pos = np.zeros((n, n))
    for i in range(n):
        np.add.at(pos[i], ranks[:, i] - 1, p)
    order = np.argsort(-lf, kind="stable")[:top]
    return EnumerationResult(lnZ=lnZ, marginals=pos, top_states=[(ranks[i] / n, float(p[i])) for i in order])


# -- exact Ising on the torus ------------------------------------------------

def _log_2cosh(z):
    z = np.abs(z)
    return z + np.log1p(np.exp(-2.0 * z))


def _log_abs_2sinh(z):
    z = np.abs(z)
    with np.errstate(divide="ignore"):
        return z + np.log(-np.expm1(-2.0 * z))


def ising_exact_lnZ(L: int, beta: float) -> float:
    """Exact ln Z of the L x L periodic Ising model (J = 1, h = 0).

    Kaufman's four-product formula, evaluated in log space. The ``gamma_k``
    are written as ``arccosh(1 + delta_k)`` with ``delta_k >= 0`` built from
    the duality identity ``sinh 2K sinh 2K* = 1``, so no cancellation occurs;
    ``gamma_0 = 2(K - K*)`` keeps its sign, which makes the fourth product
    negative above the critical temperature.
    """
    if int(L) != L or L < 3:
        raise ParameterError(f"lattice side must be an integer >= 3, got {L}")
    if not beta >= 0:
        raise ParameterError(f"beta must be non-negative, got {beta}")
    L = int(L)
    n = L * L
    K = float(beta)
    if K == 0.0:
        return n * math.log(2.0)
    K_star = -0.5 * math.log(math.tanh(K))
    k = np.arange(2 * L)
    delta = 2.0 * math.sinh(K - K_star) ** 2 + 2.0 * np.sin(np.pi * k / (2 * L)) ** 2
    gamma = np.log1p(delta + np.sqrt(delta * (delta + 2.0)))
    gamma[0] = 2.0 * (K - K_star)
    g_odd = 0.5 * L * gamma[1::2]
    g_even = 0.5 * L * gamma[0::2]
    logs = np.array([
        _log_2cosh(g_odd).sum(),
        _log_abs_2sinh(g_odd).sum(),
        _log_2cosh(g_even).sum(),
        _log_abs_2sinh(g_even).sum(),
    ])
    signs = np.array([1.0, 1.0, 1.0, np.prod(np.sign(g_even))])
    top = logs.max()
    bracket = top + math.log(float(np.sum(signs * np.exp(logs - top))))
    two_sinh = 2.0 * K + math.log(-math.expm1(-4.0 * K))  # ln(2 sinh 2K)
    return -math.log(2.0) + 0.5 * n * two_sinh + bracket


def onsager_lnZ_per_site(beta: float) -> float:
    """Infinite-lattice free energy ``lim ln Z / n`` (Onsager)."""
    K = float(beta)
    if K == 0.0:
        return math.log(2.0)
    kappa = 2.0 * math.sinh(2 * K) / math.cosh(2 * K) ** 2

    def integrand(theta):
        return math.log(0.5 * (1.0 + math.sqrt(max(0.0, 1.0 - (kappa * math.sin(theta)) ** 2))))

    val, _ = integrate.quad(integrand, 0.0, math.pi, limit=200)
    return math.log(2.0 * math.cosh(2 * K)) + val / (2 * math.pi)


BETA_CRITICAL = -math.log(math.sqrt(2.0) - 1.0) / 2.0


# -- Markov chains -------------------------------------------------------------

@dataclass
class McmcConfig:
    n_sweeps: int = 10_000
    burn_in: int | None = None  # default: 10% of n_sweeps
    thin: int = 1  # sweeps between retained samples
    seed: int = 0
    n_chains: int = 1
    proposal: str = "random"  # ranking only: "random" or "adjacent" transpositions

    def __post_init__(self):
        if self.burn_in is None:
            self.burn_in = self.n_sweeps // 10
        if self.n_sweeps < 1 or not 0 <= self.burn_in < self.n_sweeps:
            raise ParameterError("need 0 <= burn_in < n_sweeps")
        if self.thin < 1 or self.n_chains < 1:
            raise ParameterError("thin and n_chains must be >= 1")
        if self.proposal not in ("random", "adjacent"):
            raise ParameterError(f"unknown proposal {self.proposal!r}")


@dataclass
class McmcResult:
    samples: np.ndarray  # (n_kept * n_chains, n), ordered by sweep then chain
    acceptance_rate: float


def metropolis_acceptance(log_ratio):
    """``min(1, exp(log_ratio))``."""
    return np.exp(np.minimum(0.0, np.asarray(log_ratio, dtype=np.float64)))


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _run(cfg: McmcConfig, state, sweep, record):
    kept = []
    accepted = 0
    proposed = 0
    for t in range(cfg.n_sweeps):
        a, p = sweep(state)
        accepted += a
        proposed += p
        if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
            kept.append(record(state))
    return McmcResult(np.concatenate(kept), accepted / max(proposed, 1))


def mcmc_ising(target: IsingTarget, cfg: McmcConfig) -> McmcResult:
    """Single-site Metropolis; a sweep is ``n`` random-site proposals per chain."""
    rng = _rng(cfg.seed)
    n, C = target.n, cfg.n_chains
    nbr = np.zeros((n, 4), dtype=np.int64)
    fill = np.zeros(n, dtype=np.int64)
    for a, b in target.bonds:
        nbr[a, fill[a]] = b
        fill[a] += 1
        nbr[b, fill[b]] = a
        fill[b] += 1
    x = rng.choice(np.array([-1, 1], dtype=np.int8), size=(C, n))
    rows = np.arange(C)

    def sweep(x):
        sites = rng.integers(0, n, size=(n, C))
        u = rng.random((n, C))
        acc = 0
        for s, uu in zip(sites, u):
            h = x[rows[:, None], nbr[s]].sum(axis=1, dtype=np.int64)
            d_bond = -2 * x[rows, s].astype(np.int64) * h
            ok = uu < metropolis_acceptance(target.beta * d_bond)
            x[rows[ok], s[ok]] *= -1
            acc += int(ok.sum())
        return acc, n * C

    return _run(cfg, x, sweep, lambda x: x.copy())


def mcmc_sbm(target: SbmTarget, cfg: McmcConfig) -> McmcResult:
    """Single-site heat-bath updates of group labels at fixed omega."""
    rng = _rng(cfg.seed)
    n, C = target.n, cfg.n_chains
    w_in, w_out = target.omega_in, target.omega_out
    G = target.G
    A = G * math.log(w_in / w_out) + (1 - G) * math.log((1 - w_in) / (1 - w_out))
    np.fill_diagonal(A, 0.0)
    x = rng.choice(np.array([-1.0, 1.0]), size=(C, n))
    rows = np.arange(C)

    def sweep(x):
        sites = rng.integers(0, n, size=(n, C))
        u = rng.random((n, C))
        for s, uu in zip(sites, u):
            h = np.einsum("cj,cj->c", A[s], x)
            x[rows, s] = np.where(uu < special.expit(h), 1.0, -1.0)
        return n * C, n * C

    return _run(cfg, x, sweep, lambda x: x.astype(np.int8))


def mcmc_rank(target: RankTarget, cfg: McmcConfig) -> McmcResult:
    """Metropolis over permutations with transposition proposals.

    Samples are integer ranks (1..n) per object. Acceptance is
    ``min(1, ((1-w)/w)^dV)``.
    """
    rng = _rng(cfg.seed)
    n, C = target.n, cfg.n_chains
    if n < 2:
        raise ParameterError("need at least two objects")
    W = target.wins
    log_r = math.log((1 - target.w) / target.w)
    pos = np.stack([rng.permutation(n) + 1 for _ in range(C)])
    obj_at = np.argsort(pos, axis=1)  # obj_at[c, k] = object with rank k+1
    rows = np.arange(C)

    def local_violations(p, i):
        # violations among comparisons touching object i, for positions p
        pi = p[rows, i][:, None]
        return (W[i] * (pi > p)).sum(axis=1) + (W[:, i].T * (p > pi)).sum(axis=1)

    def sweep(p):
        acc = 0
        u = rng.random((n, C))
        if cfg.proposal == "adjacent":
            ks = rng.integers(0, n - 1, size=(n, C))
        else:
            first = rng.integers(0, n, size=(n, C))
            second = (first + rng.integers(1, n, size=(n, C))) % n
        for t in range(n):
            if cfg.proposal == "adjacent":
                k = ks[t]
                i, j = obj_at[rows, k], obj_at[rows, k + 1]
                dV = W[i, j] - W[j, i]
            else:
                i, j = first[t], second[t]
                pair = lambda q: W[i, j] * (q[rows, i] > q[rows, j]) + W[j, i] * (q[rows, j] > q[rows, i])
                before = local_violations(p, i) + local_violations(p, j) - pair(p)
                q = p.copy()
                q[rows, i], q[rows, j] = p[rows, j], p[rows, i]
                after = local_violations(q, i) + local_violations(q, j) - pair(q)
                dV = after - before
            ok = u[t] < metropolis_acceptance(dV * log_r)
            r = rows[ok]
            pi, pj = p[r, i[ok]].copy(), p[r, j[ok]].copy()
            p[r, i[ok]], p[r, j[ok]] = pj, pi
            obj_at[r, pj - 1], obj_at[r, pi - 1] = i[ok], j[ok]
            acc += int(ok.sum())
        return acc, n * C

    return _run(cfg, pos, sweep, lambda p: p.astype(np.int16))


def position_marginals(ranks, n: int) -> np.ndarray:
    """Empirical ``P[i, k]`` = fraction of samples with object i at rank k+1."""
    ranks = np.asarray(ranks, dtype=np.int64)
    out = np.zeros((n, n))
    for i in range(n):
        out[i] = np.bincount(ranks[:, i] - 1, minlength=n)[:n]
    return out / max(len(ranks), 1)


def total_variation(p, q) -> np.ndarray:
    """Row-wise total variation distance."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)
