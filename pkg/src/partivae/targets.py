"""Unnormalised target distributions.

Every target exposes

* ``log_f(x)`` on hard configurations, batched over the leading axis;
* ``soft_log_f(x, grad=True)`` on relaxed configurations, returning the value
  and its gradient in ``x``;
* ``params()`` / ``param_grads(x, upstream)`` for parameters that the trainer
  may learn (empty for Ising). Whether they are learned is the trainer's call.

Spin targets (Ising, SBM) use ``x_i in {-1, +1}`` relaxed to ``(-1, 1)``.
The ranking target uses ``x_i in {1/n, ..., n/n}`` relaxed to ``(0, 1)``.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
from scipy import special

from partivae.errors import DataError, DimensionError, ParameterError
from partivae.relax import soft_indicator

LN2 = np.log(2.0)


def _batch(x, n: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != n:
        raise DimensionError(f"configuration has shape {x.shape}, target has {n} variables")
    return xb, single


def _unbatch(v, single):
    return v[0] if single else v


class IsingTarget:
    """Ferromagnet ``f(x) = exp(beta * sum_bonds x_i x_j)`` on an L x L torus."""

    kind = "ising"
    domain = "spin"

    def __init__(self, L: int, beta: float):
        if int(L) != L or L < 3:
            raise ParameterError(f"lattice side must be an integer >= 3, got {L}")
        if not beta >= 0:
            raise ParameterError(f"beta must be non-negative, got {beta}")
        self.L = int(L)
        self.beta = float(beta)
        self.n = self.L * self.L
        idx = np.arange(self.n).reshape(self.L, self.L)
        right = np.stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()], axis=1)
        down = np.stack([idx.ravel(), np.roll(idx, -1, axis=0).ravel()], axis=1)
        self.bonds = np.concatenate([right, down])
        adj = np.zeros((self.n, self.n))
        np.add.at(adj, (self.bonds[:, 0], self.bonds[:, 1]), 1.0)
        self.adjacency = adj + adj.T

    def spec(self) -> dict:
        return {"kind": "ising", "L": self.L, "beta": self.beta}

    def bond_sum(self, x) -> np.ndarray:
        xb, single = _batch(x, self.n)
        return _unbatch((xb[:, self.bonds[:, 0]] * xb[:, self.bonds[:, 1]]).sum(axis=1), single)

    def log_f(self, x) -> np.ndarray:
        return self.beta * self.bond_sum(x)

    def soft_log_f(self, x, grad: bool = False):
        xb, single = _batch(x, self.n)
        val = self.beta * (xb[:, self.bonds[:, 0]] * xb[:, self.bonds[:, 1]]).sum(axis=1)
        if not grad:
            return _unbatch(val, single)
        return _unbatch(val, single), _unbatch(self.beta * xb @ self.adjacency, single)

    def params(self) -> list[np.ndarray]:
        return []

    def param_grads(self, x, upstream) -> list[np.ndarray]:
        return []


class SbmTarget:
    """Two-group stochastic block model posterior numerator.

    ``omega_logits = [logit(omega_in), logit(omega_out)]`` is stored as one
    mutable array so an optimiser can update it in place. Spin +1 is group a,
    spin -1 is group b.
    """

    kind = "sbm"
    domain = "spin"
    c = 2

    def __init__(self, adjacency, omega_in: float, omega_out: float):
        G = np.asarray(adjacency, dtype=np.float64)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise DimensionError("adjacency must be a square matrix")
        if np.any(np.diag(G) != 0):
            raise DataError("graph has self-loops")
        if not np.array_equal(G, G.T) or not np.all((G == 0) | (G == 1)):
            raise DataError("adjacency must be symmetric with 0/1 entries")
        for name, w in (("omega_in", omega_in), ("omega_out", omega_out)):
            if not 0.0 < w < 1.0:
                raise ParameterError(f"{name} must lie in (0, 1), got {w}")
        self.G = G
        self.n = G.shape[0]
        self.omega_logits = special.logit(np.array([omega_in, omega_out], dtype=np.float64))
        self._offdiag = 1.0 - np.eye(self.n)
        self._upper = np.triu(np.ones((self.n, self.n)), k=1)

    @property
    def omega_in(self) -> float:
        return float(special.expit(self.omega_logits[0]))

    @property
    def omega_out(self) -> float:
        return float(special.expit(self.omega_logits[1]))

    @property
    def n_edges(self) -> int:
        return int(self.G.sum() // 2)

    def spec(self) -> dict:
        return {"kind": "sbm", "n": self.n, "omega_in": self.omega_in, "omega_out": self.omega_out}

    def _pair_terms(self, xb):
        w_in, w_out = special.expit(self.omega_logits)
        if not (0.0 < w_in < 1.0 and 0.0 < w_out < 1.0):
            raise ParameterError("omega saturated at 0 or 1")
        p = 0.5 * (1.0 + xb[:, :, None] * xb[:, None, :])
        om = w_out + (w_in - w_out) * p
        return p, om, w_in, w_out

    def soft_log_f(self, x, grad: bool = False):
        xb, single = _batch(x, self.n)
        p, om, w_in, w_out = self._pair_terms(xb)
        G = self.G
        ll = G * np.log(om) + (1.0 - G) * np.log1p(-om)
        val = -self.n * LN2 + (ll * self._upper).sum(axis=(1, 2))
        if not grad:
            return _unbatch(val, single)
        coef = (G / om - (1.0 - G) / (1.0 - om)) * self._offdiag
        gx = 0.5 * (w_in - w_out) * np.einsum("bij,bj->bi", coef, xb)
        return _unbatch(val, single), _unbatch(gx, single)

    def log_f(self, x) -> np.ndarray:
        xb, single = _batch(x, self.n)
        w_in, w_out = special.expit(self.omega_logits)
        # hard spins: only the same-group indicator matters
        a_in = self.G * np.log(w_in / w_out) + (1.0 - self.G) * np.log((1.0 - w_in) / (1.0 - w_out))
        a_in = a_in * self._upper
        base = -self.n * LN2 + (self._upper * (self.G * np.log(w_out) + (1 - self.G) * np.log1p(-w_out))).sum()
        same = 0.5 * (1.0 + xb[:, :, None] * xb[:, None, :])
        return _unbatch(base + np.einsum("bij,ij->b", same, a_in), single)

    def params(self) -> list[np.ndarray]:
        return [self.omega_logits]

    def param_grads(self, x, upstream=1.0) -> list[np.ndarray]:
        return [self.omega_logit_grads(x, upstream)]

    def omega_logit_grads(self, x, upstream=1.0) -> np.ndarray:
        xb, _ = _batch(x, self.n)
        up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), (xb.shape[0],))
        p, om, w_in, w_out = self._pair_terms(xb)
        G = self.G
        coef = (G / om - (1.0 - G) / (1.0 - om)) * self._upper
        d_in = np.einsum("bij,bij->b", coef, p)
        d_out = np.einsum("bij,bij->b", coef, 1.0 - p)
        return np.array([up @ d_in * w_in * (1 - w_in), up @ d_out * w_out * (1 - w_out)])


class RankTarget:
    """Noisy-sorting posterior ``f(x) = w^m ((1-w)/w)^V(x)``.

    ``comparisons[c] = (i, j)`` records that ``i`` beat ``j`` (i precedes j).
    A violation is a comparison with ``x_i > x_j``.
    """

    kind = "rank"
    domain = "rank"

    def __init__(self, n: int, comparisons, w: float = 0.75, sigmoid_k: float = 50.0):
        comps = np.asarray(comparisons, dtype=np.int64).reshape(-1, 2)
        if n < 1:
            raise ParameterError("need at least one object")
        if comps.size and (comps.min() < 0 or comps.max() >= n):
            raise DataError(f"comparison index outside 0..{n - 1}")
        if np.any(comps[:, 0] == comps[:, 1]):
            raise DataError("an object cannot be compared with itself")
        if not 0.0 < w < 1.0:
            raise ParameterError(f"w must lie in (0, 1), got {w}")
        if not sigmoid_k > 0:
            raise ParameterError("sigmoid steepness must be positive")
        self.n = int(n)
        self.comparisons = comps
        self.m = len(comps)
        self.w_logit = np.array([special.logit(w)])
        self.sigmoid_k = float(sigmoid_k)
        inc = np.zeros((self.m, self.n))
        inc[np.arange(self.m), comps[:, 0]] += 1.0
        inc[np.arange(self.m), comps[:, 1]] -= 1.0
        self._incidence = inc
        wins = np.zeros((self.n, self.n))
        np.add.at(wins, (comps[:, 0], comps[:, 1]), 1.0)
        self.wins = wins  # wins[i, j] = number of times i beat j

    @property
    def w(self) -> float:
        return float(special.expit(self.w_logit[0]))

    def spec(self) -> dict:
        return {"kind": "rank", "n": self.n, "m": self.m, "w": self.w}

    def _log_ratio(self) -> float:
        return float(-self.w_logit[0])  # ln((1-w)/w)

    def violations(self, x) -> np.ndarray:
        xb, single = _batch(x, self.n)
        a, b = self.comparisons[:, 0], self.comparisons[:, 1]
        return _unbatch((xb[:, a] > xb[:, b]).sum(axis=1).astype(np.int64), single)

    def log_f_from_violations(self, V) -> np.ndarray:
        return self.m * np.log(self.w) + np.asarray(V, dtype=np.float64) * self._log_ratio()

    def log_f(self, x) -> np.ndarray:
        """Exact log f; any real vector is read through its sort order."""
        return self.log_f_from_violations(self.violations(x))

    def soft_violations(self, x, grad: bool = False):
        xb, single = _batch(x, self.n)
        d = xb[:, self.comparisons[:, 0]] - xb[:, self.comparisons[:, 1]]
        s, ds = soft_indicator(d, self.sigmoid_k, return_grad=True)
        V = s.sum(axis=1)
        if not grad:
            return _unbatch(V, single)
        return _unbatch(V, single), _unbatch(ds @ self._incidence, single)

    def soft_log_f(self, x, grad: bool = False):
        r = self._log_ratio()
        if not grad:
            return self.m * np.log(self.w) + self.soft_violations(x) * r
        V, dV = self.soft_violations(x, grad=True)
        return self.m * np.log(self.w) + V * r, dV * r

    def params(self) -> list[np.ndarray]:
        return [self.w_logit]

    def param_grads(self, x, upstream=1.0) -> list[np.ndarray]:
        return [self.w_logit_grad(x, upstream)]

    def w_logit_grad(self, x, upstream=1.0) -> np.ndarray:
        # d/dl [m ln w + V ln((1-w)/w)] with w = sigmoid(l)  ->  m (1 - w) - V
        V = np.atleast_1d(self.soft_violations(x))
        up = np.broadcast_to(np.asarray(upstream, dtype=np.float64), V.shape)
        return np.array([up @ (self.m * (1.0 - self.w) - V)])


# -- functional surface ------------------------------------------------------

def ising_log_f(t: IsingTarget, x) -> np.ndarray:
    return t.log_f(x)


def sbm_log_f(t: SbmTarget, x) -> np.ndarray:
    """Hard spins use the exact two-valued likelihood; anything else the interpolation."""
    x = np.asarray(x, dtype=np.float64)
    if np.all(np.abs(x) == 1.0):
        return t.log_f(x)
    return t.soft_log_f(x)


def check_permutation(x, n: int) -> np.ndarray:
    """Validate hard rankings ``k/n`` and return integer ranks 1..n."""
    xb, single = _batch(x, n)
    ranks = np.rint(xb * n).astype(np.int64)
    if not np.allclose(ranks, xb * n, atol=1e-9) or not np.all(
        np.sort(ranks, axis=1) == np.arange(1, n + 1)
    ):
        raise DataError("ranking is not a permutation of {1/n, ..., n/n}")
    return _unbatch(ranks, single)


def rank_violations(t: RankTarget, x) -> np.ndarray:
    check_permutation(x, t.n)
    return t.violations(x)


def rank_log_f(t: RankTarget, x, soft: bool = False) -> np.ndarray:
    if soft:
        return t.soft_log_f(x)
    check_permutation(x, t.n)
    return t.log_f(x)


def target_param_grads(t, x, upstream=1.0) -> np.ndarray:
    """Gradient of the soft log f w.r.t. the target's unconstrained parameters.

    SBM: ``[d/d logit(omega_in), d/d logit(omega_out)]``.
    Ranking: ``[d/d logit(w)]``.
    """
    if isinstance(t, SbmTarget):
        return t.omega_logit_grads(x, upstream)
    if isinstance(t, RankTarget):
        return t.w_logit_grad(x, upstream)
    raise TypeError(f"{type(t).__name__} has no learnable parameters")


def rank_round(x) -> np.ndarray:
    """Map relaxed positions to ``rank/n`` by ascending sort, ties by index."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    order = np.argsort(x, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(1, n + 1), order.shape), axis=-1)
    return ranks / n


def integer_ranks(x) -> np.ndarray:
    """Ranks 1..n of the sort order of ``x`` (ties by index)."""
    return np.rint(rank_round(x) * np.asarray(x).shape[-1]).astype(np.int64)


# -- data ---------------------------------------------------------------------

def _read_pairs(path) -> list[tuple[int, int, int]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        parts = s.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected two integers, got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected two integers, got {line!r}") from None
        if u < 0 or v < 0:
            raise DataError(f"{path}:{lineno}: negative node index")
        pairs.append((u, v, lineno))
    return pairs


def load_edge_list(path, n: int | None = None) -> np.ndarray:
    """Read an undirected 0-indexed edge list into a dense adjacency matrix."""
    pairs = _read_pairs(path)
    size = n if n is not None else (max(max(u, v) for u, v, _ in pairs) + 1 if pairs else 0)
    G = np.zeros((size, size))
    for u, v, lineno in pairs:
        if u == v:
            raise DataError(f"{path}:{lineno}: self-loop {u}")
        if u >= size or v >= size:
            raise DataError(f"{path}:{lineno}: node index exceeds n={size}")
        if G[u, v]:
            raise DataError(f"{path}:{lineno}: duplicate edge {u} {v}")
        G[u, v] = G[v, u] = 1.0
    return G


def load_comparisons(path) -> np.ndarray:
    """Read ``i j`` lines (i beat j); repeats are kept."""
    pairs = _read_pairs(path)
    for u, v, lineno in pairs:
        if u == v:
            raise DataError(f"{path}:{lineno}: object {u} compared with itself")
    return np.array([(u, v) for u, v, _ in pairs], dtype=np.int64).reshape(-1, 2)


def write_pairs(path, pairs) -> None:
    Path(path).write_text("".join(f"{int(u)} {int(v)}\n" for u, v in pairs))


KARATE_NODES = 34
KARATE_EDGES = 78


def karate_path() -> Path:
    return Path(str(resources.files("partivae") / "data" / "karate.txt"))


def karate_club() -> tuple[np.ndarray, np.ndarray]:
    """Zachary's karate club: adjacency and the post-split faction spins.

    Faction spin is +1 for the instructor's club and -1 for the officer's.
    """
    G = load_edge_list(karate_path(), n=KARATE_NODES)
    if G.shape[0] != KARATE_NODES or int(G.sum() // 2) != KARATE_EDGES:
        raise DataError(f"{karate_path()}: expected {KARATE_NODES} nodes and {KARATE_EDGES} edges")
    factions_file = Path(str(resources.files("partivae") / "data" / "karate_factions.txt"))
    factions = np.array([float(s) for s in factions_file.read_text().split()])
    return G, factions


def degree_leaders(adjacency, k: int = 6) -> np.ndarray:
    """Spin pattern with +1 on the ``k`` highest-degree nodes (ties included)."""
    deg = np.asarray(adjacency).sum(axis=1)
    if not 1 <= k <= len(deg):
        raise ParameterError(f"k must lie in 1..{len(deg)}")
    cut = np.sort(deg)[-k]
    return np.where(deg >= cut, 1.0, -1.0)


def planted_partition(n: int, omega_in: float, omega_out: float, rng: np.random.Generator):
    """Sample a 2-block SBM graph with balanced planted groups."""
    labels = np.where(np.arange(n) < n // 2, 1.0, -1.0)
    labels = labels[rng.permutation(n)]
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, omega_in, omega_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    G = (upper | upper.T).astype(np.float64)
    return G, labels


def synthetic_comparisons(n: int, m: int, w: float, rng: np.random.Generator):
    """Noisy comparisons of a hidden random order.

    Returns ``(comparisons, true_rank)`` where ``true_rank[i]`` is in 1..n.
    Each comparison reports the true order with probability ``w``.
    """
    true_rank = rng.permutation(n) + 1
    comps = np.empty((m, 2), dtype=np.int64)
    for c in range(m):
        i, j = rng.choice(n, size=2, replace=False)
        if true_rank[i] > true_rank[j]:
            i, j = j, i
        if rng.random() >= w:
            i, j = j, i
        comps[c] = (i, j)
    return comps, true_rank
