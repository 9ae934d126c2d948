"""The reversed VAE.

Auxiliary spins ``y`` (D fair coins) feed a decoder network that outputs a
product distribution ``R(x|y)`` over the target variables; an encoder network
outputs a product of Bernoullis ``Q(y|x)``. For any such pair

    ln Z >= E_{y ~ P, x ~ R(.|y)} [ ln f(x) + ln Q(y|x) - ln P(y) - ln R(x|y) ].

Training maximises a relaxed version of the right-hand side (Concrete /
Kumaraswamy reparameterisation, gradients chained by hand through the two
networks). Reported bounds always use exact hard samples and exact
log-masses, so they are genuine lower bounds in expectation.

Spin decoders output fields ``phi`` with ``R(x_i = s | y) ∝ exp(s phi_i)``.
Ranking decoders output ``2n`` raw values mapped by softplus to positive
shape parameters ``(a, b)`` of a Kumaraswamy (or Beta) density per object;
the offset ``ln(e - 1)`` makes the zero-initialised network start at the
uniform density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from partivae import relax
from partivae.diffcore import (
    DEFAULT_HIDDEN,
    AdamState,
    MlpParams,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from partivae.errors import EvaluationError, ParameterError, TrainingError
from partivae.seeding import STREAM_EVAL, STREAM_INIT, STREAM_SAMPLE, STREAM_TRAIN, derive_rng
from partivae.targets import rank_round

LN2 = math.log(2.0)
SHAPE_OFFSET = math.log(math.e - 1.0)  # softplus(SHAPE_OFFSET) == 1
X_CLAMP = 1e-6


@dataclass(frozen=True)
class LatentSpec:
    D: int

    def __post_init__(self):
        if int(self.D) != self.D or self.D < 0:
            raise ParameterError(f"latent dimension must be a non-negative integer, got {self.D}")

    @property
    def log_prior(self) -> float:
        return -self.D * LN2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.where(rng.random((size, self.D)) < 0.5, -1.0, 1.0)


@dataclass
class DecoderR:
    net: MlpParams
    domain: str
    family: str = "kumaraswamy"

    @property
    def n(self) -> int:
        return self.net.n_out if self.domain == "spin" else self.net.n_out // 2

    def fields(self, y):
        phi, tape = mlp_forward(self.net, y)
        return phi, tape

    def shape_params(self, y):
        o, tape = mlp_forward(self.net, y)
        n = self.n
        z = o + SHAPE_OFFSET
        return np.logaddexp(0.0, z[..., :n]), np.logaddexp(0.0, z[..., n:]), z, tape


@dataclass
class EncoderQ:
    net: MlpParams

    def fields(self, x):
        theta, tape = mlp_forward(self.net, x)
        return theta, tape


@dataclass
class VaeModel:
    decoder: DecoderR
    encoder: EncoderQ
    latent: LatentSpec

    def arrays(self) -> list[np.ndarray]:
        return self.decoder.net.arrays() + self.encoder.net.arrays()

    def copy(self) -> "VaeModel":
        return VaeModel(
            DecoderR(self.decoder.net.copy(), self.decoder.domain, self.decoder.family),
            EncoderQ(self.encoder.net.copy()),
            self.latent,
        )


@dataclass(frozen=True)
class ElboEstimate:
    mean: float
    stderr: float
    n_samples: int
    mode: str = "hard"

    @classmethod
    def from_terms(cls, terms, mode: str = "hard") -> "ElboEstimate":
        terms = np.asarray(terms, dtype=np.float64)
        sd = terms.std(ddof=1) if len(terms) > 1 else 0.0
        return cls(float(terms.mean()), float(sd / math.sqrt(len(terms))), len(terms), mode)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n_samples, "mode": self.mode}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    n_steps: int = 5000
    tau: float = 1.0 / 16.0
    seed: int = 0
    eval_samples: int = 100_000
    lr: float = 1e-3
    hidden: int = DEFAULT_HIDDEN
    learn_omega: bool = False
    learn_w: bool = False
    beta_mode: str = "kumaraswamy"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.n_steps < 0:
            raise ParameterError("n_steps must be >= 0")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")
        if self.eval_samples < 2:
            raise ParameterError("eval_samples must be >= 2")
        if self.hidden < 1:
            raise ParameterError("hidden must be >= 1")
        if self.beta_mode not in ("kumaraswamy", "beta_newton"):
            raise ParameterError(f"unknown beta_mode {self.beta_mode!r}")


def init_model(target, D: int, hidden: int = DEFAULT_HIDDEN, rng=None, init_fields=None,
               family: str = "kumaraswamy") -> VaeModel:
    """Fresh networks whose output layers are zero (R and Q start uniform).

    ``init_fields`` (spin targets) seeds the decoder output bias, i.e. the
    starting fields ``phi``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = target.n
    n_out = n if target.domain == "spin" else 2 * n
    dec = init_mlp(D, n_out, hidden, rng, zero_output=True)
    enc = init_mlp(n, D, hidden, rng, zero_output=True)
    if init_fields is not None:
        if target.domain != "spin":
            raise ParameterError("init_fields applies to spin targets only")
        dec.b2[:] = np.asarray(init_fields, dtype=np.float64)
    return VaeModel(DecoderR(dec, target.domain, family), EncoderQ(enc), LatentSpec(D))


def _log_cosh2(z):
    """``ln(e^z + e^-z)``."""
    return np.logaddexp(z, -z)


def log_q(encoder: EncoderQ, x, y) -> np.ndarray:
    theta, _ = encoder.fields(x)
    return (y * theta - _log_cosh2(theta)).sum(axis=-1)


def _rank_log_r(decoder: DecoderR, x, a, b):
    if decoder.family == "beta_newton":
        return relax.beta_log_pdf(x, a, b).sum(axis=-1)
    return relax.kuma_log_pdf(x, a, b).sum(axis=-1)


def log_n_factorial(n: int) -> float:
    return float(special.gammaln(n + 1))


def elbo_term(target, decoder: DecoderR, encoder: EncoderQ, y, x) -> np.ndarray:
    """``ln f(x) + ln Q(y|x) - ln P(y) - ln R(x|y)`` for hard draws.

    For rankings ``x`` is the continuous draw in (0, 1)^n; ``ln f`` reads its
    sort order and ``ln n!`` is added for the simplex volume.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    D = y.shape[-1]
    lq = log_q(encoder, x, y)
    if decoder.domain == "spin":
        phi, _ = decoder.fields(y)
        lr = (x * phi - _log_cosh2(phi)).sum(axis=-1)
        const = 0.0
    else:
        a, b, _, _ = decoder.shape_params(y)
        lr = _rank_log_r(decoder, x, a, b)
        const = log_n_factorial(target.n)
    lf = np.asarray(target.log_f(x), dtype=np.float64)
    return _combine(lf, lq, D, lr, const)


def _combine(lf, lq, D, lr, const):
    for name, v in (("ln f", lf), ("ln Q", lq), ("ln R", lr)):
        if not np.all(np.isfinite(v)):
            raise EvaluationError(name)
    return lf + lq + D * LN2 - lr + const


def draw_hard(target, model: VaeModel, rng: np.random.Generator, size: int):
    """Exact ancestral draws ``y ~ P``, ``x ~ R(.|y)``.

    Returns ``(y, x, ln R(x|y))``; for rankings ``x`` is continuous.
    """
    y = model.latent.sample(rng, size)
    dec = model.decoder
    u = rng.random((size, target.n))
    u = np.clip(u, relax.U_CLAMP, 1 - relax.U_CLAMP)
    if dec.domain == "spin":
        phi, _ = dec.fields(y)
        x = relax.harden_spin(2.0 * phi, u)
        lr = (x * phi - _log_cosh2(phi)).sum(axis=1)
        return y, x, lr
    a, b, _, _ = dec.shape_params(y)
    if dec.family == "beta_newton":
        x = relax.beta_sample(a, b, u)
        return y, x, relax.beta_log_pdf(x, a, b).sum(axis=1)
    x = relax.kuma_sample(a, b, u)
    lr = relax.kuma_log_pdf_from_noise(a, b, u).sum(axis=1)
    return y, x, lr


def hard_terms(target, model: VaeModel, rng: np.random.Generator, size: int) -> np.ndarray:
    y, x, lr = draw_hard(target, model, rng, size)
    lq = log_q(model.encoder, x, y)
    lf = np.asarray(target.log_f(x), dtype=np.float64)
    const = log_n_factorial(target.n) if target.domain == "rank" else 0.0
    return _combine(lf, lq, model.latent.D, lr, const)


def estimate_lnZ(target, model: VaeModel, n_samples: int, rng=None, seed: int = 0,
                 chunk: int = 8192) -> ElboEstimate:
    """Hard-sample Monte Carlo estimate of the lower bound."""
    if n_samples < 2:
        raise ParameterError("need at least two samples")
    rng = derive_rng(seed, model.latent.D, STREAM_EVAL) if rng is None else rng
    terms = np.concatenate([
        hard_terms(target, model, rng, min(chunk, n_samples - s)) for s in range(0, n_samples, chunk)
    ])
    return ElboEstimate.from_terms(terms)


def sample_x(target, decoder: DecoderR, latent: LatentSpec, n_samples: int, seed: int = 0,
             rng=None) -> np.ndarray:
    """Independent hard configurations; rankings come back as ``rank / n``."""
    rng = derive_rng(seed, latent.D, STREAM_SAMPLE) if rng is None else rng
    model = VaeModel(decoder, EncoderQ(init_mlp(target.n, latent.D, 1, zero_output=True)), latent)
    if n_samples == 0:
        return np.zeros((0, target.n))
    _, x, _ = draw_hard(target, model, rng, n_samples)
    if target.domain == "rank":
        return rank_round(x)
    return x


# -- relaxed objective ----------------------------------------------------------

@dataclass
class RelaxedEval:
    values: np.ndarray  # per-sample relaxed objective
    model_grads: list[np.ndarray] | None = None  # d mean / d model.arrays()
    target_grads: list[np.ndarray] | None = None  # d mean / d target.params()
    x: np.ndarray | None = None


def relaxed_elbo(target, model: VaeModel, y, u, tau: float, grad: bool = True,
                 target_grads: bool = False) -> RelaxedEval:
    """Relaxed objective for fixed latent draws ``y`` and decoder noise ``u``.

    Spin targets relax ``x`` by the binary Concrete map at temperature ``tau``
    and score it with the same exponential-family form as the hard ``ln R``.
    Rankings use the Kumaraswamy (or Beta) reparameterisation, clamped to
    ``[X_CLAMP, 1 - X_CLAMP]``. Gradients are of the batch mean.
    """
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    B = y.shape[0]
    D = model.latent.D
    dec = model.decoder
    if dec.domain == "spin":
        phi, tape_d = dec.fields(y)
        x, dx_dlogit = relax.gumbel_soft_spin(2.0 * phi, tau, u, return_grad=True)
        lr = (x * phi - _log_cosh2(phi)).sum(axis=1)
        const = 0.0
    else:
        a, b, z, tape_d = dec.shape_params(y)
        if dec.family == "beta_newton":
            x, dx_da, dx_db = relax.beta_sample(a, b, u, return_grad=True)
            inside = (x > X_CLAMP) & (x < 1 - X_CLAMP)
            x = np.clip(x, X_CLAMP, 1 - X_CLAMP)
            lr_i, dR_x, dR_a, dR_b = relax.beta_log_pdf(x, a, b, return_grad=True)
        else:
            x, dx_da, dx_db = relax.kuma_sample(a, b, u, return_grad=True)
            inside = (x > X_CLAMP) & (x < 1 - X_CLAMP)
            x = np.clip(x, X_CLAMP, 1 - X_CLAMP)
            lr_i, dR_x, dR_a, dR_b = relax.kuma_log_pdf(x, a, b, return_grad=True)
        lr = lr_i.sum(axis=1)
        const = log_n_factorial(target.n)
    theta, tape_e = model.encoder.fields(x)
    lq = (y * theta - _log_cosh2(theta)).sum(axis=1)
    if grad:
        lf, df_x = target.soft_log_f(x, grad=True)
    else:
        lf = target.soft_log_f(x)
    values = lf + lq + D * LN2 - lr + const
    if not grad:
        return RelaxedEval(values, x=x)

    scale = 1.0 / B
    enc_g, dq_x = mlp_backward(tape_e, (y - np.tanh(theta)) * scale)
    g_x = df_x * scale + dq_x
    if dec.domain == "spin":
        g_x = g_x - phi * scale
        g_phi = (np.tanh(phi) - x) * scale + g_x * 2.0 * dx_dlogit
        dec_g, _ = mlp_backward(tape_d, g_phi)
    else:
        g_x = g_x - dR_x * scale
        g_a = -dR_a * scale + np.where(inside, g_x * dx_da, 0.0)
        g_b = -dR_b * scale + np.where(inside, g_x * dx_db, 0.0)
        n = target.n
        g_z = np.concatenate([g_a * special.expit(z[:, :n]), g_b * special.expit(z[:, n:])], axis=1)
        dec_g, _ = mlp_backward(tape_d, g_z)
    tg = target.param_grads(x, scale) if target_grads else None
    return RelaxedEval(values, dec_g.arrays() + enc_g.arrays(), tg, x)


# -- training -------------------------------------------------------------------

def learnable_params(target, cfg: TrainConfig) -> bool:
    if target.kind == "sbm":
        return cfg.learn_omega
    if target.kind == "rank":
        return cfg.learn_w
    return False


@dataclass
class TrainResult:
    model: VaeModel
    trace: np.ndarray  # batch-mean relaxed objective per step
    target_params: list[np.ndarray] = field(default_factory=list)

    @property
    def decoder(self) -> DecoderR:
        return self.model.decoder

    @property
    def encoder(self) -> EncoderQ:
        return self.model.encoder


def train(target, latent: LatentSpec, cfg: TrainConfig, model: VaeModel | None = None,
          init_fields=None) -> TrainResult:
    """Adam ascent on the relaxed bound.

    Learnable target parameters (omega for the SBM, w for rankings, when
    enabled in ``cfg``) are updated in place on ``target``.
    """
    if model is None:
        model = init_model(target, latent.D, cfg.hidden, derive_rng(cfg.seed, latent.D, STREAM_INIT),
                           init_fields=init_fields, family=cfg.beta_mode)
    rng = derive_rng(cfg.seed, latent.D, STREAM_TRAIN)
    learn_t = learnable_params(target, cfg)
    params = model.arrays() + (target.params() if learn_t else [])
    state = AdamState.for_params(params, lr=cfg.lr)
    trace = np.empty(cfg.n_steps)
    for step in range(cfg.n_steps):
        y = latent.sample(rng, cfg.batch_size)
        u = np.clip(rng.random((cfg.batch_size, target.n)), relax.U_CLAMP, 1 - relax.U_CLAMP)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                ev = relaxed_elbo(target, model, y, u, cfg.tau, grad=True, target_grads=learn_t)
        except (EvaluationError, FloatingPointError, ValueError) as exc:
            raise TrainingError(step, str(exc), snapshot=model.copy()) from exc
        obj = float(ev.values.mean())
        if not math.isfinite(obj):
            raise TrainingError(step, "relaxed objective", snapshot=model.copy())
        trace[step] = obj
        grads = ev.model_grads + (ev.target_grads if learn_t else [])
        try:
            adam_step(params, grads, state)
        except TrainingError as exc:
            raise TrainingError(step, "non-finite gradient", snapshot=model.copy()) from exc
    return TrainResult(model, trace, [p.copy() for p in target.params()] if learn_t else [])


@dataclass
class SweepRow:
    D: int
    estimate: ElboEstimate
    result: TrainResult


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: int  # index into rows

    @property
    def best_row(self) -> SweepRow:
        return self.rows[self.best]


def sweep_D(target, D_set, cfg: TrainConfig, init_fields=None) -> SweepResult:
    """Train one model per latent size and keep every bound.

    Each run starts from the same target parameters; afterwards the target
    holds the parameters learned by the best run. Ties go to the smallest D.
    """
    D_values = sorted(set(int(d) for d in D_set))
    if not D_values:
        raise ParameterError("D_set is empty")
    start = [p.copy() for p in target.params()]
    rows = []
    for D in D_values:
        for p, p0 in zip(target.params(), start):
            p[:] = p0
        res = train(target, LatentSpec(D), cfg, init_fields=init_fields)
        est = estimate_lnZ(target, res.model, cfg.eval_samples, seed=cfg.seed)
        rows.append(SweepRow(D, est, res))
    means = [r.estimate.mean for r in rows]
    best = int(np.argmax(means))  # first maximum == smallest D
    for p, p_best in zip(target.params(), rows[best].result.target_params or start):
        p[:] = p_best
    return SweepResult(rows, best)


def mean_field(target, cfg: TrainConfig, init_fields=None) -> tuple[np.ndarray, ElboEstimate, TrainResult]:
    """Constant product fields (the D = 0 model): ``(phi, bound, run)``."""
    if target.domain != "spin":
        raise ParameterError("mean-field fields are defined for spin targets")
    res = train(target, LatentSpec(0), cfg, init_fields=init_fields)
    phi, _ = res.model.decoder.fields(np.zeros(0))
    est = estimate_lnZ(target, res.model, cfg.eval_samples, seed=cfg.seed)
    return phi, est, res
