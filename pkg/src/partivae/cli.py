"""``partivae`` command-line front end.

    partivae train|sweep|sample|estimate|oracle|mcmc --config PATH [--seed N] [--out DIR]

Configs are JSON documents validated against :data:`CONFIG_SCHEMA`; unknown
keys are rejected. Relative dataset and model paths resolve against the
config file's directory.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
from scipy.special import logit

from partivae import __version__
from partivae.errors import (
    CapacityError,
    ConfigError,
    DataError,
    DimensionError,
    EvaluationError,
    ParameterError,
    TrainingError,
)
from partivae.oracles import (
    McmcConfig,
    enumerate_lnZ,
    ising_exact_lnZ,
    mcmc_ising,
    mcmc_rank,
    mcmc_sbm,
    position_marginals,
)
from partivae.persist import load_model, save_model, write_configs_csv, write_csv, write_json
from partivae.seeding import STREAM_DATA, STREAM_MCMC, derive_rng, derive_seed
from partivae.targets import (
    IsingTarget,
    RankTarget,
    SbmTarget,
    degree_leaders,
    karate_club,
    load_comparisons,
    load_edge_list,
    planted_partition,
    synthetic_comparisons,
)
from partivae.vae import LatentSpec, TrainConfig, estimate_lnZ, sample_x, sweep_D, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_D_SET = (1, 2, 4, 8, 16, 32, 64)

COMMANDS = ("train", "sweep", "sample", "estimate", "oracle", "mcmc")

_pos = {"type": "number", "exclusiveMinimum": 0}
_prob = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_count = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["target"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "output": {"type": "string"},
        "D": {"type": "integer", "minimum": 0},
        "D_set": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "model": {"type": "string"},
        "n_samples": {"type": "integer", "minimum": 0},
        "target": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["ising", "sbm", "rank"]}},
            "allOf": [
                {
                    "if": {"properties": {"kind": {"const": "ising"}}},
                    "then": {
                        "additionalProperties": False,
                        "required": ["L", "beta"],
                        "properties": {
                            "kind": {},
                            "L": {"type": "integer", "minimum": 3},
                            "beta": {"type": "number", "minimum": 0},
                        },
                    },
                },
                {
                    "if": {"properties": {"kind": {"const": "sbm"}}},
                    "then": {
                        "additionalProperties": False,
                        "required": ["graph", "omega_in", "omega_out"],
                        "properties": {
                            "kind": {},
                            "graph": {
                                "oneOf": [
                                    {"type": "string"},
                                    {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["planted"],
                                        "properties": {
                                            "planted": {
                                                "type": "object",
                                                "additionalProperties": False,
                                                "required": ["n", "omega_in", "omega_out"],
                                                "properties": {
                                                    "n": {"type": "integer", "minimum": 2},
                                                    "omega_in": {"type": "number", "minimum": 0, "maximum": 1},
                                                    "omega_out": {"type": "number", "minimum": 0, "maximum": 1},
                                                },
                                            }
                                        },
                                    },
                                ]
                            },
                            "n": {"type": "integer", "minimum": 1},
                            "omega_in": _prob,
                            "omega_out": _prob,
                            "learn_omega": {"type": "boolean"},
                        },
                    },
                },
                {
                    "if": {"properties": {"kind": {"const": "rank"}}},
                    "then": {
                        "additionalProperties": False,
                        "required": ["n", "comparisons", "w"],
                        "properties": {
                            "kind": {},
                            "n": {"type": "integer", "minimum": 2},
                            "comparisons": {
                                "oneOf": [
                                    {"type": "string"},
                                    {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["synthetic_m"],
                                        "properties": {"synthetic_m": {"type": "integer", "minimum": 0}},
                                    },
                                ]
                            },
                            "w": _prob,
                            "learn_w": {"type": "boolean"},
                        },
                    },
                },
            ],
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": _count,
                "n_steps": {"type": "integer", "minimum": 0},
                "lr": _pos,
                "hidden": _count,
                "eval_samples": {"type": "integer", "minimum": 2},
            },
        },
        "relax": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau": _pos,
                "sigmoid_k": _pos,
                "beta_mode": {"enum": ["kumaraswamy", "beta_newton"]},
            },
        },
        "init": {
            "type": "object",
            "additionalProperties": False,
            "required": ["pattern"],
            "properties": {
                "pattern": {
                    "oneOf": [
                        {"enum": ["truth", "leaders"]},
                        {"type": "array", "items": {"type": "number"}},
                    ]
                },
                "strength": _pos,
                "leaders": _count,
            },
        },
        "mcmc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_sweeps": _count,
                "burn_in": {"type": "integer", "minimum": 0},
                "thin": _count,
                "n_chains": _count,
                "proposal": {"enum": ["random", "adjacent"]},
            },
        },
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="partivae", description="Reversed-VAE partition function bounds and samplers.")
    p.add_argument("--version", action="version", version=f"partivae {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config 'output' or ./out)")
    return p


# -- config -------------------------------------------------------------------

def load_config(path, seed_override: int | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    text = path.read_text(encoding="utf-8")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/" + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{path}: {where}: {e.message}")
    if seed_override is not None:
        if seed_override < 0:
            raise ConfigError("--seed must be non-negative")
        cfg["seed"] = seed_override
    cfg.setdefault("seed", 0)
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _resolve(cfg: dict, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(cfg["_base"]) / q


def public_config(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if not k.startswith("_")}


def build_target(cfg: dict):
    """Instantiate the target; returns ``(target, truth_pattern_or_None)``."""
    t = cfg["target"]
    kind = t["kind"]
    data_rng = derive_rng(cfg["seed"], STREAM_DATA)
    if kind == "ising":
        return IsingTarget(t["L"], t["beta"]), None
    if kind == "sbm":
        g = t["graph"]
        truth = None
        if isinstance(g, dict):
            pp = g["planted"]
            G, truth = planted_partition(pp["n"], pp["omega_in"], pp["omega_out"], data_rng)
        elif g == "karate":
            G, truth = karate_club()
        else:
            G = load_edge_list(_resolve(cfg, g), t.get("n"))
        return SbmTarget(G, t["omega_in"], t["omega_out"]), truth
    k = cfg.get("relax", {}).get("sigmoid_k", 50.0)
    c = t["comparisons"]
    if isinstance(c, dict):
        comps, truth = synthetic_comparisons(t["n"], c["synthetic_m"], t["w"], data_rng)
    else:
        comps, truth = load_comparisons(_resolve(cfg, c)), None
        if comps.size and comps.max() >= t["n"]:
            raise DataError(f"{_resolve(cfg, c)}: object index exceeds n={t['n']}")
    return RankTarget(t["n"], comps, t["w"], sigmoid_k=k), truth


def train_config(cfg: dict) -> TrainConfig:
    tr = cfg.get("train", {})
    rx = cfg.get("relax", {})
    t = cfg["target"]
    kw = dict(tr)
    if "tau" in rx:
        kw["tau"] = rx["tau"]
    if "beta_mode" in rx:
        kw["beta_mode"] = rx["beta_mode"]
    return TrainConfig(seed=cfg["seed"], learn_omega=t.get("learn_omega", False),
                       learn_w=t.get("learn_w", False), **kw)


def init_fields(cfg: dict, target, truth):
    init = cfg.get("init")
    if init is None:
        return None
    if target.domain != "spin":
        raise ConfigError("/init: initial fields apply to spin targets only")
    pat = init["pattern"]
    if pat == "truth":
        if truth is None:
            raise ConfigError("/init/pattern: this target has no reference partition")
        pattern = np.asarray(truth, dtype=np.float64)
    elif pat == "leaders":
        if target.kind != "sbm":
            raise ConfigError("/init/pattern: 'leaders' needs a graph")
        pattern = degree_leaders(target.G, init.get("leaders", 6))
    else:
        pattern = np.asarray(pat, dtype=np.float64)
        if pattern.shape != (target.n,):
            raise ConfigError(f"/init/pattern: expected {target.n} values, got {pattern.size}")
    return init.get("strength", 2.0) * pattern


def target_params(target) -> dict:
    if target.kind == "sbm":
        return {"omega_in": target.omega_in, "omega_out": target.omega_out}
    if target.kind == "rank":
        return {"w": target.w}
    return {}


# -- commands -----------------------------------------------------------------

def _train_record(cfg: dict, D: int, res, est, target) -> dict:
    snap = public_config(cfg)
    snap.pop("D_set", None)
    snap["D"] = D
    return {
        "command": "train",
        "version": __version__,
        "config": snap,
        "D": D,
        "estimate": est.to_dict(),
        "target_params": target_params(target),
        "trace": res.trace.tolist(),
    }


def _write_run(out: Path, record: dict, res, target) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "record.json", record)
    write_csv(out / "trace.csv", ["step", "relaxed_objective"], enumerate(res.trace.tolist()))
    save_model(out / "model.bin", res.model, target.spec())


def cmd_train(cfg: dict, out: Path) -> dict:
    target, truth = build_target(cfg)
    tc = train_config(cfg)
    D = cfg.get("D", 1)
    res = train(target, LatentSpec(D), tc, init_fields=init_fields(cfg, target, truth))
    est = estimate_lnZ(target, res.model, tc.eval_samples, seed=tc.seed)
    record = _train_record(cfg, D, res, est, target)
    _write_run(out, record, res, target)
    return record


def cmd_sweep(cfg: dict, out: Path) -> dict:
    target, truth = build_target(cfg)
    tc = train_config(cfg)
    start = [p.copy() for p in target.params()]
    sw = sweep_D(target, cfg.get("D_set", DEFAULT_D_SET), tc, init_fields=init_fields(cfg, target, truth))
    best_params = [p.copy() for p in target.params()]
    rows = []
    for row in sw.rows:
        # per-run learned parameters are what that run's record should show
        for p, v in zip(target.params(), row.result.target_params or start):
            p[:] = v
        rec = _train_record(cfg, row.D, row.result, row.estimate, target)
        _write_run(out / f"D{row.D}", rec, row.result, target)
        rows.append({"D": row.D, "estimate": row.estimate.to_dict(), "target_params": target_params(target)})
    for p, v in zip(target.params(), best_params):
        p[:] = v
    write_csv(out / "sweep.csv", ["D", "mean", "stderr", "n_samples"],
              [[r["D"], r["estimate"]["mean"], r["estimate"]["stderr"], r["estimate"]["n_samples"]] for r in rows])
    record = {
        "command": "sweep",
        "version": __version__,
        "config": public_config(cfg),
        "rows": rows,
        "best_D": sw.best_row.D,
        "best": rows[sw.best],
    }
    write_json(out / "record.json", record)
    return record


def _load_matching_model(cfg: dict, target):
    if "model" not in cfg:
        raise ConfigError("/model: required for this command")
    model, header = load_model(_resolve(cfg, cfg["model"]))
    spec = header["target"]
    if spec.get("kind") != target.kind or spec.get("n", getattr(target, "n", None)) != target.n or (
        target.kind == "ising" and spec.get("L") != target.L
    ):
        raise DataError(f"{cfg['model']}: model was trained for {spec}, config describes {target.spec()}")
    n_out = model.decoder.n
    if n_out != target.n or model.encoder.net.n_in != target.n:
        raise DataError(f"{cfg['model']}: network width does not match n={target.n}")
    # learned target parameters travel with the model
    if target.kind == "sbm":
        target.omega_logits[:] = logit([spec["omega_in"], spec["omega_out"]])
    elif target.kind == "rank":
        target.w_logit[:] = logit(spec["w"])
    return model


def cmd_sample(cfg: dict, out: Path) -> dict:
    target, _ = build_target(cfg)
    model = _load_matching_model(cfg, target)
    n = cfg.get("n_samples", 1000)
    xs = sample_x(target, model.decoder, model.latent, n, seed=cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    write_configs_csv(out / "samples.csv", xs.reshape(n, target.n), as_ranks=target.domain == "rank")
    return {"command": "sample", "n_samples": n}


def cmd_estimate(cfg: dict, out: Path) -> dict:
    target, _ = build_target(cfg)
    model = _load_matching_model(cfg, target)
    tc = train_config(cfg)
    est = estimate_lnZ(target, model, tc.eval_samples, seed=cfg["seed"])
    record = {
        "command": "estimate",
        "version": __version__,
        "config": public_config(cfg),
        "D": model.latent.D,
        "estimate": est.to_dict(),
        "target_params": target_params(target),
    }
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "record.json", record)
    return record


def cmd_oracle(cfg: dict, out: Path) -> dict:
    target, _ = build_target(cfg)
    result = {"command": "oracle", "version": __version__, "config": public_config(cfg), "target": target.spec()}
    if target.kind == "ising":
        result["lnZ_transfer_matrix"] = ising_exact_lnZ(target.L, target.beta)
        try:
            ex = enumerate_lnZ(target)
        except CapacityError:
            result["lnZ_enumeration"] = None
        else:
            result["lnZ_enumeration"] = ex.lnZ
            result["marginals"] = ex.marginals
            result["relative_difference"] = abs(ex.lnZ - result["lnZ_transfer_matrix"]) / max(abs(ex.lnZ), 1e-300)
    else:
        ex = enumerate_lnZ(target)
        result["lnZ_enumeration"] = ex.lnZ
        result["marginals"] = ex.marginals
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "oracle.json", result)
    return result


def cmd_mcmc(cfg: dict, out: Path) -> dict:
    target, _ = build_target(cfg)
    mc = McmcConfig(seed=derive_seed(cfg["seed"], STREAM_MCMC), **cfg.get("mcmc", {}))
    run = {"ising": mcmc_ising, "sbm": mcmc_sbm, "rank": mcmc_rank}[target.kind]
    res = run(target, mc)
    out.mkdir(parents=True, exist_ok=True)
    s = res.samples
    if target.kind == "rank":
        write_csv(out / "samples.csv", [f"x{i}" for i in range(target.n)], s.tolist())
        pos = position_marginals(s, target.n)
        mean = pos @ np.arange(1, target.n + 1)
        write_csv(out / "marginals.csv", ["object", "mean_position"], [[i, float(v)] for i, v in enumerate(mean)])
        write_csv(out / "positions.csv", ["object"] + [f"p{k + 1}" for k in range(target.n)],
                  [[i] + [float(v) for v in row] for i, row in enumerate(pos)])
    else:
        write_csv(out / "samples.csv", [f"x{i}" for i in range(target.n)], s.astype(np.int64).tolist())
        mean = s.astype(np.float64).mean(axis=0)
        write_csv(out / "marginals.csv", ["site", "mean"], [[i, float(v)] for i, v in enumerate(mean)])
    record = {
        "command": "mcmc",
        "version": __version__,
        "config": public_config(cfg),
        "acceptance_rate": res.acceptance_rate,
        "n_samples": len(s),
    }
    write_json(out / "mcmc.json", record)
    return record


HANDLERS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "sample": cmd_sample,
    "estimate": cmd_estimate,
    "oracle": cmd_oracle,
    "mcmc": cmd_mcmc,
}


def run(argv=None) -> int:
    """Parse ``argv`` and run one command; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.seed)
        out = Path(args.out or cfg.get("output") or "out")
        t0 = time.perf_counter()
        HANDLERS[args.command](cfg, out)
        # wall-clock lives beside the record so records stay byte-reproducible
        write_json(out / "timing.json", {"command": args.command, "wall_clock_seconds": time.perf_counter() - t0})
        return EXIT_OK
    except (ConfigError, ParameterError, DimensionError, CapacityError, jsonschema.SchemaError) as exc:
        print(f"partivae: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"partivae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, EvaluationError, FloatingPointError) as exc:
        print(f"partivae: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
