"""Command line entry points.

Subcommands:

    hetxl datagen CONFIG            write a synthetic dataset
    hetxl train CONFIG              train a head, write model + metrics
    hetxl predict CONFIG ...        score a dataset with a saved model
    hetxl grid-tau CONFIG           fixed-temperature grid search
    hetxl bench CONFIG              latency benchmark
    hetxl verify [--level ...]      run the oracle checks

Configs are JSON documents validated against a schema before anything runs;
unknown keys and missing required keys are rejected with the offending path.
Exit codes: 0 success, 2 config error, 3 data error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from pathlib import Path

import numpy as np
import jsonschema

from . import datagen, io as hio, verify
from .covariance import Dims, HASHED_SPACE, LOGIT_SPACE, PRE_LOGIT_SPACE, RANK_ONE, DIAGONAL
from .diagnostics import bench_predict
from .errors import ConfigError, DataError, NumericError
from .sampling import RngStream, SIGMOID, SOFTMAX
from .training import (
    DEFAULT_TAU_GRID,
    DETERMINISTIC,
    MC,
    MEAN_FIELD,
    TrainConfig,
    grid_search_tau,
    nll,
    precision_at_1,
    predict,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

THREADS_ENV = "HETXL_THREADS"

_VARIANTS = [LOGIT_SPACE, PRE_LOGIT_SPACE, HASHED_SPACE, DETERMINISTIC]
_LINKS = [SOFTMAX, SIGMOID]

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "output_dir"],
    "properties": {
        "schema_version": {"const": 1},
        "output_dir": {"type": "string", "minLength": 1},
        "dims": {
            "type": "object",
            "additionalProperties": False,
            "required": ["D", "K"],
            "properties": {
                "D": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "R": {"type": "integer", "minimum": 1},
                "H": {"type": "integer", "minimum": 1},
            },
        },
        "datagen": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_examples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "noise": {"type": "string", "enum": [datagen.GAUSSIAN, datagen.GUMBEL, datagen.NONE]},
                "variant": {"type": "string", "enum": [LOGIT_SPACE, PRE_LOGIT_SPACE, HASHED_SPACE]},
                "tail": {"type": "string", "enum": [RANK_ONE, DIAGONAL]},
                "link": {"type": "string", "enum": _LINKS},
                "label_temperature": {"type": "number", "minimum": 0},
                "utility_scale": {"type": "number", "exclusiveMinimum": 0},
                "noise_scale": {"type": "number", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "lr_schedule": {"type": "string", "enum": ["constant", "cosine"]},
                "estimator": {"type": "string", "enum": [MC, MEAN_FIELD]},
                "s_train": {"type": "integer", "minimum": 1},
                "s_eval": {"type": "integer", "minimum": 1},
                "link": {"type": "string", "enum": _LINKS},
                "seed": {"type": "integer", "minimum": 0},
                "variant": {"type": "string", "enum": _VARIANTS},
                "tail": {"type": "string", "enum": [RANK_ONE, DIAGONAL]},
                "rank": {"type": "integer", "minimum": 1},
                "buckets": {"type": "integer", "minimum": 1},
                "tau_mode": {"type": "string", "enum": ["learned", "fixed"]},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "tau_min": {"type": "number", "exclusiveMinimum": 0},
                "tau_max": {"type": "number", "exclusiveMinimum": 0},
                "tau_grid": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0},
                    "minItems": 1,
                },
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lam_mf": {"type": "number", "exclusiveMinimum": 0},
                "init_noise_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "meanfield": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "exclusiveMinimum": 0},
                "quad_nodes": {"type": "integer", "minimum": 20},
            },
        },
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "required": ["S_list"],
            "properties": {
                "S_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "batch": {"type": "integer", "minimum": 1},
                "reps": {"type": "integer", "minimum": 5},
                "variants": {
                    "type": "array",
                    "items": {"type": "string", "enum": [LOGIT_SPACE, PRE_LOGIT_SPACE, HASHED_SPACE]},
                    "minItems": 1,
                },
            },
        },
    },
}

_REQUIRED_RE = re.compile(r"'([^']+)' is a required property")
_EXTRA_RE = re.compile(r"Additional properties are not allowed \('([^']+)'")


def _schema_error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    m = _REQUIRED_RE.match(err.message) or _EXTRA_RE.match(err.message)
    if m:
        parts.append(m.group(1))
    return ".".join(parts) if parts else "(root)"


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"config error at {_schema_error_path(err)}: {err.message}")
    return raw


def _require_section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"config error at {name}: section is required for this command")
    return cfg[name]


def _train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg.get("train", ()))
    if "tau_grid" in section:
        section["tau_grid"] = tuple(section["tau_grid"])
    mf = cfg.get("meanfield", {})
    if "lam_mf" not in section and "lambda" in mf:
        section["lam_mf"] = mf["lambda"]
    try:
        return TrainConfig(**section)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path: str) -> datagen.SyntheticDataset:
    try:
        return hio.load_dataset(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc


def _load_head(path: str):
    try:
        return hio.load_head(path)
    except FileNotFoundError as exc:
        raise DataError(f"model file not found: {path}") from exc


def _truth_digest(head) -> str:
    parts = [head.W.tobytes(), head.b.tobytes()]
    if head.spec is not None:
        for name in ("J", "K_het", "b_het", "K_diag", "b_diag"):
            parts.append(np.ascontiguousarray(getattr(head.spec, name)).tobytes())
    return hashlib.sha256(b"".join(parts)).hexdigest()[:16]


def cmd_datagen(cfg: dict, quiet: bool) -> int:
    # Both sections are optional here: the bare config falls back to the
    # library's default synthetic benchmark (D=16, K=40, R=4, N=20000).
    dims = cfg.get("dims", {"D": 16, "K": 40})
    section = cfg.get("datagen", {})
    spec = datagen.default_synthetic_spec(
        D=dims["D"],
        K=dims["K"],
        R=dims.get("R", 4),
        n_examples=section.get("n_examples", 20000),
        seed=section.get("seed", 0),
        noise=section.get("noise", datagen.GAUSSIAN),
        variant=section.get("variant", PRE_LOGIT_SPACE),
        tail=section.get("tail", RANK_ONE),
        link=section.get("link", SOFTMAX),
        label_temperature=section.get("label_temperature", 0.0),
        utility_scale=section.get("utility_scale", 3.0),
        noise_scale=section.get("noise_scale", 1.5),
    )
    dataset = datagen.make_synthetic(spec)
    out = _out_dir(cfg)
    provenance = {
        "dims": dims,
        "datagen": section,
        "link": spec.link,
        "truth_sha256": _truth_digest(spec.head),
    }
    dataset = datagen.SyntheticDataset(X=dataset.X, y=dataset.y, provenance=provenance)
    path = out / "dataset.hxlm"
    hio.save_dataset(path, dataset)
    if not quiet:
        print(f"wrote {path} ({len(dataset)} examples, D={dims['D']}, K={dims['K']})")
    return EXIT_OK


def _final_metrics(head, dataset, config: TrainConfig) -> dict:
    probs = predict(head, dataset.X, config, RngStream(config.seed, (9,))).probs
    return {
        "nll": float(nll(probs, dataset.y, config.link)),
        "prec_at_1": float(precision_at_1(probs, dataset.y)),
        "tau": float(head.temperature.value()),
    }


def cmd_train(cfg: dict, dataset_path: str | None, quiet: bool) -> int:
    config = _train_config(cfg)
    out = _out_dir(cfg)
    if dataset_path is None:
        dataset_path = str(out / "dataset.hxlm")
    dataset = _load_dataset(dataset_path)
    try:
        head, trace = train(dataset, config)
    except ValueError as exc:
        # Config passed schema validation, so a ValueError here means the
        # dataset does not fit it (label layout, shapes).
        raise DataError(str(exc)) from exc
    hio.save_head(out / "model.hxlm", head)
    (out / "metrics.csv").write_text(trace.to_csv(), encoding="utf-8")
    final = _final_metrics(head, dataset, config)
    with open(out / "final.json", "w", encoding="utf-8") as fh:
        json.dump(final, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not quiet:
        print(
            f"trained {config.variant} head for {config.steps} steps: "
            f"nll={final['nll']:.6f} prec_at_1={final['prec_at_1']:.4f} tau={final['tau']:.4f}"
        )
    return EXIT_OK


def cmd_predict(cfg: dict, model_path: str, dataset_path: str, out_path: str | None,
                threads: int, quiet: bool) -> int:
    config = _train_config(cfg)
    head = _load_head(model_path)
    dataset = _load_dataset(dataset_path)
    if dataset.X.shape[1] != head.D:
        raise DataError(
            f"dataset feature dimension {dataset.X.shape[1]} does not match model D={head.D}"
        )
    try:
        batch = predict(head, dataset.X, config, RngStream(config.seed, (9,)), threads=threads)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(out_path) if out_path is not None else _out_dir(cfg) / "probs.hxlm"
    out.parent.mkdir(parents=True, exist_ok=True)
    hio.write_tensors(out, {"probs": batch.probs})
    summary = {
        "estimator": batch.estimator,
        "n_examples": int(dataset.X.shape[0]),
        "nll": float(nll(batch.probs, dataset.y, config.link)),
        "prec_at_1": float(precision_at_1(batch.probs, dataset.y)),
    }
    with open(str(out) + ".json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not quiet:
        print(
            f"wrote {out}: nll={summary['nll']:.6f} prec_at_1={summary['prec_at_1']:.4f} "
            f"({summary['estimator']})"
        )
    return EXIT_OK


def cmd_grid_tau(cfg: dict, dataset_path: str | None, quiet: bool) -> int:
    config = _train_config(cfg)
    out = _out_dir(cfg)
    if dataset_path is None:
        dataset_path = str(out / "dataset.hxlm")
    dataset = _load_dataset(dataset_path)
    grid = config.tau_grid if config.tau_grid else DEFAULT_TAU_GRID
    try:
        best, points = grid_search_tau(dataset, config, grid)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    lines = ["tau,val_nll,val_prec_at_1"]
    lines += [f"{p.tau!r},{p.val_nll!r},{p.val_prec_at_1!r}" for p in points]
    (out / "grid_tau.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    payload = {
        "best_tau": best.tau,
        "best_val_nll": best.val_nll,
        "points": [
            {"tau": p.tau, "val_nll": p.val_nll, "val_prec_at_1": p.val_prec_at_1}
            for p in points
        ],
    }
    with open(out / "grid_tau.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not quiet:
        for p in points:
            print(f"tau={p.tau:<6g} val_nll={p.val_nll:.6f} val_prec_at_1={p.val_prec_at_1:.4f}")
        print(f"best tau: {best.tau:g} (val_nll={best.val_nll:.6f})")
    return EXIT_OK


def cmd_bench(cfg: dict, quiet: bool) -> int:
    dims_cfg = _require_section(cfg, "dims")
    section = _require_section(cfg, "bench")
    dims = Dims(
        D=dims_cfg["D"],
        K=dims_cfg["K"],
        R=dims_cfg.get("R", 4),
        H=dims_cfg.get("H"),
    )
    report = bench_predict(
        dims,
        S_list=section["S_list"],
        batch=section.get("batch", 8),
        reps=section.get("reps", 5),
        variants=tuple(section.get("variants", [LOGIT_SPACE, PRE_LOGIT_SPACE])),
    )
    out = _out_dir(cfg)
    (out / "bench.csv").write_text(report.to_csv(), encoding="utf-8")
    with open(out / "bench.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not quiet:
        print(report.to_csv(), end="")
    return EXIT_OK


def cmd_verify(level: str, quiet: bool) -> int:
    results = verify.run_checks(level)
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return EXIT_VERIFY
    if not quiet:
        print(f"all {len(results)} checks passed")
    return EXIT_OK


def _resolve_threads(value: int | None) -> int:
    if value is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetxl",
        description="Heteroscedastic classification heads: data, training, prediction, benchmarks.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads for prediction (default: ${THREADS_ENV} or 1)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset from a JSON config")
    p.add_argument("config")

    p = sub.add_parser("train", help="train a head on a dataset")
    p.add_argument("config")
    p.add_argument("--dataset", default=None, help="dataset path (default: <output_dir>/dataset.hxlm)")

    p = sub.add_parser("predict", help="score a dataset with a saved model")
    p.add_argument("config")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="output tensor path (default: <output_dir>/probs.hxlm)")

    p = sub.add_parser("grid-tau", help="fixed-temperature grid search on a validation split")
    p.add_argument("config")
    p.add_argument("--dataset", default=None, help="dataset path (default: <output_dir>/dataset.hxlm)")

    p = sub.add_parser("bench", help="latency benchmark of the prediction path")
    p.add_argument("config")

    p = sub.add_parser("verify", help="run the oracle checks (quadrature, brute force, finite differences)")
    p.add_argument("--level", choices=list(verify.LEVELS), default=verify.FAST)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _resolve_threads(args.threads)
        if args.command == "verify":
            return cmd_verify(args.level, args.quiet)
        cfg = load_config(args.config)
        if args.command == "datagen":
            return cmd_datagen(cfg, args.quiet)
        if args.command == "train":
            return cmd_train(cfg, args.dataset, args.quiet)
        if args.command == "predict":
            return cmd_predict(cfg, args.model, args.dataset, args.out, threads, args.quiet)
        if args.command == "grid-tau":
            return cmd_grid_tau(cfg, args.dataset, args.quiet)
        if args.command == "bench":
            return cmd_bench(cfg, args.quiet)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        # Divergence and other numeric aborts: not a config/data/verify
        # failure, so use the generic nonzero code.
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
