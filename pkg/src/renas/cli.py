"""Command-line entry point: ``renas {search,derive,eval,space-size}``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from typing import Optional

import jsonschema

from .checkpoint import CheckpointError, atomic_write
from .config import ConfigError, SearchConfig

logger = logging.getLogger("renas")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2

_CLI_ONLY = {
    "checkpoint_every": {"type": "integer", "minimum": 0},
    "retrain": {"type": "boolean"},
    "retrain_steps": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "M": {"type": "integer", "minimum": 1},
        "N": {"type": "integer", "minimum": 1},
        "K": {"type": "integer", "minimum": 1},
        "C0": {"type": "integer", "minimum": 1},
        "op_set": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "classes": {"type": "integer", "minimum": 2},
        "in_channels": {"type": "integer", "minimum": 1},
        "image_size": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "total_steps": {"type": "integer", "minimum": 0},
        "lr_w": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "grad_clip": {"type": "number", "minimum": 0},
        "lr_alpha": {"type": "number", "exclusiveMinimum": 0},
        "val_size": {"type": "integer", "minimum": 0},
        "augment": {"type": "boolean"},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": ["synthetic", "cifar10"]}, "path": {"type": "string"}},
        },
        **_CLI_ONLY,
    },
}


class ValidationFailure(Exception):
    pass


def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationFailure(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_cli_config(path: str) -> tuple[SearchConfig, dict]:
    """Schema-check a config file and split it into (SearchConfig, CLI-only options)."""
    doc = _read_json(path)
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        field = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationFailure(f"{path}: field {field}: {exc.message}") from exc
    extras = {k: doc.pop(k) for k in list(doc) if k in _CLI_ONLY}
    seed_env = os.environ.get("RENAS_SEED")
    if seed_env is not None:
        try:
            doc["seed"] = int(seed_env)
        except ValueError as exc:
            raise ValidationFailure(f"RENAS_SEED must be an integer, got {seed_env!r}") from exc
        logger.warning("seed overridden by RENAS_SEED=%s", seed_env)
    try:
        cfg = SearchConfig.from_dict(doc).validate()
    except ConfigError as exc:
        raise ValidationFailure(f"{path}: {exc}") from exc
    return cfg, extras


def _parse_data_descriptor(text: str) -> dict:
    if os.path.isfile(text):
        return _read_json(text)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        if os.path.isdir(text):
            return {"kind": "cifar10", "path": text}
        raise ValidationFailure(f"--data must be a JSON descriptor, a JSON file or a CIFAR-10 directory: {text!r}")
    if not isinstance(doc, dict) or doc.get("kind") not in ("synthetic", "cifar10"):
        raise ValidationFailure("--data descriptor needs kind 'synthetic' or 'cifar10'")
    return doc


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_search(args) -> int:
    from .search import resolve_dataset, run_search

    cfg, extras = load_cli_config(args.config)
    out = args.out or extras.get("out")
    if not out:
        raise ValidationFailure("no output directory: pass --out or set 'out' in the config")
    try:
        train, test = resolve_dataset(cfg)
    except FileNotFoundError as exc:
        raise ValidationFailure(str(exc)) from exc
    except ConfigError as exc:
        raise ValidationFailure(f"{args.config}: {exc}") from exc
    os.makedirs(out, exist_ok=True)
    result = run_search(
        cfg, train, test, checkpoint_dir=out, checkpoint_every=int(extras.get("checkpoint_every", 0))
    )
    lines = [json.dumps(r, sort_keys=True) for r in result.state.history]
    atomic_write(os.path.join(out, "metrics.jsonl"), ("\n".join(lines) + "\n" if lines else "").encode())
    summary = {
        "initial_val_loss": result.initial_val_loss,
        "final_val_loss": result.final_val_loss,
        "steps": result.state.step,
        "checkpoint": os.path.join(out, "final.bin"),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _op_diff(a, b) -> list[str]:
    names = a.config.op_set
    out = []
    for idx, (x, y) in enumerate(zip(a.ops, b.ops)):
        if x != y:
            d, j = divmod(idx, a.config.N)
            out.append(f"d{d}.n{j}: {names[x]} -> {names[y]}")
    return out


def cmd_derive(args) -> int:
    from .discretize import arch_to_dict, derive, export_arch, import_arch, save_arch_weights

    try:
        arch = derive(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    export_arch(arch, args.out, "json")
    save_arch_weights(arch, args.out + ".weights")
    if args.dot:
        export_arch(arch, args.dot, "dot")
    doc = arch_to_dict(arch)
    report = {"param_count": doc["param_count"], "retained_fraction": arch.retained_fraction()}
    if args.against:
        other = import_arch(args.against) if args.against.endswith(".json") else derive(args.against)
        diff = _op_diff(other, arch)
        report["op_changes"] = diff
        print(f"op diff vs {args.against}: {len(diff)} node(s) changed", file=sys.stderr)
        for line in diff:
            print("  " + line, file=sys.stderr)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .config import SearchConfig as _SC
    from .discretize import derived_forward, import_arch, init_weights, load_arch_weights, retrain
    from .search import evaluate, resolve_dataset
    from .supergraph import count_params

    try:
        arch = import_arch(args.arch)
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationFailure(f"{args.arch}: {exc}") from exc
    desc = _parse_data_descriptor(args.data)
    cfg = arch.config
    data_cfg = _SC(
        seed=int(desc.get("seed", cfg.seed)),
        M=cfg.M,
        N=cfg.N,
        K=cfg.K,
        C0=cfg.C0,
        op_set=cfg.op_set,
        classes=int(desc.get("classes", cfg.classes)),
        in_channels=cfg.in_channels,
        image_size=cfg.image_size,
        val_size=0,
        dataset=desc,
    )
    if data_cfg.classes != cfg.classes:
        raise ValidationFailure(f"architecture predicts {cfg.classes} classes but data has {data_cfg.classes}")
    try:
        train, test = resolve_dataset(data_cfg)
    except (FileNotFoundError, ConfigError) as exc:
        raise ValidationFailure(str(exc)) from exc
    weights = args.arch + ".weights"
    if os.path.isfile(weights) and not args.fresh:
        load_arch_weights(arch, weights)
    else:
        init_weights(arch, int(arch.provenance.get("seed") or 0))
    steps = int(args.retrain or 0)
    if steps:
        retrain(arch, train, steps, seed=data_cfg.seed)
    loss, acc = evaluate(lambda x: derived_forward(arch, x), test)
    report = {
        "accuracy": acc,
        "loss": loss,
        "param_count": count_params(arch),
        "retrain_steps": steps,
        "test_samples": len(test),
    }
    if not np.isfinite(loss):
        print(json.dumps(report, sort_keys=True))
        return EXIT_RUNTIME
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_space_size(args) -> int:
    from .discretize import search_space_size

    n = search_space_size(args.dags, args.nodes, args.ops)
    print(n)
    print(f"log10 {math.log10(n):.3f}")
    return EXIT_OK


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the architecture search")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides 'out' in the config)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="discretize a checkpoint into an architecture")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="architecture JSON path")
    p.add_argument("--dot", help="optional DOT graph path")
    p.add_argument("--against", help="checkpoint or arch JSON to diff op choices against")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("eval", help="evaluate a derived architecture")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True, help="JSON descriptor, JSON file, or CIFAR-10 directory")
    p.add_argument("--retrain", type=int, default=0, metavar="STEPS")
    p.add_argument("--fresh", action="store_true", help="ignore saved weights and initialize from the seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("space-size", help="count networks in the search space")
    p.add_argument("--dags", type=_positive_int, required=True)
    p.add_argument("--nodes", type=_positive_int, required=True)
    p.add_argument("--ops", type=_positive_int, required=True)
    p.set_defaults(func=cmd_space_size)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, FloatingPointError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
