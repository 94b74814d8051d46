"""Command-line interface: ``spnmkl {train,predict,inspect,gen-synth}``.

Exit codes: 0 ok, 2 config/parse error, 3 data error, 4 degenerate training.
Failures print one JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path as FsPath

import numpy as np
import yaml

from . import datasets
from .errors import (
    ConfigError,
    DataError,
    DegenerateProblemError,
    EmptyModelError,
    ModelFormatError,
    PathLimitError,
    SpnMklError,
    StructureError,
)
from .kernels import KernelSpec
from .model_io import TrainedModel, load_model
from .spn_graph import enumerate_paths, spn_from_dict
from .trainer import TrainConfig, fit
from .weighting import path_weights

log = logging.getLogger("spnmkl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4

_EXIT_CODES = [
    ((StructureError, ConfigError, PathLimitError, ModelFormatError), EXIT_CONFIG),
    ((DataError,), EXIT_DATA),
    ((DegenerateProblemError, EmptyModelError), EXIT_DEGENERATE),
]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SPNMKL_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Config


def _read_doc(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        if str(path).endswith((".yaml", ".yml")):
            return yaml.safe_load(text)
        return json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse ({exc})") from None


def load_config(path, overrides: dict | None = None) -> dict:
    """Read and validate an experiment config; relative paths resolve against its directory."""
    cfg = _read_doc(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    overrides = overrides or {}
    base = FsPath(path).resolve().parent

    def resolve(p):
        return str(p if os.path.isabs(p) else base / p)

    for key in ("data", "structure", "kernels"):
        if key not in cfg and key not in overrides:
            raise ConfigError(f"config is missing '{key}'")
    data = cfg.get("data", {})
    if isinstance(data, str):
        data = {"path": data}
    data = dict(data)
    if "data" in overrides:
        data["path"] = os.path.abspath(overrides["data"])
    elif "path" in data:
        data["path"] = resolve(data["path"])
    else:
        raise ConfigError("config 'data' needs a 'path'")
    if overrides.get("format"):
        data["format"] = overrides["format"]

    specs = [KernelSpec.from_dict(k) for k in cfg["kernels"]]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate kernel names")

    structure = cfg["structure"]
    if isinstance(structure, str):
        structure = _read_doc(resolve(structure))
    try:
        graph = spn_from_dict(structure, kernel_names=names)
    except (TypeError, AttributeError) as exc:
        raise StructureError(f"malformed structure document: {exc}") from None

    reg = dict(cfg.get("regularizer", {}))
    extra = set(reg) - {"C", "lambda", "p_default", "p"}
    if extra:
        raise ConfigError(f"unknown regularizer option(s) {sorted(extra)}")
    train = dict(cfg.get("train", {}))
    for k in ("C", "lam", "p", "p_default"):
        if k in train:
            raise ConfigError(f"set '{k}' under 'regularizer', not 'train'")
    if "seed" in overrides:
        train["seed"] = overrides["seed"]
    if "max_paths" in overrides:
        train["max_paths"] = overrides["max_paths"]
    try:
        tc = TrainConfig.from_dict(
            dict(
                train,
                C=float(reg.get("C", 1.0)),
                lam=float(reg.get("lambda", 1.0)),
                p_default=float(reg.get("p_default", 1.0)),
                p={k: float(v) for k, v in (reg.get("p") or {}).items()},
            )
        )
    except TypeError as exc:
        raise ConfigError(f"bad training options: {exc}") from None
    graph.exponents(tc.p_default, tc.p)

    out = dict(cfg.get("output", {}))
    model_path = overrides.get("out") or (resolve(out["model"]) if "model" in out else "model.json")
    # an explicit --out keeps the log next to the model
    if "log" in out and "out" not in overrides:
        log_path = resolve(out["log"])
    else:
        log_path = os.path.splitext(model_path)[0] + ".log.jsonl"
    if not os.path.exists(data["path"]):
        raise ConfigError(f"dataset {data['path']} does not exist")
    return {
        "data": data,
        "graph": graph,
        "specs": specs,
        "train": tc,
        "model_path": model_path,
        "log_path": log_path,
    }


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    overrides = {k: v for k, v in (("data", args.data), ("format", args.format), ("out", args.out),
                                   ("seed", args.seed), ("max_paths", args.max_paths)) if v is not None}
    cfg = load_config(args.config, overrides)
    X, y = datasets.load_dataset(cfg["data"]["path"], cfg["data"].get("format"))
    if y is None:
        raise DataError("training data must be labeled")
    with open(cfg["log_path"], "w") as logfh:
        def emit(rec):
            logfh.write(json.dumps(rec) + "\n")

        model = fit(X, y, cfg["graph"], cfg["specs"], cfg["train"], log_record=emit, n_jobs=_threads())
    model.save(cfg["model_path"])
    t = model.training
    print(
        f"trained {len(model.table)} paths in {t['iterations']} iterations "
        f"(converged: {str(t['converged']).lower()}); objective {t['objective']:.10g}; "
        f"training accuracy {t['train_accuracy']:.6f}; model written to {cfg['model_path']}"
    )
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.model or not args.data:
        raise ConfigError("predict needs --model and --data")
    model = load_model(args.model)
    X, y = datasets.load_dataset(args.data, args.format, n_features=model.n_features)
    F, labels = model.predict(X)
    out = args.out or os.path.splitext(args.data)[0] + ".pred.csv"
    F2 = F[:, None] if F.ndim == 1 else F
    with open(out, "w") as fh:
        head = ["decision"] if model.binary else [f"decision_{c}" for c in model.classes]
        fh.write(",".join(["label", *head]) + "\n")
        for lab, row in zip(labels.tolist(), F2):
            fh.write(",".join([str(lab), *(repr(float(v)) for v in row)]) + "\n")
    print(f"predictions written to {out}")
    if y is not None:
        print(f"accuracy {float(np.mean(labels == y)):.6f}")
    return EXIT_OK


def _fraction_tuple(exps) -> str:
    return "(" + ", ".join(str(e) for e in exps) + ")"


def cmd_inspect(args) -> int:
    if not args.model:
        raise ConfigError("inspect needs --model (a model file or a structure document)")
    doc = _read_doc(args.model)
    lam = 1.0
    if isinstance(doc, dict) and "format_version" in doc:
        model = TrainedModel.from_dict(doc)
        graph, table, betas, lam = model.graph, model.table, model.betas, model.lam
        pruned, training = model.pruned, model.training
    else:
        graph = spn_from_dict(doc)
        table = enumerate_paths(graph, args.max_paths or 10_000)
        betas = {v: 1.0 for v in table.product_ids}
        pruned, training = [], {}
    beta = np.array([betas[v] for v in table.product_ids])
    g = path_weights(table, beta)

    lines = [f"paths: {len(table)}", "", "node  beta  c_v/lambda"]
    for v in table.product_ids:
        lines.append(f"{v}  {betas[v]:.10g}  {table.coeff_units[v]}")
    total = sum(table.coeff_units.values())
    lines.append(f"sum c_v/lambda = {total}  (path count {len(table)})")
    lines += ["", "path  leaves  members  exponents  g"]
    for p, gm in zip(table.paths, g):
        lines.append(
            f"{p.id}  {'*'.join(p.leaves)}  {','.join(p.member_ids)}  {_fraction_tuple(p.exponents)}  {gm:.10g}"
        )
    lines.append("")
    lines.append(f"pruned nodes: {', '.join(pruned) if pruned else '(none)'}")
    if training:
        lines.append(f"lambda = {lam:g}")
        lines.append(f"A = {training.get('A', float('nan')):.10g}")
        lines.append(
            "complexity bound (plug-in value, an upper bound of the min-form bound): "
            f"{training.get('rademacher_plugin_bound', float('nan')):.10g}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    X, y = datasets.generate(args.kind, args.n, args.seed if args.seed is not None else 0, args.k)
    out = args.out or f"{args.kind}.csv"
    fmt = args.format or datasets.detect_format(out)
    if fmt == "libsvm":
        with open(out, "w") as fh:
            for lab, row in zip(y.tolist(), X):
                fh.write(" ".join([str(lab)] + [f"{i + 1}:{float(v)!r}" for i, v in enumerate(row)]) + "\n")
    else:
        datasets.write_csv(out, X, y.tolist())
    print(f"wrote {len(X)} rows to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config")
    common.add_argument("--model")
    common.add_argument("--data")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--format", choices=datasets.FORMATS)
    common.add_argument("--max-paths", type=int, dest="max_paths")
    common.add_argument("--log-level", default="WARNING", dest="log_level")

    parser = argparse.ArgumentParser(prog="spnmkl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    sub.add_parser("predict", parents=[common], help="predict with a model").set_defaults(func=cmd_predict)
    sub.add_parser("inspect", parents=[common], help="report weights, paths, coefficients").set_defaults(
        func=cmd_inspect
    )
    gen = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset")
    gen.add_argument("kind", choices=datasets.SYNTH_KINDS)
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--k", type=int, default=3)
    gen.set_defaults(func=cmd_gen_synth)
    return parser


def _fail(exc: Exception, code: int) -> int:
    rec = {"status": "error", "code": code, "kind": type(exc).__name__, "message": str(exc)}
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not args.config:
        return _fail(ConfigError("train needs --config"), EXIT_CONFIG)
    try:
        return args.func(args)
    except SpnMklError as exc:
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                return _fail(exc, code)
        return _fail(exc, 1)
    except OSError as exc:
        return _fail(exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
