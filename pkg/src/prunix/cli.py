"""``prunix`` command line: train, prune, quantize, inject, eval, sweep, report.

Every command reads ``--config`` (YAML), takes ``--seed`` and writes into
``--out``. A command whose inputs are missing from the output directory, or
were produced under a different configuration, first re-runs the commands it
depends on. The ``prune`` and ``inject`` flags are remembered in
``overrides.json`` so later commands in the same directory see them. Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import crossbar as xb
from .checkpoint import load_arrays, load_model, save_arrays, save_model
from .config import ConfigError, PipelineConfig, load_config
from .data import DataError
from .pipeline import (MetricsRecord, NumericalError, PipelineState, SWEEP_AXES,
                       prepare_data, stage_fine_tune, stage_initial_train, stage_prune,
                       stage_quantize, stage_rank, stage_regularized_train, sweep,
                       weight_histogram)
from .model import evaluate_accuracy
from .pruning import PruneStep, SparsityReport, measure_sparsity
from .quantizer import QuantScheme

logger = logging.getLogger("prunix")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

METRIC_FIELDS = ("stage", "epoch", "train_loss", "val_accuracy", "test_accuracy", "sparsity",
                 "lambda_s", "faults")

# config sections each product depends on
_DEPENDS = {
    "train": ("seed", "data", "train", "regularizer", "quant"),
    "prune": ("seed", "data", "train", "regularizer", "quant", "prune"),
    "quantize": ("seed", "data", "train", "regularizer", "quant", "prune"),
    "inject": ("seed", "data", "train", "regularizer", "quant", "prune", "faults"),
}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _fingerprint(config: PipelineConfig, product: str) -> str:
    d = config.to_dict()
    sub = {k: d[k] for k in _DEPENDS[product]}
    return hashlib.sha256(json.dumps(sub, sort_keys=True, default=str).encode()).hexdigest()


class Run:
    """One output directory: its data, checkpoints and metric log."""

    def __init__(self, config: PipelineConfig, out: Path):
        self.config = config
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = prepare_data(self.config, self.out)
        return self._data

    def path(self, name: str) -> Path:
        return self.out / name

    # --- metric log -------------------------------------------------------

    def read_records(self) -> list[dict]:
        p = self.path("metrics.jsonl")
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    def write_records(self, stages, records: list[MetricsRecord]) -> None:
        """Replace every logged record of ``stages`` with ``records``; keep stage order."""
        stages = set(stages)
        kept = [r for r in self.read_records() if r["stage"] not in stages]
        # states carry earlier stages' records too; those were logged by their own command
        rows = kept + [json.loads(r.to_json()) for r in records if r.stage in stages]
        rows.sort(key=lambda r: stage_rank(r["stage"]))  # stable: epochs keep their order
        self.path("metrics.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(["" if r[k] is None else
                        json.dumps(r[k], sort_keys=True) if k == "faults" else r[k]
                        for k in METRIC_FIELDS])
        self.path("metrics.csv").write_text(buf.getvalue())

    # --- checkpoints ------------------------------------------------------

    def fresh(self, name: str, product: str) -> bool:
        p = self.path(name)
        if not p.exists():
            return False
        _, meta = load_arrays(p)
        return meta.get("fingerprint") == _fingerprint(self.config, product)

    def save(self, name: str, product: str, model, **meta) -> None:
        save_model(self.path(name), model, {"fingerprint": _fingerprint(self.config, product),
                                            "seed": self.config.seed, **meta})

    def write_histogram(self, stage: str, model, scheme: QuantScheme) -> None:
        self.path(f"hist_{stage}.csv").write_text(weight_histogram(model, scheme))


# --- commands -------------------------------------------------------------

def do_train(run: Run) -> PipelineState:
    config, data = run.config, run.data
    s1 = stage_initial_train(config, data)
    s2 = stage_regularized_train(s1, config, data)
    run.save("initial.ckpt", "train", s1.float_model)
    run.save("regularized.ckpt", "train", s2.float_model, scheme=s2.scheme.to_dict())
    run.write_histogram("initial", s1.float_model, s2.scheme)
    run.write_histogram("regularized", s2.float_model, s2.scheme)
    run.write_records(("initial", "regularized"), s2.records)
    return s2


def load_trained(run: Run) -> PipelineState:
    if not run.fresh("regularized.ckpt", "train"):
        return do_train(run)
    model, meta, _ = load_model(run.path("regularized.ckpt"))
    scheme = QuantScheme.from_dict(meta["scheme"])
    return PipelineState(model, model, scheme)


def do_prune(run: Run) -> PipelineState:
    s2 = load_trained(run)
    s3 = stage_prune(s2, run.config, run.data)
    run.save("pruned.ckpt", "prune", s3.float_model, scheme=s3.scheme.to_dict(),
             prune_steps=[asdict(st) for st in s3.prune_steps])
    return s3


def load_pruned(run: Run) -> PipelineState:
    if not run.fresh("pruned.ckpt", "prune"):
        return do_prune(run)
    model, meta, _ = load_model(run.path("pruned.ckpt"))
    steps = [PruneStep(**st) for st in meta["prune_steps"]]
    return PipelineState(model, model, QuantScheme.from_dict(meta["scheme"]), None, steps)


def _write_sparsity(run: Run, report: SparsityReport, steps) -> None:
    doc = json.loads(report.to_json())
    doc["prune_steps"] = [asdict(st) for st in steps]
    run.path("sparsity.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    run.path("sparsity.csv").write_text(report.to_csv())


def do_quantize(run: Run) -> PipelineState:
    s3 = stage_quantize(load_pruned(run), run.config, run.data)
    s4 = stage_fine_tune(s3, run.config, run.data)
    run.save("quantized.ckpt", "quantize", s4.model, scheme=s4.scheme.to_dict(),
             prune_steps=[asdict(st) for st in s4.prune_steps])
    run.save("shadow.ckpt", "quantize", s4.float_model, scheme=s4.scheme.to_dict())
    run.write_histogram("finetune", s4.float_model, s4.scheme)
    _write_sparsity(run, s4.report, s4.prune_steps)
    run.write_records(("prune_quantize", "finetune"), s4.records)
    return s4


def load_quantized(run: Run) -> PipelineState:
    if not (run.fresh("quantized.ckpt", "quantize") and run.fresh("shadow.ckpt", "quantize")):
        return do_quantize(run)
    model, meta, _ = load_model(run.path("quantized.ckpt"))
    shadow, _, _ = load_model(run.path("shadow.ckpt"))
    steps = [PruneStep(**st) for st in meta["prune_steps"]]
    return PipelineState(shadow, model, QuantScheme.from_dict(meta["scheme"]), None, steps)


def _fault_params(config: PipelineConfig, fault_seed_value: int) -> dict:
    f = config.faults
    return {"stuck_off": f.stuck_off, "drift": f.drift, "drift_fraction": f.drift_fraction,
            "aging_fraction": f.aging_fraction, "aging_levels": f.aging_levels,
            "seed": fault_seed_value}


def _inject(pairs, params: dict):
    seed = params["seed"]
    if params["stuck_off"]:
        pairs = xb.inject_stuck_off(pairs, params["stuck_off"], seed)
    if params["drift"] and params["drift_fraction"]:
        pairs = xb.inject_drift(pairs, xb.DriftParams(params["drift"], params["drift_fraction"]),
                                seed)
    if params["aging_fraction"]:
        pairs = xb.inject_aging(
            pairs, xb.AgingParams(params["aging_fraction"], params["aging_levels"]), seed)
    return pairs


def _crossbar_record(stage, epoch, pairs, state, data, faults=None) -> MetricsRecord:
    val = (xb.evaluate_on_crossbar(pairs, state.model, data.X_val, data.y_val)
           if len(data.y_val) else None)
    test = xb.evaluate_on_crossbar(pairs, state.model, data.X_test, data.y_test)
    return MetricsRecord(stage, epoch, None, val, test, state.report.overall, None, faults)


def do_inject(run: Run, fault_seed_value: int) -> None:
    state = load_quantized(run)
    state.report = measure_sparsity(state.model)
    params = _fault_params(run.config, fault_seed_value)
    pairs = _inject(xb.map_model(state.model, state.scheme), params)
    arrays = {}
    for pair in pairs:
        arrays.update(pair.fault_arrays())
    save_arrays(run.path("faults.ckpt"), arrays,
                {"fingerprint": _fingerprint(run.config, "inject"), "faults": params})
    run.write_records(("inject",), [_crossbar_record("inject", 0, pairs, state, run.data,
                                                     params)])


def do_eval(run: Run) -> None:
    state = load_quantized(run)
    state.report = measure_sparsity(state.model)
    data = run.data
    pairs = xb.map_model(state.model, state.scheme)
    records = [_crossbar_record("eval", 0, pairs, state, data)]
    fpath = run.path("faults.ckpt")
    if fpath.exists():
        arrays, meta = load_arrays(fpath)
        if meta.get("fingerprint") == _fingerprint(run.config, "inject"):
            faulty = [p.copy() for p in pairs]
            for p in faulty:
                p.load_faults(arrays)
            records.append(_crossbar_record("eval", 1, faulty, state, data, meta["faults"]))
        else:
            logger.warning("ignoring %s: written under a different configuration", fpath)
    float_acc = evaluate_accuracy(state.float_model, data.X_test, data.y_test)
    logger.info("shadow-weight test accuracy %.4f, crossbar test accuracy %.4f",
                float_acc, records[0].test_accuracy)
    run.write_records(("eval",), records)


def do_sweep(run: Run, axes, grid) -> None:
    state = load_quantized(run)
    rows, records = [], []
    for axis in axes:
        values = grid if grid is not None else run.config.faults.grids[axis]
        try:
            recs, summary = sweep(state, run.config, run.data, axis, values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        records += recs
        rows += summary
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "value", "mean", "std", "n"])
    for r in rows:
        w.writerow([r["axis"], r["value"], r["mean"], r["std"], r["n"]])
    name = "sweep.csv" if len(axes) > 1 else f"sweep_{axes[0]}.csv"
    run.path(name).write_text(buf.getvalue())
    run.write_records(tuple(f"sweep:{a}" for a in axes), records)


def do_report(run: Run) -> dict:
    rows = run.read_records()
    if not rows:
        raise DataError(f"{run.path('metrics.jsonl')}: no metrics to report; run a command first")
    last = {}
    for r in rows:
        last[r["stage"]] = r
    summary = {"stages": {k: {"epoch": v["epoch"], "test_accuracy": v["test_accuracy"],
                              "val_accuracy": v["val_accuracy"], "sparsity": v["sparsity"]}
                          for k, v in last.items()}}
    sp = run.path("sparsity.json")
    if sp.exists():
        summary["sparsity"] = json.loads(sp.read_text())
    run.path("report.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"{'stage':<22}{'epoch':>6}{'test acc':>10}{'sparsity %':>12}")
    for k, v in summary["stages"].items():
        acc = "-" if v["test_accuracy"] is None else f"{v['test_accuracy']:.4f}"
        s = "-" if v["sparsity"] is None else f"{v['sparsity']:.2f}"
        print(f"{k:<22}{v['epoch']:>6}{acc:>10}{s:>12}")
    return summary


# --- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.epochs_initial=5")

    parser = _ArgumentParser(prog="prunix", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    sub.add_parser("train", parents=[common], help="initial and regularized training")
    p = sub.add_parser("prune", parents=[common], help="adaptive or global pruning")
    p.add_argument("--lambda-p", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--global", dest="use_global", action="store_true", default=None,
                   help="single-pass global pruning instead of the adaptive loop")
    sub.add_parser("quantize", parents=[common], help="quantize and fine-tune")
    p = sub.add_parser("inject", parents=[common], help="inject crossbar faults and evaluate")
    p.add_argument("--stuck-off", type=float)
    p.add_argument("--drift", type=float)
    p.add_argument("--drift-fraction", type=float)
    p.add_argument("--aging-fraction", type=float)
    p.add_argument("--aging-levels", type=int)
    p.add_argument("--fault-seed", type=int, default=None,
                   help="seed for fault placement (default: --seed)")
    sub.add_parser("eval", parents=[common], help="evaluate the mapped network")
    p = sub.add_parser("sweep", parents=[common], help="bit-width / fault sweeps")
    p.add_argument("--axis", choices=SWEEP_AXES, action="append",
                   help="sweep axis (repeatable; default all)")
    p.add_argument("--grid", type=float, nargs="+", help="grid values (default from config)")
    p.add_argument("--repetitions", type=int)
    sub.add_parser("report", parents=[common], help="summarize metrics into report.json")
    return parser


STICKY_COMMANDS = ("prune", "inject")


def _overrides(args) -> dict:
    """Dotted config overrides: remembered flags, then this command's flags, ``--set`` and ``--seed``."""
    path = args.out / "overrides.json"
    stored = json.loads(path.read_text()) if path.exists() else {}
    flags = _command_flags(args)
    if args.command in STICKY_COMMANDS:
        stored[args.command] = flags
        args.out.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(stored, sort_keys=True, indent=2) + "\n")
    o = {}
    for cmd in STICKY_COMMANDS:
        o.update(stored.get(cmd, {}))
    o.update(flags)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        o[k.strip()] = v.strip()
    if args.seed is not None:
        o["seed"] = args.seed
    return o


def _command_flags(args) -> dict:
    cmd = args.command
    flags = {}
    if cmd == "prune":
        flags = {"prune.lambda_p": args.lambda_p, "prune.mu": args.mu,
                 "prune.sigma": args.sigma, "prune.gamma": args.gamma,
                 "prune.use_global": args.use_global}
    elif cmd == "inject":
        flags = {"faults.stuck_off": args.stuck_off, "faults.drift": args.drift,
                 "faults.drift_fraction": args.drift_fraction,
                 "faults.aging_fraction": args.aging_fraction,
                 "faults.aging_levels": args.aging_levels}
    elif cmd == "sweep":
        flags = {"faults.repetitions": args.repetitions}
    return {k: v for k, v in flags.items() if v is not None}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, _overrides(args))
        run = Run(config, args.out)
        cmd = args.command
        if cmd == "train":
            do_train(run)
        elif cmd == "prune":
            state = do_prune(run)
            _write_sparsity(run, state.report, state.prune_steps)
        elif cmd == "quantize":
            do_quantize(run)
        elif cmd == "inject":
            do_inject(run, config.seed if args.fault_seed is None else args.fault_seed)
        elif cmd == "eval":
            do_eval(run)
        elif cmd == "sweep":
            do_sweep(run, args.axis or list(SWEEP_AXES), args.grid)
        elif cmd == "report":
            do_report(run)
    except ConfigError as exc:
        print(f"prunix: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"prunix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"prunix: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
