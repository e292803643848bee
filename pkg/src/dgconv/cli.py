"""Command-line entry point.

    dgconv train   --config run.ini --out runs/a
    dgconv eval    --ckpt runs/a/checkpoint.dgcv --data cifar10:data/cifar-10-batches-bin
    dgconv analyze --ckpt runs/a/checkpoint.dgcv
    dgconv export  --ckpt runs/a/checkpoint.dgcv --out runs/a/model.dgcv
    dgconv verify

Exit codes: 0 success, 1 failed verification, 2 bad input (config, data,
checkpoint or unsupported layer), 3 training diverged.

``DGCONV_NUM_THREADS`` caps the BLAS thread pool.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import complexity as Z
from .checkpoint import load_any, load_checkpoint, save_checkpoint, save_compiled
from .compiler import compile_model, grouped_layers, savings_report
from .config import load_config
from .data import DatasetHandle, load_dataset
from .errors import DGConvError, TrainingDiverged
from .model import build_model
from .trainer import DynamicsLog, evaluate, train

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3
THREADS_ENV = "DGCONV_NUM_THREADS"


def _write_json(path, obj):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def parse_data_spec(spec, model_config, split="test"):
    """``synthetic[:N]``, ``cifar10:PATH`` or ``raw:PATH`` -> :class:`DatasetHandle`."""
    kind, _, rest = spec.partition(":")
    common = dict(num_classes=model_config.num_classes, size=model_config.input_shape[1], augment=False,
                  split=split)
    if kind == "synthetic":
        n = int(rest) if rest else None
        return DatasetHandle(kind="synthetic", subset=n, **common)
    if kind in ("cifar10", "raw") and rest:
        return DatasetHandle(kind=kind, path=rest, **common)
    raise ValueError(f"bad --data spec {spec!r}; expected synthetic[:N], cifar10:PATH or raw:PATH")


def cmd_train(args):
    cfg = load_config(args.config)
    out = args.out or cfg.output_dir
    if not out:
        raise ValueError("no output directory given (--out or [output] dir)")
    os.makedirs(out, exist_ok=True)
    train_ds = load_dataset(cfg.dataset_handle("train"))
    test_ds = load_dataset(cfg.dataset_handle("test"))
    model = build_model(cfg.model, seed=cfg.train.seed)
    budget = Z.ComplexityBudget.for_layers(model.dgconv_layers(), cfg.budget["b"], cfg.budget["alpha"])
    budget_info = {"b": budget.b, "alpha": budget.alpha, "o": budget.o}
    ckpt_path = os.path.join(out, "checkpoint.dgcv")
    metrics = open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8", newline="")
    metrics.write(DynamicsLog.csv_line(DynamicsLog(model.dgconv_names()).header()))

    def on_step(record):
        metrics.write(DynamicsLog.csv_line(DynamicsLog.metrics_row(record)))
        metrics.flush()

    def on_epoch_end(epoch, model, optimizer, log):
        step = log.records[-1].step + 1 if log.records else 0
        save_checkpoint(ckpt_path, model, step, optimizer, budget_info, {"epoch": epoch})
        print(f"epoch {epoch}: loss {log.records[-1].task_loss:.4f} zeta {log.records[-1].zeta}", flush=True)

    t0 = time.perf_counter()
    try:
        result = train(model, train_ds, budget, config=cfg.train, test_dataset=test_ds,
                       on_epoch_end=on_epoch_end, on_step=on_step)
    finally:
        metrics.close()
    _write_text(os.path.join(out, "gates.csv"), result.log.gates_csv())
    m = result.metrics
    summary = {
        "test_accuracy": m.get("test_accuracy"),
        "test_loss": m.get("test_loss"),
        "zeta": m["zeta"],
        "initial_zeta": m["initial_zeta"],
        "o": m["o"],
        "b": budget.b,
        "satisfied": m["satisfied"],
        "groups": dict(zip(model.dgconv_names(), m["groups"])),
        "steps": m["steps"],
        "seconds": time.perf_counter() - t0,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    model, _ = load_any(args.ckpt)
    ds = load_dataset(parse_data_spec(args.data, model.config, args.split))
    res = evaluate(model, ds, return_logits=args.logits is not None)
    if args.logits:
        np.save(args.logits, res.pop("logits"))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def analyze(model, o=None):
    """Per-layer channels, group counts and connections, plus network totals."""
    layers = []
    for name, m in grouped_layers(model):
        layers.append({"name": name, "in_channels": m.in_channels, "out_channels": m.out_channels,
                       "groups": int(m.group_count()), "zeta": int(m.complexity())})
    zeta = sum(l["zeta"] for l in layers)
    report = {"layers": layers, "zeta": zeta, "o": o}
    report["satisfied"] = None if o is None else bool(zeta <= o)
    return report


def cmd_analyze(args):
    model, header = load_any(args.ckpt)
    budget = header.get("budget") or {}
    o = budget.get("o")
    if args.b is not None:
        dense = [Z.layer_channels(m) for _, m in grouped_layers(model)]
        o = Z.budget_from_b(args.b, dense)
    report = analyze(model, o)
    for l in report["layers"]:
        print(f"{l['name']:<12} {l['in_channels']:>5}x{l['out_channels']:<5} G={l['groups']:<4} zeta={l['zeta']}")
    status = "n/a" if o is None else ("satisfied" if report["satisfied"] else "violated")
    print(f"total zeta={report['zeta']} o={o} budget {status}")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "analysis.json")
    _write_json(out, report)
    return EXIT_OK


def cmd_export(args):
    ckpt = load_checkpoint(args.ckpt)
    compiled = compile_model(ckpt.model)
    report = savings_report(compiled, args.baseline_groups)
    save_compiled(args.out, compiled, report, {"source": os.path.basename(args.ckpt), "step": ckpt.step})
    t = report["total"]
    print(f"exported {len(report['layers'])} layers: {t['connections']} of {t['dense_connections']} "
          f"connections (ratio {t['ratio_vs_dense']:.4f})")
    return EXIT_OK


def cmd_verify(args):
    from .verify import run_checks

    results = run_checks(args.check or None)
    failed = [name for name, ok, _, _ in results if not ok]
    if failed:
        print("failed checks: " + ", ".join(failed))
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dgconv", description="Train, inspect and export DGConv networks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or exported model")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="synthetic[:N], cifar10:PATH or raw:PATH")
    e.add_argument("--split", default="test", choices=["train", "test"])
    e.add_argument("--logits", help="save logits to this .npy file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="report learned group structure")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--b", type=float, help="recompute the budget with this scale")
    a.add_argument("--out", help="analysis.json path (default: next to the checkpoint)")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("export", help="lower DGConv layers to group convolutions")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--baseline-groups", type=int, default=32)
    x.set_defaults(func=cmd_export)

    v = sub.add_parser("verify", help="run the oracle suite")
    v.add_argument("--check", action="append", help="run only this check (repeatable)")
    v.set_defaults(func=cmd_verify)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def main(argv=None):
    args = build_parser().parse_args(argv)
    limiter = _thread_limit()
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        print(json.dumps(e.record, sort_keys=True, default=float), file=sys.stderr)
        return EXIT_DIVERGED
    except (DGConvError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
