"""Command-line interface: ``taskcodec <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import costmodel, data as data_mod
from .codec import MultiLevelCodec
from .core import BoundConfig, Segment, parse_levels
from .experiment import task_data, train_codec, train_tasks
from .pipeline import EDGE_LOG_FIELDS, ground_truth_for, read_stream, run_cloud, run_edge, write_stream
from .policy import POLICIES, SWEEP_FIELDS, measure_levels, sweep, sweep_rows
from .tasks import TASK_MODELS
from .training import TrainConfig, train_phase1, train_phase2, train_phase3

log = logging.getLogger("taskcodec")


# -- config helpers -----------------------------------------------------------


def _load_config(path) -> dict:
    if not path:
        return {}
    cfg = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    return cfg


def _parse_weights(text: str | None) -> dict | None:
    if not text:
        return None
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"cannot parse weight {item!r}; expected task=value")
        if key.strip() not in TASK_MODELS:
            raise ValueError(f"unknown task {key.strip()!r} in --weights")
        out[key.strip()] = float(val)
    return out


def _bound_config(args, cfg: dict) -> BoundConfig:
    base = cfg.get("bound", {})
    weights = _parse_weights(args.weights) or base.get("task_weights") or BoundConfig().task_weights
    w0 = args.w0 if args.w0 is not None else base.get("reconstruction_weight", BoundConfig().reconstruction_weight)
    bound = args.bound if args.bound is not None else base.get("upper_bound", BoundConfig().upper_bound)
    return BoundConfig(bound, weights, w0)


def _train_config(args, cfg: dict) -> TrainConfig:
    opts = dict(cfg.get("train", {}))
    for flag, key in (("epochs1", "epochs_phase1"), ("epochs2", "epochs_phase2"), ("epochs3", "epochs_phase3")):
        if getattr(args, flag, None) is not None:
            opts[key] = getattr(args, flag)
    return TrainConfig(**{**opts, "seed": args.seed, "weights": _bound_config(args, cfg)})


def _codec_params(args, cfg: dict) -> dict:
    params = dict(cfg.get("codec", {}))
    if args.levels:
        params["levels"] = tuple(lv.cg for lv in parse_levels(args.levels, params.get("M", 1024)))
    params["seed"] = args.seed
    return params


def _load_segments(path, args, cfg) -> list[Segment]:
    """Segments from a CSV, a JSON manifest, or a dataset ``.npz`` (test split)."""
    p = Path(path)
    M = int(cfg.get("codec", {}).get("M", 1024))
    if p.suffix == ".csv":
        return data_mod.load_csv(p, M, args.sample_rate)
    if p.suffix == ".json":
        return data_mod.load_manifest(p).test
    return data_mod.load_split(p).test


def _load_split(args, cfg):
    if not args.data:
        raise ValueError("--data is required")
    p = Path(args.data)
    return data_mod.load_manifest(p) if p.suffix == ".json" else data_mod.load_split(p)


def _load_tasks(directory) -> dict:
    if not directory:
        raise ValueError("--tasks directory is required")
    tasks = {}
    for tid, cls in TASK_MODELS.items():
        path = Path(directory) / f"{tid}.pt"
        if path.exists():
            tasks[tid] = cls.load(path)
    if not tasks:
        raise ValueError(f"no task checkpoints found in {directory}")
    return tasks


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_csv(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args, cfg):
    params = data_mod.GeneratorParams(**cfg.get("generator", {}))
    split = data_mod.make_synthetic_split(args.n_train, args.n_val, args.n_test, params, args.seed)
    out = _out(args)
    data_mod.save_split(split, out / "dataset.npz")
    manifest = {"dataset": "dataset.npz", "M": params.M, "sample_rate": params.sample_rate, "seed": args.seed,
                "sizes": [len(split.train), len(split.validation), len(split.test)]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {sum(manifest['sizes'])} segments to {out / 'dataset.npz'}")


def cmd_train_tasks(args, cfg):
    split = _load_split(args, cfg)
    tasks = train_tasks(split.train, epochs=args.task_epochs, seed=args.seed)
    out = _out(args)
    for tid, model in tasks.items():
        model.save(out / f"{tid}.pt")
    vdata, _ = task_data(split.validation or split.test)
    if "hr_classify" in tasks and vdata.labels is not None:
        acc = float(np.mean(tasks["hr_classify"].predict(vdata.X) == vdata.labels))
        print(f"hr_classify validation accuracy {acc:.3f}")
    print(f"wrote task checkpoints to {out}")


def cmd_train(args, cfg):
    split = _load_split(args, cfg)
    tcfg = _train_config(args, cfg)
    data, _ = task_data(split.train)
    out = _out(args)
    if args.phase == 1:
        codec = MultiLevelCodec(**{"M": data.X.shape[1], **_codec_params(args, cfg)}).initialize()
        train_phase1(codec, data.X, tcfg)
    else:
        if not args.checkpoint:
            raise ValueError(f"phase {args.phase} needs --checkpoint from phase {args.phase - 1}")
        codec = MultiLevelCodec.load(args.checkpoint)
        tasks = _load_tasks(args.tasks)
        (train_phase2 if args.phase == 2 else train_phase3)(codec, tasks, data, tcfg)
    codec.save(out / f"codec_phase{args.phase}.pt")
    codec.metrics_.to_csv(out / f"metrics_phase{args.phase}.csv")
    print(f"wrote {out / f'codec_phase{args.phase}.pt'}")


def cmd_compress(args, cfg):
    if not (args.data and args.checkpoint):
        raise ValueError("compress needs --data and --checkpoint")
    codec = MultiLevelCodec.load(args.checkpoint)
    segments = _load_segments(args.data, args, cfg)
    bound = _bound_config(args, cfg).upper_bound
    edge = run_edge(segments, codec, bound)
    out = _out(args)
    n = write_stream(edge.wire, out / "records.ddc")
    _write_csv(out / "edge_log.csv", edge.log, EDGE_LOG_FIELDS)
    print(f"{len(edge.log)} segments, {n} bytes, average CG {edge.avg_cg:.2f}")


def cmd_decompress(args, cfg):
    if not (args.data and args.checkpoint):
        raise ValueError("decompress needs --data (a records file) and --checkpoint")
    codec = MultiLevelCodec.load(args.checkpoint)
    records = read_stream(Path(args.data).read_bytes())
    out = _out(args)
    with open(out / "reconstructed.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for rec in records:
            w.writerow([rec.segment_id, rec.cg, *codec.decode_record(rec).astype(np.float32).tolist()])
    print(f"decoded {len(records)} segments to {out / 'reconstructed.csv'}")


def _ensure_models(args, cfg, split, out: Path):
    """Load task/codec checkpoints when given, otherwise train and save them."""
    if args.tasks:
        tasks = _load_tasks(args.tasks)
    else:
        tasks = train_tasks(split.train, epochs=args.task_epochs, seed=args.seed)
        for tid, m in tasks.items():
            m.save(out / f"{tid}.pt")
    if args.checkpoint:
        codec = MultiLevelCodec.load(args.checkpoint)
    else:
        codec = MultiLevelCodec(**{"M": split.train[0].M, **_codec_params(args, cfg)})
        codec = train_codec(split.train, tasks, _train_config(args, cfg), codec).final
        codec.save(out / "codec.pt")
    return tasks, codec


def _split_for_run(args, cfg):
    if args.data:
        return _load_split(args, cfg)
    params = data_mod.GeneratorParams(**cfg.get("generator", {}))
    return data_mod.make_synthetic_split(args.n_train, args.n_val, args.n_test, params, args.seed)


def cmd_run(args, cfg):
    out = _out(args)
    split = _split_for_run(args, cfg)
    tasks, codec = _ensure_models(args, cfg, split, out)
    bcfg = _bound_config(args, cfg)
    edge = run_edge(split.test, codec, bcfg.upper_bound)
    write_stream(edge.wire, out / "records.ddc")
    _write_csv(out / "edge_log.csv", edge.log, EDGE_LOG_FIELDS)
    report, rows = run_cloud(edge.wire, codec, tasks, ground_truth_for(split.test), bcfg.upper_bound, bcfg)
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "cloud_rows.csv", rows, sorted({k for r in rows for k in r}))
    manifest = {
        "bound": bcfg.upper_bound,
        "seed": args.seed,
        "levels": [lv.cg for lv in codec.level_specs_],
        "task_weights": bcfg.task_weights,
        "reconstruction_weight": bcfg.reconstruction_weight,
        "n_test": len(split.test),
        "checkpoints": {p.name: _sha256(p) for p in sorted(out.glob("*.pt"))},
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"avg CG {report.avg_cg:.2f}, effective loss {report.effective_loss:.4f}, "
          f"violation rate {report.violation_rate:.3f}, macro F1 {report.macro_f1}")


def cmd_sweep(args, cfg):
    out = _out(args)
    split = _split_for_run(args, cfg)
    tasks, codec = _ensure_models(args, cfg, split, out)
    bcfg = _bound_config(args, cfg)
    bounds = sorted(float(b) for b in args.bounds.split(","))
    data, ids = task_data(split.test)
    table = measure_levels(codec, tasks, data, ids, bcfg)
    kinds = POLICIES if args.policy == "all" else (args.policy,)
    rows = [row for kind in kinds for row in sweep_rows(sweep(bounds, table, kind))]
    _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    for r in rows:
        print(f"{r['policy']:8s} bound={r['bound']:<6g} avg_cg={r['avg_cg']:.2f} "
              f"eff_loss={r['effective_loss']:.4f} viol={r['violation_rate']:.3f}")


def cmd_cost(args, cfg):
    section = cfg.get("cost", cfg if "cost" not in cfg else {})
    known = {f.name for f in fields(costmodel.CostParams)}
    params = costmodel.CostParams(**{k: v for k, v in section.items() if k in known})
    unknown = set(section) - known - {"codec", "train", "bound", "generator"}
    if unknown:
        raise ValueError(f"unknown cost parameter(s) {sorted(unknown)}")
    breakdowns = costmodel.all_models(params)
    costmodel.write_breakdowns(breakdowns, _out(args))
    base = breakdowns[0].total
    for b in breakdowns:
        print(f"{b.model:32s} storage={b.storage_cost:10.2f} compute={b.compute_cost:10.2f} "
              f"total={b.total:10.2f} ({100 * (1 - b.total / base):5.1f}% saved)")


def cmd_report(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out(args)
    split = _split_for_run(args, cfg)
    tasks, codec = _ensure_models(args, cfg, split, out)
    bcfg = _bound_config(args, cfg)
    bounds = sorted(float(b) for b in args.bounds.split(","))
    data, ids = task_data(split.test)
    table = measure_levels(codec, tasks, data, ids, bcfg)
    results = {kind: sweep(bounds, table, kind) for kind in POLICIES}
    rows = [row for kind in POLICIES for row in sweep_rows(results[kind])]
    _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)

    summary = {kind: [r.to_dict() for _, r in res] for kind, res in results.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for metric, fname in (("avg_cg", "cg_vs_bound.png"), ("effective_loss", "loss_vs_bound.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for kind, res in results.items():
            ax.plot([b for b, _ in res], [getattr(r, metric) for _, r in res], marker="o", label=kind)
        ax.set_xlabel("upper bound")
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / fname)
        plt.close(fig)
    if "hr_classify" in tasks:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        gains = sorted(table.task_losses, reverse=True)
        ax.boxplot([table.task_losses[g]["hr_classify"] for g in gains], showfliers=False)
        ax.set_xticks(range(1, len(gains) + 1), [f"CG{g}" if g > 1 else "none" for g in gains])
        ax.set_ylabel("CCE")
        fig.tight_layout()
        fig.savefig(out / "cce_boxplot.png")
        plt.close(fig)
    print(f"wrote report to {out}")


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out")
    common.add_argument("--config", help="YAML/JSON with codec/train/bound/generator/cost sections")
    common.add_argument("--data", help="dataset .npz, manifest .json, CSV, or records file")
    common.add_argument("--checkpoint", help="codec checkpoint")
    common.add_argument("--tasks", help="directory with task checkpoints")
    common.add_argument("--bound", type=float)
    common.add_argument("--levels", help="comma-separated gains, e.g. 64,32,1")
    common.add_argument("--w0", type=float, help="reconstruction weight")
    common.add_argument("--weights", help="task weights, e.g. hr_classify=1,rr_peaks=1")
    common.add_argument("--sample-rate", type=float, default=data_mod.DEFAULT_SAMPLE_RATE)
    common.add_argument("-v", "--verbose", action="store_true")

    sizes = argparse.ArgumentParser(add_help=False)
    sizes.add_argument("--n-train", type=int, default=2000)
    sizes.add_argument("--n-val", type=int, default=200)
    sizes.add_argument("--n-test", type=int, default=200)

    epochs = argparse.ArgumentParser(add_help=False)
    epochs.add_argument("--task-epochs", type=int, default=30)
    epochs.add_argument("--epochs1", type=int)
    epochs.add_argument("--epochs2", type=int)
    epochs.add_argument("--epochs3", type=int)

    parser = argparse.ArgumentParser(prog="taskcodec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common, sizes], help="generate a synthetic dataset").set_defaults(
        func=cmd_gen_data)
    sub.add_parser("train-tasks", parents=[common, epochs], help="train and freeze task models").set_defaults(
        func=cmd_train_tasks)
    p = sub.add_parser("train", parents=[common, epochs], help="run one codec training phase")
    p.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    p.set_defaults(func=cmd_train)
    sub.add_parser("compress", parents=[common], help="edge side: encode, select, serialize").set_defaults(
        func=cmd_compress)
    sub.add_parser("decompress", parents=[common], help="decode a records file").set_defaults(
        func=cmd_decompress)
    sub.add_parser("run", parents=[common, sizes, epochs], help="end-to-end edge/cloud run").set_defaults(
        func=cmd_run)
    for name, func, text in (("sweep", cmd_sweep, "bound sweep over a policy"),
                             ("report", cmd_report, "sweep tables, summary and figures")):
        p = sub.add_parser(name, parents=[common, sizes, epochs], help=text)
        p.add_argument("--bounds", default="0.1,0.3,0.5,0.75,1.0")
        if name == "sweep":
            p.add_argument("--policy", choices=(*POLICIES, "all"), default="dynamic")
        p.set_defaults(func=func)
    sub.add_parser("cost", parents=[common], help="yearly cloud-cost comparison").set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _load_config(args.config))
    except (ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"taskcodec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
