"""Command-line entry point: data generation, training stages, evaluations.

Every command resolves one RunConfig (file + ``--set`` overrides), writes
its artifacts under a run directory, and drops the resolved config next to
them. Commands never mutate their inputs; reruns with identical config,
inputs, and seed reproduce byte-identical checkpoints and metric files.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as configmod
from . import evaluation, phantom, trainer
from .diffcore import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    SliceWorldError,
    TrainingAborted,
)
from .metrics import paired_bootstrap
from .model import WorldModel

COMMANDS = ("gen-data", "pretrain", "finetune", "eval-predict", "eval-probes",
            "eval-intervene", "eval-robustness", "eval-significance", "report")


# ---------------------------------------------------------------------------
# Artifact writing
# ---------------------------------------------------------------------------


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, rows, columns):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row.get(col)) for col in columns) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def run_directory(out_flag, command: str, cfg) -> Path:
    root = Path(out_flag or os.environ.get("SLICEWORLD_OUT", "runs"))
    name = cfg.run_name or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    directory = root / name
    directory.mkdir(parents=True, exist_ok=True)
    return directory


# ---------------------------------------------------------------------------
# Shared loading helpers
# ---------------------------------------------------------------------------


def _require(cfg, attr: str):
    value = getattr(cfg, attr)
    if not value:
        raise ConfigError(f"this command needs '{attr}' in the config")
    return value


def _load_examples(cfg, split: str):
    studies = phantom.load_dataset(_require(cfg, "dataset_dir"), split=split)
    if not studies:
        raise ConfigError(f"no '{split}' studies under {cfg.dataset_dir}")
    return trainer.prepare_examples(studies, cfg.arch,
                                    cfg.pretrain.max_seq_len)


def _model_from_checkpoint(cfg) -> WorldModel:
    store, _, _ = load_checkpoint(_require(cfg, "checkpoint"))
    reference = WorldModel.build(cfg.arch, seed=0)
    if store.names() != reference.store.names():
        missing = sorted(set(reference.store.names()) - set(store.names()))
        extra = sorted(set(store.names()) - set(reference.store.names()))
        raise CheckpointError(
            f"checkpoint groups do not match the configured architecture "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name in store.names():
        if store.get(name).shape != reference.store.get(name).shape:
            raise CheckpointError(
                f"group '{name}' has shape {store.get(name).shape}, "
                f"architecture expects {reference.store.get(name).shape}")
    return WorldModel(cfg.arch, store)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _generate_chunk(payload):
    seed, lo, hi, gen_kwargs = payload
    cfg = phantom.GeneratorConfig(**gen_kwargs)
    out = []
    for i in range(lo, hi):
        split = "train" if i < cfg.n_train else "test"
        out.append(phantom.generate_phantom_study(
            phantom.study_seed(seed, i), cfg, study_id=f"study_{i:05d}",
            split=split))
    return out


def cmd_gen_data(cfg, run_dir: Path, jobs: int):
    total = cfg.generator.n_train + cfg.generator.n_test
    if jobs > 1 and total > 16:
        bounds = np.linspace(0, total, jobs * 4 + 1, dtype=int)
        payloads = [(cfg.seed, int(lo), int(hi), vars(cfg.generator).copy())
                    for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with multiprocessing.Pool(jobs) as pool:
            chunks = pool.map(_generate_chunk, payloads)
        studies = [s for chunk in chunks for s in chunk]
    else:
        studies = list(phantom.generate_dataset(cfg.generator, cfg.seed))
    dataset_dir = run_dir / "dataset"
    phantom.save_dataset(dataset_dir, studies, cfg.generator, cfg.seed)
    print(f"wrote {total} studies to {dataset_dir}")
    return 0


def cmd_pretrain(cfg, run_dir: Path):
    examples = _load_examples(cfg, "train")
    model = WorldModel.build(cfg.arch, seed=cfg.pretrain.seed)
    try:
        log = trainer.run_stage(model, examples, cfg.pretrain, cfg.loss)
    except TrainingAborted as exc:
        save_checkpoint(model.store, run_dir / "checkpoint-lastgood",
                        "pretrain", 0)
        print(f"aborted: {exc}; last-good checkpoint saved", file=sys.stderr)
        raise
    write_jsonl(run_dir / "train_log.jsonl", log)
    save_checkpoint(model.store, run_dir / "checkpoint", "pretrain",
                    log[-1]["step"] if log else 0)
    print(f"pretrain done: {len(log)} steps, checkpoint at "
          f"{run_dir / 'checkpoint'}")
    return 0


def cmd_finetune(cfg, run_dir: Path):
    examples = _load_examples(cfg, "train")
    direct = cfg.finetune.ablation == "direct"
    if direct:
        model = WorldModel.build(cfg.arch, seed=cfg.finetune.seed)
        cfg.finetune.frozen = ()
    else:
        model = _model_from_checkpoint(cfg)
    try:
        log = trainer.run_stage(model, examples, cfg.finetune, cfg.loss)
    except TrainingAborted as exc:
        save_checkpoint(model.store, run_dir / "checkpoint-lastgood",
                        "finetune", 0)
        print(f"aborted: {exc}; last-good checkpoint saved", file=sys.stderr)
        raise
    write_jsonl(run_dir / "train_log.jsonl", log)
    save_checkpoint(model.store, run_dir / "checkpoint", "finetune",
                    log[-1]["step"] if log else 0)
    print(f"finetune done: {len(log)} steps, checkpoint at "
          f"{run_dir / 'checkpoint'}")
    return 0


def cmd_eval_predict(cfg, run_dir: Path):
    model = _model_from_checkpoint(cfg)
    examples = _load_examples(cfg, "test")
    records, agg = evaluation.prediction_eval(model, examples, ks=cfg.eval.ks)
    write_jsonl(run_dir / "predict_records.jsonl", records)
    with open(run_dir / "aggregate.json", "w") as fh:
        json.dump(agg, fh, indent=1, sort_keys=True)
        fh.write("\n")
    rows = []
    for key, stats in sorted(agg["horizon"].items()):
        system, k = key.rsplit("_k", 1)
        rows.append({"system": system, "k": int(k), **stats})
    write_csv(run_dir / "horizon_metrics.csv", rows,
              ["system", "k", "mse", "cosine", "n_pairs", "n_skipped"])
    print(f"eval-predict done over {len(records)} studies")
    return 0


def cmd_eval_probes(cfg, run_dir: Path):
    model = _model_from_checkpoint(cfg)
    examples = _load_examples(cfg, "test")
    results = evaluation.probe_battery(model, examples)
    rows = [vars(r) for r in results]
    write_csv(run_dir / "probe_results.csv", rows,
              ["factor", "task", "score", "baseline_score", "skipped"])
    write_jsonl(run_dir / "probe_results.jsonl", rows)
    print(f"eval-probes done: {len(rows)} probes")
    return 0


def cmd_eval_intervene(cfg, run_dir: Path):
    model = _model_from_checkpoint(cfg)
    examples = _load_examples(cfg, "test")
    records, table = evaluation.run_intervention_eval(model, examples,
                                                      modes=cfg.eval.modes)
    write_jsonl(run_dir / "intervention_records.jsonl", records)
    write_csv(run_dir / "intervention_table.csv", table,
              ["group", "mode", "n", "extractor_failures", "target_change_pct",
               "mention_removal_pct", "preservation_pct", "hallucination_pct"])
    print(f"eval-intervene done over {len(records)} records")
    return 0


def cmd_eval_robustness(cfg, run_dir: Path):
    model = _model_from_checkpoint(cfg)
    examples = _load_examples(cfg, "test")
    rows = evaluation.reduced_slice_eval(model, examples,
                                         budgets=cfg.eval.budgets)
    write_csv(run_dir / "robustness.csv", rows,
              ["budget", "n_studies", "bleu1", "nll"])
    print(f"eval-robustness done: {len(rows)} budgets")
    return 0


def cmd_eval_significance(cfg, run_dir: Path):
    if not cfg.eval.sig_file_a or not cfg.eval.sig_file_b:
        raise ConfigError("set eval.sig_file_a and eval.sig_file_b")
    rec_a = {r["study_id"]: r for r in read_jsonl(cfg.eval.sig_file_a)}
    rec_b = {r["study_id"]: r for r in read_jsonl(cfg.eval.sig_file_b)}
    shared = sorted(set(rec_a) & set(rec_b))
    if len(shared) < 2:
        raise ConfigError("need >= 2 paired studies with matching ids")
    key = cfg.eval.sig_metric
    a = np.array([float(rec_a[s][key]) for s in shared])
    b = np.array([float(rec_b[s][key]) for s in shared])
    p = paired_bootstrap(a, b, resamples=cfg.eval.bootstrap_resamples,
                         seed=cfg.seed)
    out = {
        "metric": key,
        "n_studies": len(shared),
        "mean_a": float(a.mean()),
        "mean_b": float(b.mean()),
        "resamples": cfg.eval.bootstrap_resamples,
        "seed": cfg.seed,
        "p_value_b_better": p,
    }
    with open(run_dir / "significance.json", "w") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_report(cfg, run_dir: Path):
    if not cfg.eval.report_from:
        raise ConfigError("set eval.report_from to an eval-predict run dir")
    with open(Path(cfg.eval.report_from) / "aggregate.json") as fh:
        agg = json.load(fh)
    rows = []
    for key, stats in sorted(agg["horizon"].items()):
        system, k = key.rsplit("_k", 1)
        rows.append({"k": int(k), "system": system, "mse": stats["mse"],
                     "cosine": stats["cosine"]})
    rows.sort(key=lambda r: (r["k"], r["system"]))
    write_csv(run_dir / "horizon_curve.csv", rows,
              ["k", "system", "mse", "cosine"])
    made = ["horizon_curve.csv"]
    if cfg.eval.report_probes_from:
        probe_rows = read_jsonl(Path(cfg.eval.report_probes_from)
                                / "probe_results.jsonl")
        write_csv(run_dir / "probe_panels.csv", probe_rows,
                  ["factor", "task", "score", "baseline_score", "skipped"])
        made.append("probe_panels.csv")
    if cfg.eval.render:
        _render_plots(run_dir, rows)
        made.append("horizon_curve.png")
    print(f"report wrote {', '.join(made)}")
    return 0


def _render_plots(run_dir: Path, rows):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    systems = sorted({r["system"] for r in rows})
    for metric, ax in zip(("mse", "cosine"), axes):
        for system in systems:
            pts = sorted((r["k"], r[metric]) for r in rows
                         if r["system"] == system)
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker="o", label=system)
        ax.set_xlabel("horizon k")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(run_dir / "horizon_curve.png", dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sliceworld",
        description="Phantom data, world-model training, and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker-count bound")
        p.add_argument("--out", default=None,
                       help="output root (default $SLICEWORLD_OUT or ./runs)")
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = configmod.resolve(args.config, args.sets, seed=args.seed,
                                jobs=args.jobs)
        run_dir = run_directory(args.out, args.command, cfg)
        configmod.write_config_copy(cfg, run_dir)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, run_dir, cfg.jobs)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, run_dir)
        if args.command == "finetune":
            return cmd_finetune(cfg, run_dir)
        if args.command == "eval-predict":
            return cmd_eval_predict(cfg, run_dir)
        if args.command == "eval-probes":
            return cmd_eval_probes(cfg, run_dir)
        if args.command == "eval-intervene":
            return cmd_eval_intervene(cfg, run_dir)
        if args.command == "eval-robustness":
            return cmd_eval_robustness(cfg, run_dir)
        if args.command == "eval-significance":
            return cmd_eval_significance(cfg, run_dir)
        if args.command == "report":
            return cmd_report(cfg, run_dir)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error[checkpoint]: {exc}", file=sys.stderr)
        return 3
    except SliceWorldError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
