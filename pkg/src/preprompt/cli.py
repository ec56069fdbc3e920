"""Command-line entry point: pretrain, run, ablate, report, export-embeddings.

Artifact paths derive from the config plus the seed, so re-running a command
with identical inputs rewrites identical files. Flags override config-file
values (flags > file > defaults). Log verbosity comes from PREPROMPT_LOG
(error | info | debug).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .backbone import load_backbone, pretrain_and_freeze, save_backbone
from .config import RunConfig, apply_overrides, parse_config
from .errors import ConfigError
from .harness import (ablation_suite, complexity_accounting, make_learner,
                      mean_std_table, read_summary_csv, run_scenario,
                      summary_row, write_json_report, write_matrix_csv,
                      write_summary_csv)

log = logging.getLogger("preprompt.cli")

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("PREPROMPT_LOG", "info"),
                                         logging.INFO)
    logging.basicConfig(
        level=level, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s %(message)s")


def _load_config(args) -> RunConfig:
    with open(args.config, "rb") as fh:
        raw = tomllib.load(fh)
    apply_overrides(raw, args.set or [])
    return parse_config(raw)


def _backbone_path(cfg: RunConfig, args) -> Path:
    if getattr(args, "backbone", None):
        return Path(args.backbone)
    return Path(cfg.output_dir) / "backbone.ppvt"


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _backbone_path(cfg, args)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = cfg.pretrain_dataset()
    params, train_acc = pretrain_and_freeze(
        dataset.images, dataset.labels, cfg.backbone,
        epochs=cfg.pretrain.epochs, seed=cfg.pretrain.seed,
        learning_rate=cfg.pretrain.learning_rate,
        batch_size=cfg.pretrain.batch_size)
    save_backbone(params, out)
    log.info("wrote backbone checkpoint %s (head train accuracy %.4f)",
             out, train_acc)
    return 0


_METHOD_FLAGS = {
    "preprompt": dict(use_prompt_stage=True, translate_prompt_stage=True,
                      translate_label_stage=True),
    "finetune": dict(use_prompt_stage=False, translate_prompt_stage=False,
                     translate_label_stage=False),
    "kv-correlation": dict(use_prompt_stage=True, translate_prompt_stage=True,
                           translate_label_stage=True),
}


def cmd_run(args) -> int:
    cfg = _load_config(args)
    backbone = load_backbone(_backbone_path(cfg, args))
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    method = args.method
    pipe_cfg = cfg.pipeline_config(**_METHOD_FLAGS[method])
    seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds
             else cfg.scenario.seeds)

    if method == "finetune":
        report = complexity_accounting("finetune")
    else:
        report = complexity_accounting(method, custom={
            "layers": len(cfg.prompted_layers), "tasks": cfg.scenario.tasks,
            "prompt_len": cfg.prompt_len, "embed_dim": cfg.backbone.embed_dim,
            "mode": cfg.prompt_mode,
            "n_classes": cfg.scenario.tasks * (cfg.scenario.classes_per_task or 0)
            or _scenario_class_count(cfg)})

    results, summaries = [], []
    failed = False
    for seed in seeds:
        scenario = cfg.make_scenario(seed)
        learner = make_learner(method, backbone, pipe_cfg, seed)
        result = run_scenario(scenario, learner, eval_seed=seed,
                              method=method, seed=seed)
        results.append(result)
        if not result.matrix.valid:
            log.error("run failed for seed %d: %s", seed, result.error)
            failed = True
            continue
        summaries.append(summary_row(result, report))
        checkpoint.save_state(learner, outdir / f"state_{method}_seed{seed}.ppck")

    write_matrix_csv(outdir / f"matrix_{method}.csv", results)
    write_summary_csv(outdir / f"summary_{method}.csv", summaries)
    write_json_report(outdir / f"report_{method}.json", results, summaries,
                      [report])
    log.info("wrote results for %s under %s", method, outdir)
    return 1 if failed else 0


def _scenario_class_count(cfg: RunConfig) -> int:
    if cfg.scenario.source == "synthetic":
        return cfg.scenario.synthetic["classes"]
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    backbone = load_backbone(_backbone_path(cfg, args))
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.scenario.seeds[0]
    scenario = cfg.make_scenario(seed)
    rows = ablation_suite(scenario, backbone, cfg.pipeline_config(), seed)
    path = outdir / "ablation.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "P_pred", "P_ft", "L_ft", "A_T", "A_bar", "F_T"])
        for row in rows:
            writer.writerow([row.index, int(row.p_pred), int(row.p_ft),
                             int(row.l_ft), repr(row.a_t), repr(row.a_bar),
                             repr(row.f_t)])
    with open(outdir / "ablation.json", "w") as fh:
        json.dump([{"row": r.index, "P_pred": r.p_pred, "P_ft": r.p_ft,
                    "L_ft": r.l_ft, "A_T": r.a_t, "A_bar": r.a_bar,
                    "F_T": r.f_t} for r in rows], fh, indent=2)
    log.info("wrote ablation table %s", path)
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.summaries:
        rows.extend(read_summary_csv(path))
    table = mean_std_table(rows)
    reports = [complexity_accounting(m) for m in
               ("finetune", "l2p", "dualprompt", "sprompt++", "coda-prompt",
                "hide-prompt", "preprompt")]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seeds", "A_T", "A_bar", "F_T"])
        for entry in table:
            writer.writerow([entry["method"], entry["seeds"], entry["A_T"],
                             entry["A_bar"], entry["F_T"]])
    with open(outdir / "report.json", "w") as fh:
        json.dump({"aggregate": table,
                   "complexity": [{"method": r.method,
                                   "trainable_params": r.trainable_params,
                                   "stored_params": r.stored_params,
                                   "delta_M_mb": r.delta_m_mb,
                                   "note": r.note} for r in reports]},
                  fh, indent=2)
    for entry in table:
        print(f"{entry['method']}: A_T={entry['A_T']} A_bar={entry['A_bar']} "
              f"F_T={entry['F_T']} (n={entry['seeds']})")
    for r in reports:
        print(f"{r.method}: dP={r.trainable_params} stored={r.stored_params} "
              f"dM={r.delta_m_mb} MB")
    return 0


def cmd_export_embeddings(args) -> int:
    from .data import export_embeddings
    cfg = _load_config(args)
    backbone = load_backbone(_backbone_path(cfg, args))
    learner = checkpoint.load_state(args.state, backbone, cfg.pipeline_config())
    _, test_set = cfg.scenario_datasets()
    learned = set()
    for task in range(learner.layout.n_tasks):
        learned.update(learner.layout.class_order[i]
                       for i in learner.layout.task_slice(task))
    keep = np.flatnonzero(np.isin(test_set.labels, sorted(learned)))
    export_embeddings(learner, test_set.subset(keep), args.out)
    log.info("wrote embeddings %s", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="preprompt",
        description="Desk-scale class-incremental learning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", "-c", required=True, help="TOML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value (dotted path)")
        p.add_argument("--backbone", help="backbone checkpoint path")

    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run a scenario for one method")
    common(p)
    p.add_argument("--method", choices=sorted(_METHOD_FLAGS), default="preprompt")
    p.add_argument("--seeds", help="comma-separated seed list override")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the six-row component ablation")
    common(p)
    p.add_argument("--seed", type=int, help="scenario seed (default: first)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate summaries into mean±std tables")
    p.add_argument("summaries", nargs="+", help="summary CSV files")
    p.add_argument("--out", default="results", help="output directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-embeddings", help="export prompted features as CSV")
    common(p)
    p.add_argument("--state", required=True, help="scenario state checkpoint")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("failed: %s", exc, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
