"""Command-line entry point: ``python -m bottlenecked <command> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import COMMANDS, K_GRID, R_GRID, ConfigError, RunConfig, load_config, merge

log = logging.getLogger("bottlenecked")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config; flags override it")
    common.add_argument("--verbose", action="store_true")
    g = common.add_argument_group("paths")
    g.add_argument("--backbone", help="backbone checkpoint (manifest .json or stem)")
    g.add_argument("--processor", help="Processor checkpoint")
    g.add_argument("--data", help="training traces (JSONL)")
    g.add_argument("--test-data", dest="test_data", help="held-out traces (JSONL)")
    g.add_argument("--out", help="output directory (or file for gen-data)")
    g = common.add_argument_group("processor")
    g.add_argument("--trigger", choices=("newline", "every_R"))
    g.add_argument("--k", type=int)
    g.add_argument("--R", type=int)
    g.add_argument("--d-p", dest="d_p", type=int)
    g = common.add_argument_group("training")
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--schedule", choices=("constant", "warmup_cosine"))
    g.add_argument("--n-layers", dest="n_layers", type=int)
    g.add_argument("--n-heads", dest="n_heads", type=int)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--d-ff", dest="d_ff", type=int)
    g = common.add_argument_group("evaluation")
    g.add_argument("--max-new", dest="max_new", type=int)
    g.add_argument("--limit", type=int)
    g.add_argument("--baseline", choices=("pause", "latent_rollout"))
    g.add_argument("--n-special", dest="n_special", type=int)
    g.add_argument("--grid", type=int, nargs="+")
    g = common.add_argument_group("synthetic task")
    g.add_argument("--n", type=int)
    g.add_argument("--split", choices=("train", "test", "any"))
    g.add_argument("--modulus", type=int)
    g.add_argument("--chain-length", dest="chain_length", type=int)
    g.add_argument("--distractors", type=int)
    g = common.add_argument_group("ib-verify")
    g.add_argument("--trials", type=int)
    g.add_argument("--models", type=int)

    p = argparse.ArgumentParser(prog="bottlenecked", description="Bottlenecked Transformer toolkit")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "train-backbone": "SFT a backbone on traces",
        "train-processor": "train a Processor on a frozen backbone",
        "eval": "greedy pass@1 evaluation",
        "ablate-k": "sweep the reconsolidation budget k",
        "ablate-rsw": "sweep the fixed window R",
        "instrument": "rewrite-magnitude statistics",
        "ib-verify": "exact information-theoretic checks",
        "gen-data": "write synthetic traces",
    }
    for c in COMMANDS:
        sub.add_parser(c, parents=[common], help=helps[c])
    return p


def _task(cfg: RunConfig):
    from ..data import SynthTaskSpec

    return SynthTaskSpec(modulus=cfg.modulus, chain_length=cfg.chain_length,
                         distractors=cfg.distractors, seed=cfg.seeds[0])


def _traces(path, limit=None):
    from ..data import load_traces

    t = load_traces(path)
    return t[:limit] if limit is not None else t


def _train_cfg(cfg: RunConfig, stage: str):
    from ..training import TrainConfig

    return TrainConfig(stage=stage, batch_size=cfg.batch_size, lr=cfg.lr, schedule=cfg.schedule,
                       epochs=cfg.epochs, seed=cfg.seeds[0], k=cfg.k, trigger=cfg.trigger, R=cfg.R)


def _load_backbone(path):
    from .checkpoint import CheckpointError, load_checkpoint

    bb, _, _ = load_checkpoint(path)
    if bb is None:
        raise CheckpointError(f"{path} holds no backbone tensors")
    return bb


def _load_processor(path):
    from .checkpoint import CheckpointError, load_checkpoint

    _, proc, _ = load_checkpoint(path)
    if proc is None:
        raise CheckpointError(f"{path} holds no Processor tensors")
    return proc


def _cmd_gen_data(cfg: RunConfig) -> int:
    from ..data import generate_synthetic, save_traces

    out = Path(cfg.out)
    if out.suffix != ".jsonl":
        out = out / f"{cfg.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_traces(out, generate_synthetic(_task(cfg), cfg.n, cfg.split))
    print(out)
    return 0


def _cmd_train_backbone(cfg: RunConfig) -> int:
    from ..backbone import BackboneConfig, BackboneParams
    from ..training import train_loop

    vocab = _task(cfg).vocab()
    bcfg = BackboneConfig(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, len(vocab))
    params = BackboneParams.init(bcfg, np.random.default_rng(cfg.seeds[0]))
    res = train_loop(_train_cfg(cfg, "sft"), _traces(cfg.data, cfg.limit), params, None, cfg.out,
                     log_every=50)
    print(res.checkpoints[-1])
    return 0


def _cmd_train_processor(cfg: RunConfig) -> int:
    from ..processor import ProcessorConfig, ProcessorParams
    from ..training import heldout_processor_ce, train_loop

    bb = _load_backbone(cfg.backbone)
    data = _traces(cfg.data, cfg.limit)
    test = _traces(cfg.test_data) if cfg.test_data else None
    for seed in cfg.seeds:
        tcfg = _train_cfg(cfg, "processor")
        tcfg.seed = seed
        pcfg = ProcessorConfig(d_p=cfg.d_p, d_ff=2 * cfg.d_p, k=cfg.k)
        proc = ProcessorParams.init(pcfg, bb.config, np.random.default_rng(seed))
        res = train_loop(tcfg, data, bb, proc, Path(cfg.out) / f"seed{seed}", log_every=10)
        msg = {"seed": seed, "checkpoint": str(res.checkpoints[-1])}
        if test is not None:
            msg["heldout_ce"] = heldout_processor_ce(bb, proc, test, tcfg)
            msg["heldout_ce_gate_zero"] = heldout_processor_ce(bb, proc.closed(), test, tcfg)
        print(json.dumps(msg))
    return 0


def _cmd_eval(cfg: RunConfig) -> int:
    from .evaluate import run_eval

    bb = _load_backbone(cfg.backbone)
    proc = _load_processor(cfg.processor) if cfg.processor else None
    test = _traces(cfg.test_data, cfg.limit)
    out = Path(cfg.out)
    res = run_eval(bb, test, _task(cfg).vocab(), proc, cfg.trigger, cfg.k, cfg.R, cfg.max_new,
                   cfg.baseline, cfg.n_special, out / "eval.jsonl")
    print(json.dumps({"n": res.n, "correct": res.correct, "accuracy": res.accuracy}))
    return 0


def _cmd_ablate(cfg: RunConfig, axis: str) -> int:
    from ..processor import ProcessorConfig
    from .sweep import ablation_sweep

    grid = cfg.grid or (K_GRID if axis == "k" else R_GRID)
    bb = _load_backbone(cfg.backbone)
    rows = ablation_sweep(axis, grid, bb, _traces(cfg.data, cfg.limit), _traces(cfg.test_data),
                          _task(cfg).vocab(), _train_cfg(cfg, "processor"),
                          ProcessorConfig(d_p=cfg.d_p, d_ff=2 * cfg.d_p), cfg.seeds, cfg.max_new,
                          cfg.out)
    for r in rows:
        print(json.dumps(r))
    return 0


def _cmd_instrument(cfg: RunConfig) -> int:
    from ..backbone import greedy_generate
    from ..processor import ProcessorHook, save_records
    from .checkpoint import check_compatible
    from .instrument import (measure_rewrite_magnitudes, snapshots_from_records,
                             write_heatmap_csv, write_series_csv)

    bb = _load_backbone(cfg.backbone)
    proc = _load_processor(cfg.processor)
    check_compatible(bb, proc)
    test = _traces(cfg.test_data, cfg.limit if cfg.limit is not None else 1)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(test):
        hook = ProcessorHook(proc, cfg.trigger, cfg.R, cfg.k, snapshot=True)
        greedy_generate(bb, t.prompt, cfg.max_new, [hook])
        save_records(out / f"records_{i}", hook.records)
        stats = measure_rewrite_magnitudes(snapshots_from_records(hook.records))
        write_series_csv(out / f"stats_{i}.csv", stats)
        write_heatmap_csv(out / f"heatmap_{i}.csv", stats)
        print(json.dumps({"example": i, "invocations": hook.count, "zero_norm": stats.zero_norm}))
    return 0


def _cmd_ib_verify(cfg: RunConfig) -> int:
    from ..ib_lab import run_suite, write_report

    report = run_suite(cfg.trials, cfg.models, seed=cfg.seeds[0])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "ib_report.json")
    print(json.dumps({"violations": report["violations"], "report": str(out / "ib_report.json")}))
    return 1 if report["violations"] else 0


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    try:
        file_values = load_config(args.config) if args.config else {}
        file_values.pop("command", None)
        cfg = merge(file_values, flags).validate()
    except (ConfigError, TypeError) as e:
        parser.print_usage(sys.stderr)
        print(f"bottlenecked: error: {e}", file=sys.stderr)
        return 2
    dispatch = {
        "gen-data": _cmd_gen_data,
        "train-backbone": _cmd_train_backbone,
        "train-processor": _cmd_train_processor,
        "eval": _cmd_eval,
        "ablate-k": lambda c: _cmd_ablate(c, "k"),
        "ablate-rsw": lambda c: _cmd_ablate(c, "R"),
        "instrument": _cmd_instrument,
        "ib-verify": _cmd_ib_verify,
    }
    try:
        return dispatch[cfg.command](cfg)
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"bottlenecked: {cfg.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


cli_main = main
