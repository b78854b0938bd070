"""Budget (k) and window (R) ablations: one fresh Processor per grid point."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from ..backbone import BackboneParams
from ..data import Trace, Vocab
from ..processor import ProcessorConfig, ProcessorParams
from ..training import TrainConfig, heldout_processor_ce, train_loop
from .evaluate import run_eval

log = logging.getLogger(__name__)

COLUMNS = ["axis", "value", "seed", "task", "status", "heldout_ce", "accuracy", "error"]


def ablation_sweep(
    axis: str,
    grid: Sequence[int],
    backbone: BackboneParams,
    train: Sequence[Trace],
    test: Sequence[Trace],
    vocab: Vocab,
    train_cfg: TrainConfig,
    proc_cfg: ProcessorConfig | None = None,
    seeds: Sequence[int] = (0,),
    max_new: int = 64,
    out_dir=None,
    task: str = "modchain",
) -> list[dict]:
    """Train and evaluate at each grid value; a failing point is recorded
    with ``status="failed"`` and the sweep moves on.

    ``axis="k"`` varies the budget under the configured trigger;
    ``axis="R"`` switches to the every-R trigger and varies the window.
    """
    if axis not in ("k", "R"):
        raise ValueError(f"axis must be 'k' or 'R', got {axis!r}")
    proc_cfg = proc_cfg or ProcessorConfig()
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for value in grid:
        for seed in seeds:
            row = {"axis": axis, "value": value, "seed": seed, "task": task,
                   "status": "ok", "heldout_ce": None, "accuracy": None, "error": ""}
            try:
                over = {"k": value} if axis == "k" else {"trigger": "every_R", "R": value}
                cfg = TrainConfig(**{**train_cfg.__dict__, "stage": "processor", "seed": seed, **over})
                rng = np.random.default_rng(seed)
                proc = ProcessorParams.init(proc_cfg, backbone.config, rng)
                point_dir = out / f"{axis}{value}_seed{seed}" if out is not None else None
                train_loop(cfg, train, backbone, proc, point_dir)
                row["heldout_ce"] = heldout_processor_ce(backbone, proc, test, cfg)
                res = run_eval(backbone, test, vocab, proc, cfg.trigger, cfg.k, cfg.R, max_new)
                row["accuracy"] = res.accuracy
            except Exception as e:  # recorded, sweep continues
                log.warning("grid point %s=%s seed %s failed: %s", axis, value, seed, e)
                row["status"] = "failed"
                row["error"] = f"{type(e).__name__}: {e}"
            rows.append(row)
    if out is not None:
        write_table(out / f"ablate_{axis}.csv", rows)
    return rows


def write_table(path, rows: Sequence[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in COLUMNS})
