"""Ablation grids over sequence length, feature combinations, residual
ratios, category encoders and temporal components."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .data import PostRecord, prepare_dataset
from .model import ModelConfig
from .train import TrainConfig, evaluate, train

LENGTH_GRID = (1, 4, 8, 16, 32, 64)
RESIDUAL_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
CATEGORY_GRID = ("level1", "level2", "level3", "concat", "sum", "hce")
TEMPORAL_GRID = ("full", "no_lstm", "no_attn")
# all eight on/off combinations of (image, text, category)
FEATURE_GRID = tuple((i, t, c) for i in (False, True)
                     for t in (False, True) for c in (False, True))


@dataclass
class GridPoint:
    config_id: str
    axis: str
    value: str
    overrides: dict


@dataclass
class AblationRow:
    config_id: str
    axis: str
    value: str
    mae: Optional[float]
    src: Optional[float]
    seconds: float
    seed: int
    error: str = ""


def grid_points(axis: str) -> list[GridPoint]:
    if axis == "length":
        return [GridPoint(f"length_l{l}", axis, str(l), {"window_len": l})
                for l in LENGTH_GRID]
    if axis == "features":
        pts = []
        for img, txt, cat in FEATURE_GRID:
            tag = "".join(c for c, on in zip("itc", (img, txt, cat)) if on) or "none"
            pts.append(GridPoint(f"features_{tag}", axis, f"img={img},txt={txt},cat={cat}",
                                 {"use_image": img, "use_text": txt, "use_category": cat}))
        return pts
    if axis == "residual":
        return [GridPoint(f"residual_a{a}_b{b}", axis, f"alpha={a},beta={b}",
                          {"alpha": a, "beta": b})
                for a in RESIDUAL_GRID for b in RESIDUAL_GRID]
    if axis == "category":
        return [GridPoint(f"category_{enc}", axis, enc, {"category_encoder": enc})
                for enc in CATEGORY_GRID]
    if axis == "temporal":
        return [
            GridPoint("temporal_full", axis, "full", {}),
            GridPoint("temporal_no_lstm", axis, "no_lstm", {"use_local_lstm": False}),
            GridPoint("temporal_no_attn", axis, "no_attn", {"use_long_attention": False}),
        ]
    raise ValueError(f"unknown ablation axis {axis!r}")


def _run_point(args) -> AblationRow:
    point, posts, img, txt, base_mcfg, base_tcfg, seed = args
    start = time.perf_counter()
    try:
        mcfg = replace(base_mcfg, **point.overrides)
        tcfg = replace(base_tcfg, seed=seed)
        dataset = prepare_dataset(posts, img, txt, mcfg.window_len)
        mcfg = replace(mcfg, uid_vocab=dataset.stats.uid_vocab)
        result = train(mcfg, tcfg, dataset)
        ev = evaluate(result.params, mcfg, dataset, dataset.test_idx)
        return AblationRow(point.config_id, point.axis, point.value,
                           ev.mae, ev.src, time.perf_counter() - start, seed)
    except Exception as exc:  # a failed row is recorded, not fatal
        return AblationRow(point.config_id, point.axis, point.value,
                           None, None, time.perf_counter() - start, seed,
                           error=f"{type(exc).__name__}: {exc}")


def ablate(points: Sequence[GridPoint], posts: Sequence[PostRecord], img, txt,
           base_mcfg: ModelConfig, base_tcfg: TrainConfig,
           seeds: Sequence[int], jobs: int = 1) -> list[AblationRow]:
    """Train and evaluate every grid point for every seed. Rows come back
    sorted by (config_id, seed). Grid points run independently; ``jobs``
    bounds the worker processes."""
    tasks = [(p, list(posts), img, txt, base_mcfg, base_tcfg, s)
             for p in points for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_point, tasks))
    else:
        rows = [_run_point(t) for t in tasks]
    rows.sort(key=lambda r: (r.config_id, r.seed))
    return rows


def write_report(path, rows: Sequence[AblationRow]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "axis", "value", "mae", "src", "seconds", "seed", "error"])
        for r in rows:
            writer.writerow([
                r.config_id, r.axis, r.value,
                "" if r.mae is None else f"{r.mae:.6f}",
                "" if r.src is None else f"{r.src:.6f}",
                f"{r.seconds:.3f}", r.seed, r.error,
            ])


def read_report(path) -> list[AblationRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(AblationRow(
                rec["config_id"], rec["axis"], rec["value"],
                float(rec["mae"]) if rec["mae"] else None,
                float(rec["src"]) if rec["src"] else None,
                float(rec["seconds"]), int(rec["seed"]), rec["error"],
            ))
    return rows
