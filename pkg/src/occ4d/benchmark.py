"""Benchmark harness: forecast each clip, query future rays, aggregate."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .clip import SequenceClip
from .config import RunConfig
from .forecasters import Supervision, constant_velocity_poses, run_forecaster
from .io import load_clip
from .metrics import MetricReport, aggregate_reports, evaluate_forecast

logger = logging.getLogger(__name__)


class BenchmarkError(RuntimeError):
    pass


def trim_clip(clip: SequenceClip, frames_in: int, frames_out: int) -> SequenceClip:
    """Keep the last ``frames_in`` past and first ``frames_out`` future frames."""
    return SequenceClip(clip.past_frames[-frames_in:], clip.future_frames[:frames_out], clip.frequency)


def query_poses(clip: SequenceClip, pose_source: str):
    if pose_source == "ground_truth":
        return clip.future_poses
    past = clip.past_frames
    return constant_velocity_poses([f.pose for f in past], [f.timestamp for f in past], clip.future_timestamps)


def forecast_and_evaluate(config: RunConfig, clip: SequenceClip) -> MetricReport:
    clip = trim_clip(clip, config.frames_in, config.frames_out).recentered()
    if not clip.future_frames:
        raise BenchmarkError("clip has no future frames to evaluate against")
    n_future = len(clip.future_frames)
    rays = clip.future_rays(query_poses(clip, config.pose_source))
    # only the oracle mode may see future returns
    source = clip if config.supervision is Supervision.FUTURE_RAYS else clip.history()
    grid, _ = run_forecaster(
        config.forecaster, source, config.bounds, config.voxel_size, n_future, config.fit, config.supervision
    )
    return evaluate_forecast(grid, rays, config.bounds, per_class=config.per_class,
                             confidence_threshold=config.confidence_threshold)


@dataclass
class BenchmarkResult:
    aggregate: Optional[MetricReport]
    per_clip: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def _clip_name(k: int, path) -> str:
    p = Path(path)
    stem = p.parent.name if p.suffix else p.name
    return f"{k:03d}_{stem}"


def run_benchmark(config: RunConfig, clips: Sequence, output_dir, workers: Optional[int] = None) -> BenchmarkResult:
    """Evaluate every clip manifest; write per-clip JSON plus aggregate JSON/CSV.

    Clips run concurrently but results are collected and aggregated in the
    given clip order, so outputs do not depend on the worker count.
    """
    if not clips:
        raise BenchmarkError("no clips given")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or config.workers

    def job(path):
        try:
            return forecast_and_evaluate(config, load_clip(path)), None
        except Exception as e:  # recorded per clip
            logger.warning("clip %s failed: %s", path, e)
            return None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(job, clips))

    res = BenchmarkResult(None)
    for k, (path, (report, err)) in enumerate(zip(clips, results)):
        name = _clip_name(k, path)
        if report is None:
            res.failures[name] = err
            continue
        res.per_clip[name] = report
        (out / f"{name}.json").write_text(report.to_json())
    if res.failures:
        (out / "failures.json").write_text(json.dumps(res.failures, indent=2, sort_keys=True) + "\n")
    if not res.per_clip:
        return res
    res.aggregate = aggregate_reports(list(res.per_clip.values()))
    (out / "aggregate.json").write_text(res.aggregate.to_json())
    write_reports_csv(out / "aggregate.csv", res.per_clip, res.aggregate)
    return res


def write_reports_csv(path, per_clip: dict, aggregate: MetricReport) -> None:
    rows = [(name, r.csv_row()) for name, r in per_clip.items()] + [("aggregate", aggregate.csv_row())]
    keys = []
    for _, row in rows:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip"] + keys)
        for name, row in rows:
            w.writerow([name] + ["" if row.get(k) is None else row.get(k) for k in keys])
