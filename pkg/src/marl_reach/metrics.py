"""Run logging: per-episode curves, per-update stats, manifests and plot tables."""
from __future__ import annotations

import csv
import logging
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from marl_reach import kvfile
from marl_reach.errors import ContractViolation

log = logging.getLogger(__name__)

CURVES_FILE = "curves.csv"
UPDATES_FILE = "updates.csv"
MANIFEST_FILE = "manifest.txt"
DEFAULT_WINDOW = 100


@dataclass(frozen=True)
class EpisodeRecord:
    global_step: int
    agent_id: int
    episode_index: int
    score: float
    length: int
    terminal_reason: str


@dataclass(frozen=True)
class UpdateRecord:
    update: int
    steps: int
    mean_kl: float
    beta: float
    objective: float
    value_loss: float


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class CsvSink:
    """Append-only CSV writer with a fixed header, flushed after every row.

    Opening an existing file keeps its first ``keep_rows`` data rows and drops
    the rest, which lets a resumed run continue from its checkpoint.
    """

    def __init__(self, path, record_type, keep_rows: int | None = None):
        self.path = Path(path)
        self.record_type = record_type
        self.header = [f.name for f in fields(record_type)]
        self.rows = 0
        if keep_rows is not None and self.path.exists():
            lines = self.path.read_text().splitlines(keepends=True)
            if not lines or lines[0].rstrip("\n").split(",") != self.header:
                raise ContractViolation(f"{self.path} has an unexpected header")
            if len(lines) - 1 < keep_rows:
                raise ContractViolation(f"{self.path} has fewer rows than the checkpoint expects")
            self.path.write_text("".join(lines[:keep_rows + 1]))
            self.rows = keep_rows
            self._fh = open(self.path, "a", newline="")
        else:
            self._fh = open(self.path, "w", newline="")
            self._fh.write(",".join(self.header) + "\n")
            self._fh.flush()

    def write(self, record) -> None:
        # I/O errors propagate: losing rows silently is not acceptable
        self._fh.write(",".join(_fmt(v) for v in astuple(record)) + "\n")
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_episode(record: EpisodeRecord, sink: CsvSink) -> None:
    sink.write(record)


def read_records(path, record_type=EpisodeRecord) -> list:
    types = [f.type for f in fields(record_type)]
    conv = {"int": int, "float": float, "str": str}
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != [f.name for f in fields(record_type)]:
            raise ContractViolation(f"{path}: unexpected header {header}")
        for row in reader:
            out.append(record_type(*(conv[t](v) for t, v in zip(types, row))))
    return out


def moving_average(series, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Trailing mean over the last ``min(window, i + 1)`` points."""
    if window < 1:
        raise ContractViolation("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def smoothed_curve(records, window: int = DEFAULT_WINDOW):
    """Episode scores in completion order, smoothed, keyed by global step.

    Several episodes can finish at the same global step; the value after the
    last of them is kept.
    """
    steps = np.array([r.global_step for r in records], dtype=np.int64)
    scores = np.array([r.score for r in records], dtype=np.float64)
    order = np.argsort(steps, kind="stable")
    steps, smooth = steps[order], moving_average(scores[order], window)
    keep = np.r_[steps[1:] != steps[:-1], True] if steps.size else np.zeros(0, bool)
    return steps[keep], smooth[keep]


def _resample(steps, values, grid):
    """Step-function value at each grid point (last value at or before it)."""
    if not len(values):
        return np.full(len(grid), np.nan)
    pos = np.searchsorted(steps, grid, side="right") - 1
    return np.where(pos >= 0, values[np.clip(pos, 0, None)], np.nan)


def _run_grid(manifest: dict, steps: np.ndarray) -> np.ndarray:
    """Update boundaries of a run, or its raw episode-end steps if unknown."""
    spacing = int(manifest.get("rollout_transitions", 0) or 0)
    total = int(manifest.get("steps_done", 0) or 0)
    if spacing > 0 and total >= spacing:
        return np.arange(spacing, total + 1, spacing, dtype=np.int64)
    return steps


def emit_plot_data(runs, out, window: int = DEFAULT_WINDOW) -> list[str]:
    """Write one aligned table: ``step`` plus one smoothed-score column per run.

    Each run's smoothed curve is sampled at its update boundaries.  When runs
    disagree on that grid, all of them are resampled to the coarsest one and a
    warning is logged, returned, and written next to the table.
    """
    runs = [Path(r) for r in runs]
    if not runs:
        raise ContractViolation("no runs given")
    names, curves, grids = [], [], []
    for run in runs:
        manifest = read_manifest(run) if (run / MANIFEST_FILE).exists() else {}
        name = str(manifest.get("scenario", run.name))
        if name in names:
            name = f"{name}@{run.name}"
        names.append(name)
        steps, smooth = smoothed_curve(read_records(run / CURVES_FILE), window)
        curves.append((steps, smooth))
        grids.append(_run_grid(manifest, steps))

    warnings = []
    grid = grids[0]
    if not all(np.array_equal(g, grid) for g in grids):
        grid = min(grids, key=len)
        msg = (f"step grids differ across {len(runs)} runs; resampled to the coarsest grid "
               f"({len(grid)} points)")
        log.warning(msg)
        warnings.append(msg)
    columns = [_resample(s, v, grid) for s, v in curves]

    out = Path(out)
    with open(out, "w", newline="") as fh:
        fh.write(",".join(["step", *names]) + "\n")
        for i, step in enumerate(grid):
            fh.write(",".join([str(int(step)), *(_fmt(c[i]) for c in columns)]) + "\n")
    if warnings:
        with open(out.with_name(out.name + ".warnings"), "w") as fh:
            fh.write("\n".join(warnings) + "\n")
    return warnings


def write_manifest(run_dir, items: dict) -> None:
    kvfile.write(Path(run_dir) / MANIFEST_FILE, items)


def read_manifest(run_dir) -> dict:
    return kvfile.read(Path(run_dir) / MANIFEST_FILE)
