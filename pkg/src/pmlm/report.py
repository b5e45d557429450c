"""Aggregation over finished runs: comparison, curves, summary table.

Readers are strict (a malformed or missing file is an error naming the
path) and writers are deterministic, so re-running a report over the
same runs reproduces its outputs byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .training import METRICS_HEADER

__all__ = [
    "ReportError",
    "RunInfo",
    "build_comparison",
    "build_curves",
    "build_finetune_summary",
    "build_table",
    "read_metrics_csv",
    "read_run_dir",
    "steps_to_threshold",
]

COMPARISON_HEADER = (
    "seed,baseline_mlm_acc,position_mlm_acc,mlm_acc_gap,"
    "baseline_pos_acc,position_pos_acc,"
    "baseline_steps_to_threshold,position_steps_to_threshold,steps_to_threshold_ratio"
)
CURVES_HEADER = "run_id,mode,seed,step,phase,metric,value"
CURVE_METRICS = ("total_loss", "mlm_loss", "pos_loss", "mlm_acc", "pos_acc", "lr")
FINETUNE_SUMMARY_HEADER = (
    "mode,seed,em,f1,probe_standard,probe_straight_through,probe_ratio"
)

# Reference scores from the original full-scale experiments; annotated as
# such wherever printed, since nothing at desk scale reproduces them.
REFERENCE_ROWS = (
    ("baseline-384 (reference)", 87.99),
    ("position-384 (reference)", 88.26),
)
REFERENCE_NOTE = "paper-scale reference, not reproduced"


class ReportError(ValueError):
    """A run directory is missing something the report needs."""


@dataclass
class RunInfo:
    run_id: str
    kind: str  # "pretrain" | "finetune"
    mode: str  # pretrain: baseline/position; finetune: dropout gradient mode
    seed: int
    metrics: list[dict]  # pretrain: metrics.csv rows
    extra: dict  # finetune: final em/f1 + probe numbers


def read_metrics_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ReportError(f"missing metrics file: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ReportError(f"{path}: unexpected metrics header")
    names = METRICS_HEADER.split(",")
    int_cols = {"step", "phase", "tokens_seen", "seed"}
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(names):
            raise ReportError(f"{path}:{ln}: expected {len(names)} columns, got {len(parts)}")
        row = {}
        for name, value in zip(names, parts):
            row[name] = int(value) if name in int_cols else float(value)
        rows.append(row)
    return rows


def read_run_dir(path: str | Path) -> RunInfo:
    path = Path(path)
    meta_path = path / "run.json"
    if not meta_path.exists():
        raise ReportError(f"missing run metadata: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ReportError(f"{meta_path}: invalid JSON ({e})") from e
    kind = meta.get("kind")
    try:
        if kind == "pretrain":
            metrics = read_metrics_csv(path / "metrics.csv")
            if not metrics:
                raise ReportError(f"{path}: metrics.csv has no rows")
            return RunInfo(meta["run_id"], kind, meta["mode"], meta["seed"], metrics, {})
        if kind == "finetune":
            return RunInfo(
                meta["run_id"],
                kind,
                meta["dropout_gradient_mode"],
                meta["seed"],
                [],
                meta,
            )
    except KeyError as e:
        raise ReportError(f"{meta_path}: missing key {e}") from e
    raise ReportError(f"{meta_path}: unknown run kind {kind!r}")


def steps_to_threshold(metrics: list[dict]) -> int:
    """First recorded step whose mlm_acc reaches 90% of the run's final."""
    final = metrics[-1]["mlm_acc"]
    threshold = 0.9 * final
    for row in metrics:
        if row["mlm_acc"] >= threshold:
            return row["step"]
    return metrics[-1]["step"]


def _fmt(x: float) -> str:
    return repr(float(x))


def build_comparison(runs: list[RunInfo]) -> str:
    """Baseline vs position final metrics, matched by seed.

    One row per matched seed; a trailing mean row appears only when more
    than one pair matched. mlm_acc_gap is position minus baseline.
    """
    baseline = {r.seed: r for r in runs if r.kind == "pretrain" and r.mode == "baseline"}
    position = {r.seed: r for r in runs if r.kind == "pretrain" and r.mode == "position"}
    seeds = sorted(set(baseline) & set(position))
    if not seeds:
        raise ReportError("comparison needs at least one baseline/position pair with equal seeds")
    lines = [COMPARISON_HEADER]
    acc_pairs = []
    for seed in seeds:
        b_final = baseline[seed].metrics[-1]
        p_final = position[seed].metrics[-1]
        b_steps = steps_to_threshold(baseline[seed].metrics)
        p_steps = steps_to_threshold(position[seed].metrics)
        row = [
            str(seed),
            _fmt(b_final["mlm_acc"]),
            _fmt(p_final["mlm_acc"]),
            _fmt(p_final["mlm_acc"] - b_final["mlm_acc"]),
            _fmt(b_final["pos_acc"]),
            _fmt(p_final["pos_acc"]),
            str(b_steps),
            str(p_steps),
            _fmt(p_steps / b_steps),
        ]
        lines.append(",".join(row))
        acc_pairs.append((b_final, p_final, b_steps, p_steps))
    if len(seeds) > 1:
        n = len(acc_pairs)
        mean = lambda vals: sum(vals) / n
        row = [
            "mean",
            _fmt(mean([b["mlm_acc"] for b, _, _, _ in acc_pairs])),
            _fmt(mean([p["mlm_acc"] for _, p, _, _ in acc_pairs])),
            _fmt(mean([p["mlm_acc"] - b["mlm_acc"] for b, p, _, _ in acc_pairs])),
            _fmt(mean([b["pos_acc"] for b, _, _, _ in acc_pairs])),
            _fmt(mean([p["pos_acc"] for _, p, _, _ in acc_pairs])),
            _fmt(mean([bs for _, _, bs, _ in acc_pairs])),
            _fmt(mean([ps for _, _, _, ps in acc_pairs])),
            _fmt(mean([ps / bs for _, _, bs, ps in acc_pairs])),
        ]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def build_curves(runs: list[RunInfo]) -> str:
    """Long-format rows, plot-ready: one line per (run, step, metric)."""
    lines = [CURVES_HEADER]
    for run in runs:
        if run.kind != "pretrain":
            continue
        for row in run.metrics:
            for metric in CURVE_METRICS:
                lines.append(
                    f"{run.run_id},{run.mode},{run.seed},{row['step']},{row['phase']},"
                    f"{metric},{_fmt(row[metric])}"
                )
    return "\n".join(lines) + "\n"


def build_finetune_summary(runs: list[RunInfo]) -> str:
    """One row per finetune run: final dev metrics plus the probe numbers."""
    ft = [r for r in runs if r.kind == "finetune"]
    if not ft:
        raise ReportError("no finetune runs given")
    ft.sort(key=lambda r: (r.mode, r.seed))
    lines = [FINETUNE_SUMMARY_HEADER]
    for r in ft:
        probe = r.extra.get("probe", {})
        lines.append(
            ",".join(
                [
                    r.mode,
                    str(r.seed),
                    _fmt(r.extra["final_em"]),
                    _fmt(r.extra["final_f1"]),
                    _fmt(probe.get("standard", float("nan"))),
                    _fmt(probe.get("straight_through", float("nan"))),
                    _fmt(probe.get("ratio", float("nan"))),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def build_table(runs: list[RunInfo]) -> str:
    """Fixed-width summary table, reference rows annotated."""
    rows: list[tuple[str, str, str]] = []
    for name, score in REFERENCE_ROWS:
        rows.append((name, f"{score:.2f}", REFERENCE_NOTE))
    ft = [r for r in runs if r.kind == "finetune"]
    for mode in sorted({r.mode for r in ft}):
        group = [r for r in ft if r.mode == mode]
        f1 = sum(r.extra["final_f1"] for r in group) / len(group)
        rows.append(
            (f"finetune-{mode} (mean of {len(group)})", f"{100.0 * f1:.2f}", "desk-scale synthetic span task")
        )
    pre = [r for r in runs if r.kind == "pretrain"]
    for mode in sorted({r.mode for r in pre}):
        group = [r for r in pre if r.mode == mode]
        acc = sum(r.metrics[-1]["mlm_acc"] for r in group) / len(group)
        rows.append(
            (f"pretrain-{mode} (mean of {len(group)})", f"{100.0 * acc:.2f}", "desk-scale MLM accuracy")
        )
    name_w = max(len(r[0]) for r in rows)
    lines = [f"{'name':<{name_w}}  {'span F1 / acc %':>15}  note"]
    lines.append("-" * (name_w + 2 + 15 + 2 + 34))
    for name, score, note in rows:
        lines.append(f"{name:<{name_w}}  {score:>15}  {note}")
    return "\n".join(lines) + "\n"
