"""Evaluation tables, the denoiser-selection policy, and report emission.

Synthetic evaluation scores each denoiser by mean PSNR/SSIM against
clean references under a seeded noise regime. Detection-metric tables
(mAP and friends) enter as versioned fixture rows so the selection
policy is testable without running any detector: a denoiser qualifies
when it strictly beats the "noisy" baseline on at least ``min_improved``
of the rule's metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from m2sdf import imagecore, noisegen
from m2sdf._threads import parallel_map
from m2sdf.denoisers import DenoiserHandle, identity_handle

__all__ = [
    "MetricRow",
    "SelectionRule",
    "evaluate_denoiser",
    "evaluate_table",
    "select_denoisers",
    "emit_report",
    "load_fixture",
    "fixture_path",
    "BASELINE_SUBJECT",
]

BASELINE_SUBJECT = "noisy"

_FIXTURE_DIR = Path(__file__).parent / "fixtures"


@dataclass
class MetricRow:
    """One subject's metric values in one evaluation context."""

    subject: str
    context: str
    metrics: dict[str, float]
    source: str = "computed"  # computed | fixture

    def __post_init__(self) -> None:
        if not self.metrics:
            raise ValueError(f"row {self.subject!r} has no metrics")
        for name, value in self.metrics.items():
            if not name:
                raise ValueError(f"row {self.subject!r} has an empty metric name")
            if not np.isfinite(value):
                raise ValueError(f"row {self.subject!r} metric {name!r} is not finite: {value}")
        if self.source not in ("computed", "fixture"):
            raise ValueError(f"source must be 'computed' or 'fixture', got {self.source!r}")


@dataclass(frozen=True)
class SelectionRule:
    """Qualify subjects that strictly beat the baseline on >= min_improved metrics."""

    min_improved: int
    metric_set: tuple[str, ...] = ("mAP", "mAP@0.5", "mAP@0.75", "AR")

    def __post_init__(self) -> None:
        if not 1 <= self.min_improved <= len(self.metric_set):
            raise ValueError(
                f"min_improved must be in [1, {len(self.metric_set)}], got {self.min_improved}"
            )


def evaluate_denoiser(
    handle: DenoiserHandle,
    clean_set: list[np.ndarray],
    noise: noisegen.NoiseSpec,
    context: str | None = None,
) -> MetricRow:
    """Mean PSNR/SSIM of a denoiser over a seeded synthetic noisy set.

    Image i is corrupted with seed noise.seed + i, denoised, and scored
    against its clean original. An identity handle run through the same
    path yields the noisy baseline row.
    """
    if not clean_set:
        raise ValueError("clean_set is empty")

    def score(item):
        index, clean = item
        noisy = noisegen.apply_noise(clean, noise.with_seed(noise.seed + index))
        try:
            restored = handle.apply(noisy)
        except Exception as exc:
            raise RuntimeError(f"denoiser {handle.name!r} failed on image {index}: {exc}") from exc
        return imagecore.psnr(restored, clean), imagecore.ssim(restored, clean)

    scores = parallel_map(score, enumerate(clean_set))
    psnr_mean = float(np.mean([s[0] for s in scores]))
    ssim_mean = float(np.mean([s[1] for s in scores]))
    ctx = context or f"synthetic/{noisegen.noise_label(noise)}"
    return MetricRow(subject=handle.name, context=ctx, metrics={"psnr": psnr_mean, "ssim": ssim_mean})


def evaluate_table(
    handles: list[DenoiserHandle],
    clean_set: list[np.ndarray],
    noise: noisegen.NoiseSpec,
) -> list[MetricRow]:
    """Rows for every handle plus the "noisy" baseline (identity) row."""
    rows = [evaluate_denoiser(identity_handle(BASELINE_SUBJECT), clean_set, noise)]
    rows.extend(evaluate_denoiser(h, clean_set, noise) for h in handles)
    return rows


def select_denoisers(table: list[MetricRow], rule: SelectionRule) -> list[str]:
    """Names of subjects qualifying under the rule, lexicographically sorted.

    Ties with the baseline never count as improvements; that strictness
    is load-bearing for reproducing published selections.
    """
    baselines = [r for r in table if r.subject == BASELINE_SUBJECT]
    if len(baselines) != 1:
        raise ValueError(f"table must contain exactly one {BASELINE_SUBJECT!r} row, found {len(baselines)}")
    baseline = baselines[0]
    for metric in rule.metric_set:
        if metric not in baseline.metrics:
            raise ValueError(f"baseline row is missing metric {metric!r}")

    selected = []
    for row in table:
        if row.subject == BASELINE_SUBJECT:
            continue
        improved = 0
        for metric in rule.metric_set:
            if metric not in row.metrics:
                raise ValueError(f"row {row.subject!r} is missing metric {metric!r}")
            if row.metrics[metric] > baseline.metrics[metric]:
                improved += 1
        if improved >= rule.min_improved:
            selected.append(row.subject)
    return sorted(selected)


# ----------------------------------------------------------------------
# Reports and fixtures
# ----------------------------------------------------------------------

def _fmt(value: float) -> str:
    return f"{value:.6g}"


def emit_report(rows: list[MetricRow], path, format: str = "csv") -> None:
    """Write rows as CSV or JSON; rewriting the same rows is byte-identical.

    Metric columns appear in first-seen order; values carry 6 significant
    digits with a "." decimal point regardless of locale.
    """
    if not rows:
        raise ValueError("no rows to report")
    if format not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    metric_names: list[str] = []
    for row in rows:
        for name in row.metrics:
            if name not in metric_names:
                metric_names.append(name)

    path = Path(path)
    if format == "csv":
        lines = ["subject,context," + ",".join(metric_names) + ",source"]
        for row in rows:
            values = [_fmt(row.metrics[m]) if m in row.metrics else "" for m in metric_names]
            lines.append(",".join([row.subject, row.context] + values + [row.source]))
        path.write_text("\n".join(lines) + "\n")
    else:
        payload = [
            {
                "subject": row.subject,
                "context": row.context,
                "metrics": {m: float(_fmt(row.metrics[m])) for m in row.metrics},
                "source": row.source,
            }
            for row in rows
        ]
        path.write_text(json.dumps(payload, indent=2) + "\n")


def load_report(path) -> list[MetricRow]:
    """Read back a JSON report written by emit_report."""
    payload = json.loads(Path(path).read_text())
    return [
        MetricRow(subject=r["subject"], context=r["context"], metrics=r["metrics"], source=r["source"])
        for r in payload
    ]


def fixture_path(name: str) -> Path:
    """Path of a packaged fixture table, e.g. "sctd_yolox"."""
    path = _FIXTURE_DIR / (name if name.endswith(".json") else f"{name}.json")
    if not path.exists():
        known = sorted(p.stem for p in _FIXTURE_DIR.glob("*.json"))
        raise FileNotFoundError(f"no packaged fixture {name!r}; known: {known}")
    return path


def load_fixture(path) -> list[MetricRow]:
    """Load a fixture table: {context, metric_names, rows: [{subject, values}]}."""
    data = json.loads(Path(path).read_text())
    names = data["metric_names"]
    rows = []
    for entry in data["rows"]:
        values = entry["values"]
        if len(values) != len(names):
            raise ValueError(f"fixture row {entry['subject']!r} has {len(values)} values, expected {len(names)}")
        rows.append(
            MetricRow(
                subject=entry["subject"],
                context=data["context"],
                metrics=dict(zip(names, [float(v) for v in values])),
                source="fixture",
            )
        )
    return rows
