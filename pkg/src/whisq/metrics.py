"""Evaluation harness: MSE, Pearson, Spearman, and tie-corrected
Kendall tau, at clip level and at per-system-mean level, for both MOS
axes.

Degenerate inputs (zero variance, all ties) raise instead of returning
NaN; the report-level evaluator records such cases as warnings so a
single-system manifest still produces a usable report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError

AXES = ("omq", "ta")
LEVELS = ("utterance", "system")
METRICS = ("mse", "lcc", "srcc", "ktau")


def _vec(x, min_len: int):
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < min_len:
        raise MetricError(f"need at least {min_len} values, got {v.size}")
    return v


def mse(pred, truth) -> float:
    p, t = _vec(pred, 1), _vec(truth, 1)
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} vs {t.size}")
    d = p - t
    return float(np.mean(d * d))


def lcc(pred, truth) -> float:
    """Pearson product-moment correlation."""
    p, t = _vec(pred, 2), _vec(truth, 2)
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} vs {t.size}")
    pc = p - p.mean()
    tc = t - t.mean()
    denom = np.sqrt((pc * pc).sum() * (tc * tc).sum())
    if denom == 0.0:
        raise MetricError("zero variance input to correlation")
    return float((pc * tc).sum() / denom)


def _ranks(x: np.ndarray) -> np.ndarray:
    """Average ranks: ties share the mean of the positions they span."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred, truth) -> float:
    """Spearman rank correlation: Pearson over average ranks."""
    p, t = _vec(pred, 2), _vec(truth, 2)
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} vs {t.size}")
    return lcc(_ranks(p), _ranks(t))


def _tie_pairs(x: np.ndarray) -> int:
    _, counts = np.unique(x, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def ktau(pred, truth) -> float:
    """Kendall tau-b: (C - D) / sqrt((n0 - n1) (n0 - n2))."""
    p, t = _vec(pred, 2), _vec(truth, 2)
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} vs {t.size}")
    n = p.size
    dx = np.sign(p[:, None] - p[None, :])
    dy = np.sign(t[:, None] - t[None, :])
    concordance = float((dx * dy).sum()) / 2.0  # C - D over i < j
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(p)
    n2 = _tie_pairs(t)
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0.0:
        raise MetricError("all-tied input to kendall tau")
    return float(concordance / denom)


_METRIC_FNS = {"mse": mse, "lcc": lcc, "srcc": srcc, "ktau": ktau}


def system_aggregate(clip_scores, system_ids):
    """Per-system means of (pred, truth) pairs, ordered by system id."""
    by_system: dict = {}
    for (pred, truth), sid in zip(clip_scores, system_ids):
        by_system.setdefault(sid, []).append((pred, truth))
    out = {}
    for sid in sorted(by_system):
        pair = np.asarray(by_system[sid], dtype=np.float64)
        out[sid] = (float(pair[:, 0].mean()), float(pair[:, 1].mean()))
    return out


@dataclass
class EvalReport:
    """The 16-number report plus counts and degenerate-metric warnings."""

    values: dict = field(default_factory=dict)   # "axis.level.metric" -> float | None
    warnings: list = field(default_factory=list)
    n_utterances: int = 0
    n_systems: int = 0

    def get(self, axis: str, level: str, metric: str):
        return self.values[f"{axis}.{level}.{metric}"]

    def to_dict(self) -> dict:
        out = dict(self.values)
        out["n_utterances"] = self.n_utterances
        out["n_systems"] = self.n_systems
        out["warnings"] = list(self.warnings)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def render_table(self) -> str:
        def cell(axis, level, metric):
            v = self.get(axis, level, metric)
            return "   n/a " if v is None else f"{v:7.4f}"

        header_groups = "".join(f"{lvl.capitalize() + '-level':>34}" for lvl in LEVELS)
        header_cols = "      " + "  ".join(
            " ".join(f"{m.upper():>7}" for m in METRICS) for _ in LEVELS)
        lines = [header_groups, header_cols]
        for axis in AXES:
            row = f"{axis.upper():<6}"
            row += "  ".join(
                " ".join(cell(axis, lvl, m) for m in METRICS) for lvl in LEVELS)
            lines.append(row)
        return "\n".join(lines)


def evaluate(predictions, records) -> EvalReport:
    """Score predictions against records aligned by clip id.

    ``predictions`` maps clip_id to an (omq, ta) pair. System-level
    metrics run on per-system mean vectors; metrics that are undefined
    for the given data (for example correlations with a single system)
    are reported as None with a warning.
    """
    missing = [r.clip_id for r in records if r.clip_id not in predictions]
    if missing:
        raise MetricError(f"predictions missing for clips: {missing[:5]}")
    # canonical order makes the report bit-identical regardless of
    # record order (float reductions are order sensitive)
    records = sorted(records, key=lambda r: r.clip_id)
    report = EvalReport(n_utterances=len(records),
                        n_systems=len({r.system_id for r in records}))
    for ai, axis in enumerate(AXES):
        truth = np.array([r.omq_mos if axis == "omq" else r.ta_mos for r in records])
        pred = np.array([predictions[r.clip_id][ai] for r in records])
        per_system = system_aggregate(
            list(zip(pred, truth)), [r.system_id for r in records])
        sys_pred = np.array([v[0] for v in per_system.values()])
        sys_truth = np.array([v[1] for v in per_system.values()])
        for level, (p, t) in (("utterance", (pred, truth)),
                              ("system", (sys_pred, sys_truth))):
            for metric in METRICS:
                key = f"{axis}.{level}.{metric}"
                try:
                    report.values[key] = _METRIC_FNS[metric](p, t)
                except MetricError as e:
                    report.values[key] = None
                    report.warnings.append(f"{key}: {e}")
    return report
