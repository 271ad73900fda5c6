"""Interpretability and consistency metrics across sparsity levels; CSV and plots."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .dissector import DissectionReport


class ComparisonError(ValueError):
    pass


@dataclass
class InterpretabilitySummary:
    fraction_remaining: float
    interpretable_units: int
    unique_concepts: int
    category_counts: dict[str, int]
    accuracy: float
    round: int = 0
    total_units: int = 0


@dataclass
class ConsistencyReport:
    fraction_remaining: float
    retained_fraction: float
    same_concept_fraction: float
    round: int = 0
    original_interpretable: set = field(default_factory=set)
    shared_interpretable: set = field(default_factory=set)
    degenerate: list[str] = field(default_factory=list)


def summarize(
    report: DissectionReport,
    accuracy: float,
    fraction_remaining: float = 1.0,
    round: int = 0,
    categories: Sequence[str] | None = None,
) -> InterpretabilitySummary:
    """Counts over interpretable units; concepts are the distinct best concepts among them."""
    interp = [u for u in report.units if u.interpretable]
    concepts = sorted({u.best_concept for u in interp if u.best_concept is not None})
    counts: dict[str, int] = {c: 0 for c in categories} if categories else {}
    for cid in concepts:
        cat = report.concept_names.get(cid, (None, "unknown"))[1]
        counts[cat] = counts.get(cat, 0) + 1
    return InterpretabilitySummary(
        fraction_remaining, len(interp), len(concepts), counts, accuracy, round, len(report.units)
    )


def _by_identity(report: DissectionReport) -> dict:
    out = {}
    for u in report.units:
        key = (u.layer, u.unit)
        if key in out:
            raise ComparisonError(f"duplicate unit {key}")
        out[key] = u
    return out


def _paired(original: DissectionReport, pruned: DissectionReport):
    a, b = _by_identity(original), _by_identity(pruned)
    if a.keys() != b.keys():
        raise ComparisonError("reports cover different units")
    return a, b


def consistency_retained(original: DissectionReport, pruned: DissectionReport, denominator: str = "original") -> float:
    """Share of originally interpretable units that are interpretable after pruning.

    ``denominator="pruned"`` divides by the pruned network's interpretable
    units instead. 0/0 is 1.
    """
    a, b = _paired(original, pruned)
    ia = {k for k, u in a.items() if u.interpretable}
    ib = {k for k, u in b.items() if u.interpretable}
    if denominator == "original":
        den = len(ia)
    elif denominator == "pruned":
        den = len(ib)
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    return len(ia & ib) / den if den else 1.0


def consistency_same_concept(original: DissectionReport, pruned: DissectionReport) -> float:
    """Among units interpretable in both networks, the share keeping their best concept."""
    a, b = _paired(original, pruned)
    shared = [k for k in a if a[k].interpretable and b[k].interpretable]
    if not shared:
        return 1.0
    return sum(a[k].best_concept == b[k].best_concept for k in shared) / len(shared)


def consistency(original: DissectionReport, pruned: DissectionReport, fraction_remaining: float, round: int = 0) -> ConsistencyReport:
    a, b = _paired(original, pruned)
    ia = {k for k, u in a.items() if u.interpretable}
    shared = {k for k in ia if b[k].interpretable}
    degenerate = []
    if not ia:
        degenerate.append("retained: no interpretable units in the original network")
    if not shared:
        degenerate.append("same_concept: no units interpretable in both networks")
    return ConsistencyReport(
        fraction_remaining,
        consistency_retained(original, pruned),
        consistency_same_concept(original, pruned),
        round,
        ia,
        shared,
        degenerate,
    )


SUMMARY_FILE = "interpretability.csv"
CONSISTENCY_FILE = "consistency.csv"


def write_csv(
    summaries: Sequence[InterpretabilitySummary],
    consistency_reports: Sequence[ConsistencyReport],
    out_dir,
    categories: Sequence[str] | None = None,
) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if categories is None:
        categories = sorted({c for s in summaries for c in s.category_counts})
    p1 = out / SUMMARY_FILE
    with open(p1, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction_remaining", "round", "accuracy", "interpretable_units", "unique_concepts", *categories])
        for s in summaries:
            w.writerow([repr(s.fraction_remaining), s.round, repr(s.accuracy), s.interpretable_units,
                        s.unique_concepts, *(s.category_counts.get(c, 0) for c in categories)])
    p2 = out / CONSISTENCY_FILE
    with open(p2, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction_remaining", "round", "retained_fraction", "same_concept_fraction"])
        for c in consistency_reports:
            w.writerow([repr(c.fraction_remaining), c.round, repr(c.retained_fraction), repr(c.same_concept_fraction)])
    return p1, p2


def read_csv(out_dir) -> tuple[list[InterpretabilitySummary], list[ConsistencyReport]]:
    out = Path(out_dir)
    summaries = []
    with open(out / SUMMARY_FILE, newline="") as fh:
        reader = csv.DictReader(fh)
        cats = reader.fieldnames[5:]
        for row in reader:
            summaries.append(InterpretabilitySummary(
                float(row["fraction_remaining"]), int(row["interpretable_units"]), int(row["unique_concepts"]),
                {c: int(row[c]) for c in cats}, float(row["accuracy"]), int(row["round"]),
            ))
    reports = []
    with open(out / CONSISTENCY_FILE, newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(ConsistencyReport(
                float(row["fraction_remaining"]), float(row["retained_fraction"]),
                float(row["same_concept_fraction"]), int(row["round"]),
            ))
    return summaries, reports


def _axes(ax, title, ylabel):
    ax.set_xscale("log")
    ax.invert_xaxis()
    ax.set_xlabel("fraction of weights remaining")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)


def emit_curves(
    summaries: Sequence[InterpretabilitySummary],
    consistency_reports: Sequence[ConsistencyReport],
    out_dir,
    categories: Sequence[str] | None = None,
    trials: dict[str, tuple[Sequence[InterpretabilitySummary], Sequence[ConsistencyReport]]] | None = None,
) -> list[Path]:
    """Write the tidy CSVs and fig1..fig4 PNGs into ``out_dir``.

    ``trials`` optionally maps a label to (summaries, consistency) so each
    trial is drawn as its own line; otherwise the given lists form one line.
    """
    if not summaries and not trials:
        raise ValueError("need at least one summary")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = list(write_csv(summaries, consistency_reports, out, categories))
    lines = trials or {"trial": (summaries, consistency_reports)}
    meta = {"Software": None}

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (ss, _) in lines.items():
        ax.plot([s.fraction_remaining for s in ss], [100 * s.accuracy for s in ss], "o-", label=label)
    _axes(ax, "Top-1 accuracy", "accuracy (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    written.append(out / "fig1_accuracy.png")
    fig.savefig(written[-1], dpi=100, metadata=meta)
    plt.close(fig)

    fig, axs = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, (ss, _) in lines.items():
        x = [s.fraction_remaining for s in ss]
        axs[0].plot(x, [s.interpretable_units for s in ss], "o-", label=label)
        axs[1].plot(x, [s.unique_concepts for s in ss], "o-", label=label)
    _axes(axs[0], "Interpretable units", "units")
    _axes(axs[1], "Unique concepts", "concepts")
    axs[0].legend(fontsize=7)
    fig.tight_layout()
    written.append(out / "fig2_interpretability.png")
    fig.savefig(written[-1], dpi=100, metadata=meta)
    plt.close(fig)

    ss = list(next(iter(lines.values()))[0])
    cats = list(categories) if categories else sorted({c for s in ss for c in s.category_counts})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = [s.fraction_remaining for s in ss]
    ax.stackplot(x, *[[s.category_counts.get(c, 0) for s in ss] for c in cats], labels=cats)
    _axes(ax, "Concepts by category", "concepts")
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    written.append(out / "fig3_categories.png")
    fig.savefig(written[-1], dpi=100, metadata=meta)
    plt.close(fig)

    fig, axs = plt.subplots(1, 2, figsize=(9, 3.5))
    for label, (_, cs) in lines.items():
        x = [c.fraction_remaining for c in cs]
        axs[0].plot(x, [100 * c.retained_fraction for c in cs], "o-", label=label)
        axs[1].plot(x, [100 * c.same_concept_fraction for c in cs], "o-", label=label)
    _axes(axs[0], "Still interpretable", "% of original interpretable units")
    _axes(axs[1], "Same concept", "% of units interpretable in both")
    axs[0].legend(fontsize=7)
    fig.tight_layout()
    written.append(out / "fig4_consistency.png")
    fig.savefig(written[-1], dpi=100, metadata=meta)
    plt.close(fig)
    return written
