"""Static SVG figures rendered from an evaluation report directory.

Inputs are the files written by ``EvalReport.write``: ``report.json``, the
per-(system, keyword) ROC CSVs under ``roc/`` and, when present,
``distribution.csv``. Each figure gets a CSV next to it holding exactly
the plotted data.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MissingInput  # noqa: E402
from .evaluate import slug  # noqa: E402

ROC_SYSTEMS = ("dtw-ks", "cnn-dtw")
# fixed metadata keeps the SVG bytes stable across runs
_SVG_META = {"Date": None, "Creator": None}


def _read_roc(path: Path) -> tuple[list[float], list[float]]:
    with path.open() as f:
        rows = list(csv.DictReader(f))
    return [float(r["fpr"]) for r in rows], [float(r["tpr"]) for r in rows]


def _save(fig, path: Path) -> None:
    plt.rcParams["svg.hashsalt"] = "cnndtw"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def load_report(report_dir: str | Path) -> dict:
    path = Path(report_dir) / "report.json"
    if not path.is_file():
        raise MissingInput(f"no evaluation report at {path}")
    return json.loads(path.read_text())


def _distribution(report_dir: Path, report: dict, keywords: Sequence[str]) -> tuple[list[str], dict[str, list[int]]]:
    path = report_dir / "distribution.csv"
    if path.is_file():
        with path.open() as f:
            rows = list(csv.reader(f))
        splits = rows[0][1:]
        counts = {r[0]: [int(c) for c in r[1:]] for r in rows[1:]}
        return splits, {k: counts.get(k, [0] * len(splits)) for k in keywords}
    # fall back to the evaluated split's positives
    system = next(iter(report["systems"].values()))
    return ["test"], {k: [system["keywords"].get(k, {}).get("positives", 0)] for k in keywords}


def emit_plots(report_dir: str | Path, out_dir: str | Path | None = None,
               systems: Sequence[str] = ROC_SYSTEMS) -> list[Path]:
    """Per-keyword ROC overlays plus a keyword-distribution bar chart.

    Args:
        report_dir: directory holding ``report.json`` and ``roc/``.
        out_dir: destination, ``report_dir/plots`` by default.
        systems: systems overlaid on each ROC plot; missing ones are left out.

    Returns:
        Paths of every written SVG and CSV.

    Raises:
        MissingInput: no report, no evaluated keywords, or no ROC data for a keyword.
    """
    report_dir = Path(report_dir)
    report = load_report(report_dir)
    present = [s for s in systems if s in report.get("systems", {})]
    keywords: list[str] = []
    for s in present or report.get("systems", {}):
        keywords += [k for k in report["systems"][s]["keywords"] if k not in keywords]
    if not keywords:
        raise MissingInput("report lists no evaluated keywords")
    out = Path(out_dir) if out_dir is not None else report_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    for kw in keywords:
        curves = {}
        for s in present:
            p = report_dir / "roc" / f"{slug(s)}__{slug(kw)}.csv"
            if p.is_file():
                curves[s] = _read_roc(p)
        if not curves:
            raise MissingInput(f"no ROC data for keyword {kw!r}")
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls=":")
        for s, (fpr, tpr) in curves.items():
            auc = report["systems"][s]["keywords"].get(kw, {}).get("auc", float("nan"))
            ax.plot(fpr, tpr, lw=1.2, label=f"{s} (AUC {auc:.3f})")
        ax.set(xlim=(0, 1), ylim=(0, 1), xlabel="false positive rate", ylabel="true positive rate", title=kw)
        ax.legend(loc="lower right", fontsize=8)
        fig.tight_layout()
        base = out / f"roc__{slug(kw)}"
        _save(fig, base.with_suffix(".svg"))
        with base.with_suffix(".csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["system", "fpr", "tpr"])
            for s, (fpr, tpr) in curves.items():
                w.writerows([s, repr(a), repr(b)] for a, b in zip(fpr, tpr))
        written += [base.with_suffix(".svg"), base.with_suffix(".csv")]

    splits, counts = _distribution(report_dir, report, keywords)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(keywords) + 2), 3.5))
    width = 0.8 / len(splits)
    for i, split in enumerate(splits):
        xs = [j + (i - (len(splits) - 1) / 2) * width for j in range(len(keywords))]
        ax.bar(xs, [counts[k][i] for k in keywords], width=width, label=split)
    ax.set_xticks(range(len(keywords)), keywords, rotation=90 if len(keywords) > 10 else 0, fontsize=8)
    ax.set(ylabel="utterances containing keyword", title="keyword occurrences")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out / "keyword_distribution.svg")
    with (out / "keyword_distribution.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["keyword", *splits])
        w.writerows([k, *counts[k]] for k in keywords)
    written += [out / "keyword_distribution.svg", out / "keyword_distribution.csv"]
    return written
