"""Utterance-level detection metrics: ROC, AUC, EER, confusion counts, timing.

Conventions:
    * an utterance is predicted positive for a keyword when its score is
      ``>= threshold``;
    * ROC points are taken at every distinct score (plus a leading +inf
      threshold for the origin); AUC is the trapezoidal area, which equals
      the Mann-Whitney statistic with ties counted 1/2;
    * EER is linearly interpolated where FPR = 1 - TPR along the curve; the
      reported EER threshold is the score at the nearer ROC vertex.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DegenerateLabels, MissingInput
from .features import FeatureArchive, FeatureSequence
from .tables import KeywordTable

logger = logging.getLogger(__name__)


@dataclass
class GroundTruth:
    """Which keywords are present in each utterance. Evaluation only."""

    keyword_ids: list[str]
    present: dict[str, set[str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.keyword_ids)
        for uid, kws in self.present.items():
            unknown = set(kws) - known
            if unknown:
                raise ConfigError(f"utterance {uid!r} lists unknown keywords {sorted(unknown)}")

    def labels(self, keyword_id: str, utterance_ids: Sequence[str]) -> np.ndarray:
        return np.array([keyword_id in self.present.get(u, ()) for u in utterance_ids], dtype=bool)

    @property
    def utterance_ids(self) -> list[str]:
        return list(self.present)

    def write(self, path: str | Path) -> None:
        lines = [f"# keywords={','.join(self.keyword_ids)}"]
        for k in sorted(self.meta):
            lines.append(f"# {k}={self.meta[k]}")
        for uid, kws in self.present.items():
            lines.append(f"{uid}\t{','.join(k for k in self.keyword_ids if k in kws)}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path, keyword_ids: Sequence[str] | None = None) -> "GroundTruth":
        """Parse ``utterance_id<TAB>kw1,kw2`` lines; ``#`` lines carry metadata."""
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"ground truth file not found: {path}")
        present: dict[str, set[str]] = {}
        meta: dict[str, str] = {}
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            uid, _, rest = line.partition("\t")
            present[uid.strip()] = {k.strip() for k in rest.split(",") if k.strip()}
        kws = list(keyword_ids) if keyword_ids is not None else [k for k in meta.pop("keywords", "").split(",") if k]
        meta.pop("keywords", None)
        if not kws:
            kws = sorted(set().union(*present.values())) if present else []
        return cls(kws, present, meta)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    eer: float
    eer_threshold: float

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int


def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    return s, y


def compute_roc(scores, labels) -> RocCurve:
    s, y = _check_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    fpr = np.r_[0.0, fp[ends] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    gap = fpr + tpr - 1.0  # fpr - fnr, rises from -1 to +1
    i = int(np.argmax(gap >= 0.0))
    if gap[i] == 0.0:
        eer, thr_idx = float(fpr[i]), i
    else:
        t = -gap[i - 1] / (gap[i] - gap[i - 1])
        eer = float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))
        thr_idx = i - 1 if t <= 0.5 else i
    if thr_idx == 0:
        thr_idx = 1
    return RocCurve(thresholds, fpr, tpr, auc, eer, float(thresholds[thr_idx]))


def mann_whitney_auc(scores, labels) -> float:
    """O(n_pos * n_neg) pair counting with ties worth 1/2."""
    s, y = _check_labels(scores, labels)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateLabels("need both classes")
    total = 0.0
    for p in pos:
        total += float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg))
    return total / (pos.size * neg.size)


def confusion_at(scores, labels, threshold: float) -> Confusion:
    s, y = _check_labels(scores, labels)
    pred = s >= threshold
    return Confusion(int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y)))


def macro_average(curves: Iterable[RocCurve]) -> tuple[float, float]:
    curves = list(curves)
    if not curves:
        raise ValueError("macro average needs at least one keyword")
    return float(np.mean([c.auc for c in curves])), float(np.mean([c.eer for c in curves]))


@dataclass
class KeywordResult:
    keyword_id: str
    roc: RocCurve
    confusion: Confusion
    n_pos: int
    n_neg: int


@dataclass
class SystemReport:
    system: str
    keywords: list[KeywordResult]
    macro_auc: float
    macro_eer: float
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "macro_auc": self.macro_auc,
            "macro_eer": self.macro_eer,
            "skipped_keywords": self.skipped,
            "keywords": {
                r.keyword_id: {
                    "auc": r.roc.auc,
                    "eer": r.roc.eer,
                    "eer_threshold": r.roc.eer_threshold,
                    "positives": r.n_pos,
                    "negatives": r.n_neg,
                    "confusion_at_eer": r.confusion._asdict(),
                }
                for r in self.keywords
            },
        }


def evaluate_scores(scores: KeywordTable, truth: GroundTruth, system: str | None = None) -> SystemReport:
    """Per-keyword ROC, EER-threshold confusion and macro averages for one score table.

    Keywords with only one class present are skipped and listed; if every
    keyword is degenerate, DegenerateLabels is raised.
    """
    missing = [u for u in scores.utterance_ids if u not in truth.present]
    if missing:
        raise MissingInput(f"{len(missing)} scored utterances have no ground truth, e.g. {missing[0]!r}")
    results, skipped = [], []
    for j, kid in enumerate(scores.keyword_ids):
        y = truth.labels(kid, scores.utterance_ids)
        s = scores.values[:, j]
        try:
            roc = compute_roc(s, y)
        except DegenerateLabels:
            skipped.append(kid)
            continue
        results.append(KeywordResult(kid, roc, confusion_at(s, y, roc.eer_threshold), int(y.sum()), int((~y).sum())))
    if not results:
        raise DegenerateLabels("no keyword has both positive and negative utterances")
    auc, eer = macro_average(r.roc for r in results)
    return SystemReport(system or scores.meta.get("system", "unknown"), results, auc, eer, skipped)


@dataclass
class EvalReport:
    systems: dict[str, SystemReport]
    config_hash: str = ""
    timing: dict = field(default_factory=dict)
    distribution: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "systems": {k: v.to_dict() for k, v in self.systems.items()},
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        """``report.json``, one ROC CSV per (system, keyword) and ``distribution.csv``.

        Timing goes to a separate ``timing.json`` so the other files stay
        identical across reruns.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        written[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        roc_dir = out / "roc"
        roc_dir.mkdir(exist_ok=True)
        for name, rep in self.systems.items():
            for r in rep.keywords:
                p = roc_dir / f"{slug(name)}__{slug(r.keyword_id)}.csv"
                rows = ["threshold,fpr,tpr"] + [f"{t!r},{f!r},{v!r}" for t, f, v in r.roc.points()]
                p.write_text("\n".join(rows) + "\n")
                written.append(p)
        if self.distribution:
            splits = sorted({s for counts in self.distribution.values() for s in counts})
            rows = ["keyword," + ",".join(splits)]
            rows += [f"{k}," + ",".join(str(c.get(s, 0)) for s in splits) for k, c in self.distribution.items()]
            (out / "distribution.csv").write_text("\n".join(rows) + "\n")
            written.append(out / "distribution.csv")
        if self.timing:
            (out / "timing.json").write_text(json.dumps(self.timing, indent=2, sort_keys=True) + "\n")
            written.append(out / "timing.json")
        return written


def slug(text: str) -> str:
    out = "".join(c if c.isalnum() or c in "-_" else "-" for c in text.strip().lower())
    return out.strip("-") or "x"


# ---------------------------------------------------------------------------
# Timing and corpus statistics
# ---------------------------------------------------------------------------


@dataclass
class TimingRecord:
    name: str
    seconds: float
    n_utterances: int
    audio_seconds: float
    workers: int = 1
    load_seconds: float = 0.0

    @property
    def utterances_per_second(self) -> float:
        return self.n_utterances / self.seconds if self.seconds > 0 else float("inf")

    @property
    def real_time_factor(self) -> float:
        """Processing time over audio duration (lower is faster)."""
        return self.seconds / self.audio_seconds if self.audio_seconds > 0 else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(utterances_per_second=self.utterances_per_second, real_time_factor=self.real_time_factor)
        return d


def benchmark_detector(
    detector: Callable[[Sequence[FeatureSequence]], object],
    corpus: FeatureArchive | Sequence[FeatureSequence],
    name: str = "detector",
    repeats: int = 1,
    warmup: bool = True,
    workers: int = 1,
    load: Callable[[], object] | None = None,
) -> TimingRecord:
    """Wall-clock time of ``detector(corpus)``, best of ``repeats``.

    A warm-up call (JIT compilation, caches) is excluded. If ``load`` is
    given it is timed separately and reported as ``load_seconds`` so the
    detector time excludes feature loading.
    """
    seqs = list(corpus)
    if not seqs:
        raise ValueError("benchmark corpus is empty")
    load_seconds = 0.0
    if load is not None:
        t0 = time.perf_counter()
        load()
        load_seconds = time.perf_counter() - t0
    if warmup:
        detector(seqs[:1])
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        detector(seqs)
        best = min(best, time.perf_counter() - t0)
    return TimingRecord(name, best, len(seqs), sum(s.seconds for s in seqs), workers, load_seconds)


def speedup(fast: TimingRecord, slow: TimingRecord) -> float:
    """Throughput ratio of ``fast`` over ``slow`` (utterances per second)."""
    return fast.utterances_per_second / slow.utterances_per_second


def keyword_distribution(truth: GroundTruth | Mapping[str, GroundTruth]) -> dict[str, dict[str, int]]:
    """Occurrence counts ``{keyword: {split: count}}``; one split named ``all`` for a single truth."""
    splits = {"all": truth} if isinstance(truth, GroundTruth) else dict(truth)
    kws: list[str] = []
    for t in splits.values():
        kws += [k for k in t.keyword_ids if k not in kws]
    return {
        k: {name: sum(k in present for present in t.present.values()) for name, t in splits.items()}
        for k in kws
    }
