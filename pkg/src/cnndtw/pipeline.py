"""End-to-end pipeline: features, targets, training, detection, evaluation, plots.

Every stage has a hash computed from its own config sections, its code
version and the hashes of the stages it reads from. The hash is written
into the meta of every output file and into ``manifest.json``. A rerun
skips stages whose hash and outputs are unchanged; when a hash changed and
old outputs are still on disk the run refuses unless ``force`` is set.

Output layout under ``out_dir``::

    features/   keywords.kwf, {train,dev,test}.kwf, truth_*.tsv
    targets/    {train,dev}.ktg plus cost caches
    models/     cnn-dtw.kmd, cnn.kmd and their training logs
    scores/     {system}.ksc for the four systems
    report/     report.json, roc/, distribution.csv, timing.json, plots/
    manifest.json
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import binfmt
from .baselines import (
    SYSTEMS,
    NegativeSamplingConfig,
    ScoreSet,
    detect_cnn_corpus,
    detect_cnn_dtw,
    detect_dtw_corpus,
    read_scores,
    train_cnn_classifier,
    write_scores,
)
from .config import load_toml
from .dtw import ExemplarSet, SweepConfig, exemplar_sets_from_archive
from .errors import ConfigError, KwsError, MissingInput
from .evaluate import EvalReport, GroundTruth, TimingRecord, evaluate_scores, keyword_distribution
from .features import FeatureArchive, MfccConfig, read_archive, wav_to_features, write_archive
from .nn import load_model, save_model
from .plotting import emit_plots
from .synth import SPLITS, SynthConfig, generate
from .targets import build_targets, read_targets, write_targets
from .train import ModelConfig, TrainConfig, train_cnn_dtw

logger = logging.getLogger(__name__)

WORKERS_ENV = "CNNDTW_WORKERS"

# Desk-scale defaults: a narrow network without dropout and a larger step
# size than the full-size recipe, so the synthetic pipeline trains in a few
# minutes on one core.
DESK_MODEL = {"conv_filters": [32, 32, 64], "kernel_width": 5, "dense_units": [64], "dropout": 0.0,
              "noise_sigma": 0.1}
DESK_TRAIN = {"epochs_max": 120, "batch_size": 16, "lr_start": 2e-3, "lr_end": 1e-4, "early_stop_patience": 15}
DESK_BASELINE = {"dev_fraction": 0.2}


class StaleOutputs(ConfigError):
    """Outputs on disk were produced under a different configuration."""


@dataclass
class PipelineConfig:
    out_dir: Path
    seed: int = 0
    workers: int = 1
    source: str = "synth"  # "synth" or "wav"
    wav: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**DESK_MODEL))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    baseline_train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN, **DESK_BASELINE))
    negatives: NegativeSamplingConfig = field(default_factory=NegativeSamplingConfig)
    plots: bool = True
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        """Build from the parsed TOML layout; relative paths resolve against ``base_dir``.

        ``pipeline.seed`` seeds the generator, both trainings and negative
        sampling unless a section sets its own ``seed``.
        """
        known = {"pipeline", "synth", "mfcc", "sweep", "model", "train", "baseline"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        p = dict(d.get("pipeline", {}))
        base = Path(base_dir)
        try:
            seed = int(p.pop("seed", 0))
            out_dir = base / p.pop("out_dir", "run")
            workers = int(os.environ.get(WORKERS_ENV, p.pop("workers", 1)))
            p.pop("workers", None)
            source = p.pop("source", "synth")
            wav = {k: str(base / v) for k, v in p.pop("wav", {}).items()}
            plots = bool(p.pop("plots", True))
            if p:
                raise ConfigError(f"unknown pipeline options: {sorted(p)}")
            if source not in ("synth", "wav"):
                raise ConfigError(f"pipeline.source must be 'synth' or 'wav', got {source!r}")
            baseline = dict(d.get("baseline", {}))
            neg_keys = set(NegativeSamplingConfig.__dataclass_fields__)
            neg = {k: baseline.pop(k) for k in list(baseline) if k in neg_keys}
            train = {**DESK_TRAIN, "seed": seed, **d.get("train", {})}
            cfg = cls(
                out_dir=out_dir,
                seed=seed,
                workers=max(1, workers),
                source=source,
                wav=wav,
                synth=SynthConfig.from_dict({"seed": seed, **d.get("synth", {})}),
                mfcc=MfccConfig.from_dict(d.get("mfcc", {})),
                sweep=SweepConfig.from_dict(d.get("sweep", {})),
                model=ModelConfig.from_dict({**DESK_MODEL, **d.get("model", {})}),
                train=TrainConfig.from_dict(train),
                baseline_train=TrainConfig.from_dict({**train, **DESK_BASELINE, **baseline}),
                negatives=NegativeSamplingConfig.from_dict({"seed": seed, **neg}),
                plots=plots,
                raw=d,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid pipeline config: {e}") from e
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(load_toml(path), base_dir=path.parent)

    def sections(self) -> dict:
        return {
            "source": self.source,
            "wav": self.wav,
            "synth": self.synth.to_dict(),
            "mfcc": self.mfcc.to_dict(),
            "sweep": self.sweep.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "baseline_train": self.baseline_train.to_dict(),
            "negatives": self.negatives.to_dict(),
            "plots": self.plots,
        }


@dataclass
class Stage:
    name: str
    version: int
    deps: tuple[str, ...]
    sections: Callable[[PipelineConfig], dict]
    outputs: Callable[[PipelineConfig], list[Path]]
    run: Callable[["_Context"], None]


@dataclass
class _Context:
    cfg: PipelineConfig
    hashes: dict[str, str]
    stage: str = ""

    @property
    def out(self) -> Path:
        return self.cfg.out_dir

    @property
    def hash(self) -> str:
        return self.hashes[self.stage]

    def meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "stage": self.stage, **extra}


def _p(cfg: PipelineConfig, *parts: str) -> Path:
    return cfg.out_dir.joinpath(*parts)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _truth_splits(cfg: PipelineConfig) -> list[str]:
    if cfg.source == "synth":
        return list(SPLITS)
    return [s for s in SPLITS if f"{s}_truth" in cfg.wav]


def _features_outputs(cfg: PipelineConfig) -> list[Path]:
    files = [_p(cfg, "features", "keywords.kwf")] + [_p(cfg, "features", f"{s}.kwf") for s in SPLITS]
    return files + [_p(cfg, "features", f"truth_{s}.tsv") for s in _truth_splits(cfg)]


def _extract_dir(directory: Path, mfcc: MfccConfig, prefix: str, failed: dict) -> list:
    seqs = []
    for wav in sorted(directory.glob("*.wav")):
        try:
            seqs.append(wav_to_features(wav, mfcc, source_id=f"{prefix}{wav.stem}"))
        except KwsError as e:
            failed[str(wav)] = f"{type(e).__name__}: {e}"
    return seqs


def _run_features(ctx: _Context) -> None:
    cfg = ctx.cfg
    d = _p(cfg, "features")
    d.mkdir(parents=True, exist_ok=True)
    if cfg.source == "synth":
        corpus = generate(cfg.synth)
        write_archive(corpus.keyword_archive(), d / "keywords.kwf", ctx.meta(split="keywords"))
        for split in SPLITS:
            write_archive(corpus.splits[split], d / f"{split}.kwf", ctx.meta(split=split))
            truth = corpus.truth[split]
            truth.meta = {"config_hash": ctx.hash, "split": split}
            truth.write(d / f"truth_{split}.tsv")
        return

    needed = ["keywords_dir"] + [f"{s}_dir" for s in SPLITS] + [f"{s}_truth" for s in _truth_splits(cfg)]
    for key in needed:
        if key not in cfg.wav or not Path(cfg.wav[key]).exists():
            raise MissingInput(f"pipeline.wav.{key} is missing or does not exist")
    failed: dict[str, str] = {}
    kw_seqs = []
    for kw_dir in sorted(p for p in Path(cfg.wav["keywords_dir"]).iterdir() if p.is_dir()):
        kw_seqs += _extract_dir(kw_dir, cfg.mfcc, f"{kw_dir.name}/", failed)
    if not kw_seqs:
        raise MissingInput("no keyword exemplars could be extracted")
    keyword_ids = [k.keyword_id for k in exemplar_sets_from_archive(FeatureArchive.from_sequences(kw_seqs))]
    write_archive(kw_seqs, d / "keywords.kwf", ctx.meta(split="keywords", mfcc=cfg.mfcc.to_dict()))
    for split in SPLITS:
        seqs = _extract_dir(Path(cfg.wav[f"{split}_dir"]), cfg.mfcc, "", failed)
        if not seqs:
            raise MissingInput(f"no {split} utterances could be extracted")
        write_archive(seqs, d / f"{split}.kwf", ctx.meta(split=split, mfcc=cfg.mfcc.to_dict()))
    for split in _truth_splits(cfg):
        truth = GroundTruth.read(cfg.wav[f"{split}_truth"], keyword_ids)
        truth.meta = {"config_hash": ctx.hash, "split": split}
        truth.write(d / f"truth_{split}.tsv")
    binfmt.atomic_write(d / "failed.json", (json.dumps(failed, indent=2, sort_keys=True) + "\n").encode())
    if failed:
        logger.warning("%d files failed feature extraction; see %s", len(failed), d / "failed.json")


def _keywords(cfg: PipelineConfig) -> list[ExemplarSet]:
    return exemplar_sets_from_archive(read_archive(_p(cfg, "features", "keywords.kwf")))


def _run_targets(ctx: _Context) -> None:
    cfg = ctx.cfg
    d = _p(cfg, "targets")
    d.mkdir(parents=True, exist_ok=True)
    keywords = _keywords(cfg)
    for split in ("train", "dev"):
        corpus = read_archive(_p(cfg, "features", f"{split}.kwf"))
        targets = build_targets(keywords, corpus, cfg.sweep, cache_path=d / f"costs_{split}.kcc",
                                workers=cfg.workers, meta=ctx.meta(split=split))
        write_targets(targets, d / f"{split}.ktg")


def _run_train_cnn_dtw(ctx: _Context) -> None:
    cfg = ctx.cfg
    d = _p(cfg, "models")
    d.mkdir(parents=True, exist_ok=True)
    model, log = train_cnn_dtw(
        read_archive(_p(cfg, "features", "train.kwf")),
        read_targets(_p(cfg, "targets", "train.ktg")),
        read_archive(_p(cfg, "features", "dev.kwf")),
        read_targets(_p(cfg, "targets", "dev.ktg")),
        cfg.train,
        cfg.model,
    )
    model.meta["config_hash"] = ctx.hash
    save_model(model, None, d / "cnn-dtw.kmd")
    log.write(d / "cnn-dtw.log.jsonl")


def _run_train_cnn(ctx: _Context) -> None:
    cfg = ctx.cfg
    d = _p(cfg, "models")
    d.mkdir(parents=True, exist_ok=True)
    model, log = train_cnn_classifier(
        _keywords(cfg), read_archive(_p(cfg, "features", "train.kwf")), cfg.negatives, cfg.baseline_train, cfg.model
    )
    model.meta["config_hash"] = ctx.hash
    save_model(model, None, d / "cnn.kmd")
    log.write(d / "cnn.log.jsonl")


def _timed(fn: Callable[[list], object], seqs: list, name: str, workers: int) -> tuple[object, TimingRecord]:
    fn(seqs[:1])  # warm-up: JIT compilation, allocator
    t0 = time.perf_counter()
    result = fn(seqs)
    elapsed = time.perf_counter() - t0
    return result, TimingRecord(name, elapsed, len(seqs), sum(s.seconds for s in seqs), workers)


def _run_detect(ctx: _Context) -> None:
    cfg = ctx.cfg
    d = _p(cfg, "scores")
    d.mkdir(parents=True, exist_ok=True)
    test = list(read_archive(_p(cfg, "features", "test.kwf")))
    keywords = _keywords(cfg)
    cnn_dtw, _ = load_model(_p(cfg, "models", "cnn-dtw.kmd"))
    cnn, _ = load_model(_p(cfg, "models", "cnn.kmd"))
    meta = ctx.meta(split="test")
    dtw, t_dtw = _timed(lambda s: detect_dtw_corpus(keywords, s, cfg.sweep, cfg.workers, meta), test, "dtw", cfg.workers)
    s_cnn_dtw, t_cnn_dtw = _timed(lambda s: detect_cnn_dtw(cnn_dtw, s, meta=meta), test, "cnn-dtw", 1)
    s_cnn, t_cnn = _timed(lambda s: detect_cnn_corpus(cnn, s, cnn.meta.get("window_frames", 60),
                                                      cnn.meta.get("stride", 3), meta=meta), test, "cnn", 1)
    tables = {**dtw, "cnn-dtw": s_cnn_dtw, "cnn": s_cnn}
    for system in SYSTEMS:
        write_scores(tables[system], d / f"{system}.ksc")
    timing = {t.name: t.to_dict() for t in (t_dtw, t_cnn_dtw, t_cnn)}
    timing["speedup_cnn_dtw_over_dtw"] = t_cnn_dtw.utterances_per_second / t_dtw.utterances_per_second
    binfmt.atomic_write(d / "timing.json", (json.dumps(timing, indent=2, sort_keys=True) + "\n").encode())


def check_same_hash(tables: dict[str, ScoreSet]) -> str:
    """The shared ``config_hash`` of a set of score tables; mixing hashes is a config error."""
    hashes = {name: t.meta.get("config_hash", "") for name, t in tables.items()}
    if len(set(hashes.values())) > 1:
        raise ConfigError(f"score files come from different configurations: {hashes}")
    return next(iter(hashes.values()), "")


def evaluate_tables(tables: dict[str, ScoreSet], truth: GroundTruth, truths: dict[str, GroundTruth] | None = None,
                    timing: dict | None = None) -> EvalReport:
    config_hash = check_same_hash(tables)
    systems = {name: evaluate_scores(t, truth, name) for name, t in tables.items()}
    dist = keyword_distribution(truths) if truths else keyword_distribution(truth)
    return EvalReport(systems, config_hash, timing or {}, dist)


def _run_eval(ctx: _Context) -> None:
    cfg = ctx.cfg
    tables = {s: read_scores(_p(cfg, "scores", f"{s}.ksc")) for s in SYSTEMS}
    truths = {s: GroundTruth.read(_p(cfg, "features", f"truth_{s}.tsv")) for s in _truth_splits(cfg)}
    if "test" not in truths:
        raise MissingInput("test ground truth is required for evaluation")
    timing_path = _p(cfg, "scores", "timing.json")
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    evaluate_tables(tables, truths["test"], truths, timing).write(_p(cfg, "report"))


def _run_plots(ctx: _Context) -> None:
    emit_plots(_p(ctx.cfg, "report"))


def _plot_outputs(cfg: PipelineConfig) -> list[Path]:
    return [_p(cfg, "report", "plots", "keyword_distribution.svg")] if cfg.plots else []


STAGES: list[Stage] = [
    Stage("features", 1, (), lambda c: {k: c.sections()[k] for k in ("source", "wav", "synth", "mfcc")},
          _features_outputs, _run_features),
    Stage("targets", 1, ("features",), lambda c: {"sweep": c.sweep.to_dict()},
          lambda c: [_p(c, "targets", "train.ktg"), _p(c, "targets", "dev.ktg")], _run_targets),
    Stage("train_cnn_dtw", 1, ("targets",), lambda c: {"model": c.model.to_dict(), "train": c.train.to_dict()},
          lambda c: [_p(c, "models", "cnn-dtw.kmd")], _run_train_cnn_dtw),
    Stage("train_cnn", 1, ("features",),
          lambda c: {"model": c.model.to_dict(), "train": c.baseline_train.to_dict(),
                     "negatives": c.negatives.to_dict()},
          lambda c: [_p(c, "models", "cnn.kmd")], _run_train_cnn),
    Stage("detect", 1, ("features", "train_cnn_dtw", "train_cnn"), lambda c: {"sweep": c.sweep.to_dict()},
          lambda c: [_p(c, "scores", f"{s}.ksc") for s in SYSTEMS], _run_detect),
    Stage("eval", 1, ("detect",), lambda c: {}, lambda c: [_p(c, "report", "report.json")], _run_eval),
    Stage("plots", 1, ("eval",), lambda c: {"plots": c.plots}, _plot_outputs, _run_plots),
]
STAGE_NAMES = [st.name for st in STAGES]


def stage_hashes(cfg: PipelineConfig) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for st in STAGES:
        hashes[st.name] = binfmt.config_hash(
            {"stage": st.name, "version": st.version, "config": st.sections(cfg),
             "upstream": [hashes[d] for d in st.deps]}
        )
    return hashes


@dataclass
class PipelineResult:
    ran: list[str]
    skipped: list[str]
    manifest: dict


def run_pipeline(cfg: PipelineConfig, force: bool = False, until: str | None = None) -> PipelineResult:
    """Run every stage that is not up to date, in order.

    Args:
        cfg: the pipeline configuration.
        force: rerun stale stages even when their old outputs are on disk.
        until: stop after this stage.

    Raises:
        StaleOutputs: a stage's config changed and its old outputs exist, without ``force``.
        KwsError: any stage failure, after the manifest records completed stages.
    """
    names = [s.name for s in STAGES]
    if until is not None and until not in names:
        raise ConfigError(f"unknown stage {until!r}; stages are {names}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = cfg.out_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    recorded = manifest.get("stages", {})
    hashes = stage_hashes(cfg)
    manifest = {"config_hash": binfmt.config_hash(cfg.sections()), "stages": recorded}
    ctx = _Context(cfg, hashes)
    ran, skipped = [], []

    # refuse before touching anything if some stale stage would overwrite outputs
    if not force:
        for st in STAGES:
            prev = recorded.get(st.name, {})
            existing = [p for p in st.outputs(cfg) if p.exists()]
            if existing and prev.get("hash") != hashes[st.name]:
                raise StaleOutputs(
                    f"stage {st.name!r}: outputs in {cfg.out_dir} were produced under a different "
                    f"configuration; rerun with --force to overwrite"
                )
            if st.name == until:
                break

    for st in STAGES:
        prev = recorded.get(st.name, {})
        outputs = st.outputs(cfg)
        upstream_ran = any(d in ran for d in st.deps)
        if prev.get("hash") == hashes[st.name] and all(p.exists() for p in outputs) and not upstream_ran:
            skipped.append(st.name)
            logger.info("stage %s up to date", st.name)
        elif st.name == "plots" and not cfg.plots:
            skipped.append(st.name)
        else:
            logger.info("stage %s running", st.name)
            ctx.stage = st.name
            t0 = time.perf_counter()
            st.run(ctx)
            recorded[st.name] = {"hash": hashes[st.name], "version": st.version,
                                 "seconds": round(time.perf_counter() - t0, 3),
                                 "outputs": [str(p.relative_to(cfg.out_dir)) for p in outputs]}
            ran.append(st.name)
            binfmt.atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        if st.name == until:
            break
    binfmt.atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return PipelineResult(ran, skipped, manifest)


def default_config_toml(out_dir: str = "run", seed: int = 0) -> str:
    """A complete config file with the synthetic-corpus defaults, for ``pipeline init``."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    cfg = PipelineConfig(out_dir=Path(out_dir), seed=seed)
    lines = ["[pipeline]", f'out_dir = "{out_dir}"', f"seed = {seed}", "workers = 1", 'source = "synth"', ""]
    sections = {
        "synth": {k: v for k, v in cfg.synth.to_dict().items() if k != "seed"},
        "sweep": {k: v for k, v in cfg.sweep.to_dict().items() if v is not None},
        "model": cfg.model.to_dict(),
        "train": {k: v for k, v in cfg.train.to_dict().items() if k not in ("seed", "dev_fraction")},
        "baseline": {"dev_fraction": cfg.baseline_train.dev_fraction,
                     **{k: v for k, v in cfg.negatives.to_dict().items() if k != "seed" and v is not None}},
    }
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {fmt(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)
