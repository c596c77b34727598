"""Command-line entry point: ``cnndtw <command> ...``.

Exit codes: 0 success, 1 stage error, 2 configuration error (including bad
arguments and stale pipeline outputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import binfmt
from .baselines import (
    NegativeSamplingConfig,
    detect_cnn_corpus,
    detect_cnn_dtw,
    detect_dtw_corpus,
    read_scores,
    train_cnn_classifier,
    write_scores,
)
from .config import load_toml
from .dtw import CostCache, ExemplarSet, SweepConfig, exemplar_sets_from_archive, min_cost, score_corpus
from .errors import ConfigError, KwsError, MissingInput
from .evaluate import GroundTruth, benchmark_detector
from .features import FeatureArchive, MfccConfig, read_archive, wav_to_features, write_archive
from .nn import load_model, save_model
from .pipeline import (
    DESK_MODEL,
    DESK_TRAIN,
    STAGE_NAMES,
    WORKERS_ENV,
    PipelineConfig,
    default_config_toml,
    evaluate_tables,
    run_pipeline,
)
from .plotting import emit_plots
from .synth import SPLITS, SynthConfig, generate
from .targets import build_targets, read_targets, write_targets
from .train import ModelConfig, TrainConfig, train_cnn_dtw

logger = logging.getLogger("cnndtw")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _section(path: str | None, name: str) -> dict:
    if path is None:
        return {}
    data = load_toml(path)
    return dict(data.get(name, {}))


def _sweep(args) -> SweepConfig:
    d = _section(args.sweep, "sweep")
    if args.frame_skip is not None:
        d["frame_skip"] = args.frame_skip
    if args.band is not None:
        d["band_width"] = args.band
    try:
        return SweepConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid sweep config: {e}") from e


def _train_configs(args, defaults: dict | None = None) -> tuple[TrainConfig, ModelConfig]:
    train = {**DESK_TRAIN, **(defaults or {}), **_section(args.config, "train")}
    model = {**DESK_MODEL, **_section(args.config, "model")}
    if args.epochs is not None:
        train["epochs_max"] = args.epochs
    if args.seed is not None:
        train["seed"] = args.seed
    try:
        return TrainConfig.from_dict(train), ModelConfig.from_dict(model)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid training config: {e}") from e


def load_keywords(path: str | Path) -> list[ExemplarSet]:
    """Exemplar sets from one archive grouped by ``keyword/`` id prefix, or a directory of per-keyword archives."""
    path = Path(path)
    if path.is_dir():
        sets = []
        for f in sorted(path.glob("*.kwf")):
            sets.append(ExemplarSet(f.stem, list(read_archive(f))))
        if not sets:
            raise MissingInput(f"no .kwf keyword archives in {path}")
        return sets
    if not path.exists():
        raise MissingInput(f"keyword archive not found: {path}")
    return exemplar_sets_from_archive(read_archive(path))


def _archive(path: str | Path) -> FeatureArchive:
    if not Path(path).exists():
        raise MissingInput(f"feature archive not found: {path}")
    return read_archive(path)


def _workers(args) -> int:
    return max(1, int(args.workers if args.workers is not None else os.environ.get(WORKERS_ENV, 1)))


def _write_json(path: Path, obj) -> None:
    binfmt.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    d = _section(args.config, "synth") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SynthConfig.from_dict(d)
    corpus = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": binfmt.config_hash(cfg.to_dict())}
    write_archive(corpus.keyword_archive(), out / "keywords.kwf", {**meta, "split": "keywords"})
    for split in SPLITS:
        write_archive(corpus.splits[split], out / f"{split}.kwf", {**meta, "split": split})
        corpus.truth[split].meta = {**meta, "split": split}
        corpus.truth[split].write(out / f"truth_{split}.tsv")
    print("split\tutterances\tkeyword_occurrences")
    for split in SPLITS:
        print(f"{split}\t{len(corpus.splits[split])}\t{sum(len(v) for v in corpus.truth[split].present.values())}")
    return EXIT_OK


def cmd_features_extract(args) -> int:
    try:
        mfcc = MfccConfig.from_dict(_section(args.mfcc, "mfcc"))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid mfcc config: {e}") from e
    inputs: list[tuple[Path, str]] = []
    if not args.inputs and not args.wav_dir:
        raise ConfigError("no inputs given")
    for src in map(Path, [*args.inputs, *args.wav_dir]):
        if not src.exists():
            raise MissingInput(f"input not found: {src}")
        if src.is_dir() and args.keyword_dirs:
            inputs += [(w, f"{sub.name}/{w.stem}") for sub in sorted(p for p in src.iterdir() if p.is_dir())
                       for w in sorted(sub.glob("*.wav"))]
        elif src.is_dir():
            inputs += [(w, w.stem) for w in sorted(src.glob("*.wav"))]
        else:
            inputs.append((src, src.stem))
    seqs, failed = [], {}
    for wav, sid in inputs:
        try:
            seqs.append(wav_to_features(wav, mfcc, source_id=sid))
        except KwsError as e:
            failed[str(wav)] = f"{type(e).__name__}: {e}"
            logger.warning("skipping %s: %s", wav, e)
    out = Path(args.out)
    _write_json(out.with_name(out.name + ".failed.json"), failed)
    if not seqs:
        raise MissingInput("no input could be converted to features")
    write_archive(seqs, out, {"mfcc": mfcc.to_dict(), "config_hash": binfmt.config_hash(mfcc.to_dict())})
    print(f"wrote\t{len(seqs)}\tfailed\t{len(failed)}")
    return EXIT_OK


def cmd_dtw_score(args) -> int:
    keywords = load_keywords(args.keywords)
    corpus = _archive(args.corpus)
    cfg = _sweep(args)
    costs = score_corpus(keywords, list(corpus), cfg, workers=_workers(args))
    cache = CostCache({key: min_cost(c) for key, c in costs.items()}, meta={"sweep": cfg.to_dict()})
    if args.out:
        cache.save(args.out)
    if args.print or not args.out:
        kids = [k.keyword_id for k in keywords]
        print("utterance\t" + "\t".join(kids))
        for seq in corpus:
            print(seq.source_id + "\t" + "\t".join(f"{float(cache[(seq.source_id, k)]):.6f}" for k in kids))
    return EXIT_OK


def cmd_targets_build(args) -> int:
    keywords = load_keywords(args.keywords)
    corpus = _archive(args.corpus)
    cfg = _sweep(args)
    meta = {"config_hash": binfmt.config_hash({"sweep": cfg.to_dict(), "corpus": corpus.checksum})}
    targets = build_targets(keywords, corpus, cfg, cache_path=args.cache, workers=_workers(args), meta=meta)
    write_targets(targets, args.out)
    print(f"utterances\t{len(targets)}\tkeywords\t{targets.n_keywords}")
    return EXIT_OK


def cmd_train_cnn_dtw(args) -> int:
    cfg, mcfg = _train_configs(args)
    dev_corpus = _archive(args.dev_corpus) if args.dev_corpus else None
    dev_targets = read_targets(args.dev_targets) if args.dev_targets else None
    if dev_corpus is None:
        cfg.dev_fraction = cfg.dev_fraction or 0.1
    model, log = train_cnn_dtw(_archive(args.corpus), read_targets(args.targets), dev_corpus, dev_targets,
                               cfg, mcfg, checkpoint_path=args.checkpoint)
    save_model(model, None, args.out)
    log.write(args.log or str(args.out) + ".log.jsonl")
    print(f"best_epoch\t{log.best_epoch}\tbest_dev_loss\t{log.best_dev_loss:.6f}\tstopped\t{log.stopping_epoch}")
    return EXIT_OK


def cmd_train_cnn_baseline(args) -> int:
    cfg, mcfg = _train_configs(args, {"dev_fraction": 0.2})
    neg = NegativeSamplingConfig.from_dict({"seed": cfg.seed, **{
        k: v for k, v in _section(args.config, "baseline").items() if k in NegativeSamplingConfig.__dataclass_fields__
    }})
    model, log = train_cnn_classifier(load_keywords(args.keywords), _archive(args.corpus), neg, cfg, mcfg)
    save_model(model, None, args.out)
    log.write(args.log or str(args.out) + ".log.jsonl")
    print(f"best_epoch\t{log.best_epoch}\tbest_dev_loss\t{log.best_dev_loss:.6f}\tstopped\t{log.stopping_epoch}")
    return EXIT_OK


def _detect(system: str, args, seqs):
    if system in ("dtw-ks", "dtw-qbye"):
        if not args.keywords:
            raise ConfigError(f"--keywords is required for {system}")
        keywords = load_keywords(args.keywords)
        cfg = _sweep(args)
        return lambda s: detect_dtw_corpus(keywords, s, cfg, _workers(args))[system]
    if not args.model:
        raise ConfigError(f"--model is required for {system}")
    if not Path(args.model).exists():
        raise MissingInput(f"model file not found: {args.model}")
    model, _ = load_model(args.model)
    if system == "cnn-dtw":
        return lambda s: detect_cnn_dtw(model, s)
    return lambda s: detect_cnn_corpus(model, s, model.meta.get("window_frames", 60), model.meta.get("stride", 3))


def cmd_detect(args) -> int:
    corpus = _archive(args.corpus)
    scores = _detect(args.system, args, list(corpus))(list(corpus))
    scores.meta.update({"config_hash": corpus.meta.get("config_hash", ""), "system": args.system})
    write_scores(scores, args.out)
    print(f"system\t{args.system}\tutterances\t{len(scores)}\tkeywords\t{scores.n_keywords}")
    return EXIT_OK


def cmd_eval(args) -> int:
    tables = {}
    for path in args.scores:
        if not Path(path).exists():
            raise MissingInput(f"score file not found: {path}")
        t = read_scores(path)
        tables[t.meta.get("system") or Path(path).stem] = t
    kids = next(iter(tables.values())).keyword_ids
    truth = GroundTruth.read(args.truth, kids)
    report = evaluate_tables(tables, truth)
    report.write(args.out)
    print("system\tmacro_auc\tmacro_eer")
    for name, rep in report.systems.items():
        print(f"{name}\t{rep.macro_auc:.6f}\t{rep.macro_eer:.6f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    corpus = list(_archive(args.corpus))
    records = []
    for system in args.systems:
        fn = _detect(system, args, corpus)
        records.append(benchmark_detector(fn, corpus, system, repeats=args.repeats, workers=_workers(args)))
    print("system\tseconds\tutterances_per_second\treal_time_factor")
    for r in records:
        print(f"{r.name}\t{r.seconds:.4f}\t{r.utterances_per_second:.2f}\t{r.real_time_factor:.5f}")
    base = records[-1]
    for r in records[:-1]:
        print(f"speedup\t{r.name}/{base.name}\t{r.utterances_per_second / base.utterances_per_second:.2f}")
    if args.out:
        _write_json(Path(args.out), [r.to_dict() for r in records])
    return EXIT_OK


def cmd_pipeline_run(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
    result = run_pipeline(cfg, force=args.force, until=args.until)
    print("stage\tstatus")
    for name in [st for st in STAGE_NAMES if st in result.ran or st in result.skipped]:
        print(f"{name}\t{'ran' if name in result.ran else 'skipped'}")
    report = cfg.out_dir / "report" / "report.json"
    if report.exists() and ("eval" in result.ran or "eval" in result.skipped):
        data = json.loads(report.read_text())
        print("system\tmacro_auc\tmacro_eer")
        for name, rep in data["systems"].items():
            print(f"{name}\t{rep['macro_auc']:.6f}\t{rep['macro_eer']:.6f}")
    return EXIT_OK


def cmd_pipeline_init(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    out.write_text(default_config_toml(args.run_dir, args.seed or 0))
    print(f"wrote\t{out}")
    return EXIT_OK


def cmd_plots(args) -> int:
    files = emit_plots(args.report, args.out)
    for f in files:
        print(f)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _sweep_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sweep", help="TOML file with a [sweep] section")
    p.add_argument("--frame-skip", type=int, help="override sweep frame_skip")
    p.add_argument("--band", type=int, help="Sakoe-Chiba band half-width")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file with [model] and [train] sections")
    p.add_argument("--epochs", type=int, help="override train.epochs_max")
    p.add_argument("--log", help="training log path (JSON lines)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnndtw", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--workers", type=int, help=f"worker threads (default ${WORKERS_ENV} or 1)")
    parser.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", help="TOML file with a [synth] section")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    feats = sub.add_parser("features", help="feature extraction").add_subparsers(dest="action", required=True)
    p = feats.add_parser("extract", help="WAV files or directories to a feature archive")
    p.add_argument("inputs", nargs="*", help="WAV files or directories")
    p.add_argument("--wav-dir", action="append", default=[], help="directory of WAV files (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--mfcc", "--config", dest="mfcc", help="TOML file with an [mfcc] section")
    p.add_argument("--keyword-dirs", action="store_true",
                   help="treat each subdirectory as one keyword; ids become keyword/stem")
    p.set_defaults(func=cmd_features_extract)

    dtw = sub.add_parser("dtw", help="DTW sweeps").add_subparsers(dest="action", required=True)
    p = dtw.add_parser("score", help="min-over-exemplars sweep cost per (utterance, keyword)")
    p.add_argument("--keywords", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--print", action="store_true", help="print the cost table as TSV")
    _sweep_args(p)
    p.set_defaults(func=cmd_dtw_score)

    tg = sub.add_parser("targets", help="CNN training targets").add_subparsers(dest="action", required=True)
    p = tg.add_parser("build")
    p.add_argument("--keywords", required=True, help="keyword archive or directory of per-keyword archives")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", help="cost cache for resumable runs")
    _sweep_args(p)
    p.set_defaults(func=cmd_targets_build)

    tr = sub.add_parser("train", help="model training").add_subparsers(dest="action", required=True)
    p = tr.add_parser("cnn-dtw")
    p.add_argument("--corpus", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--dev-corpus")
    p.add_argument("--dev-targets")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="save the best model here after every improvement")
    _train_args(p)
    p.set_defaults(func=cmd_train_cnn_dtw)
    p = tr.add_parser("cnn-baseline")
    p.add_argument("--keywords", required=True)
    p.add_argument("--corpus", required=True, help="negative windows are drawn from this archive")
    p.add_argument("--out", required=True)
    _train_args(p)
    p.set_defaults(func=cmd_train_cnn_baseline)

    p = sub.add_parser("detect", help="score a corpus with one system")
    p.add_argument("--system", required=True, choices=["cnn-dtw", "cnn", "dtw-ks", "dtw-qbye"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--model")
    p.add_argument("--keywords")
    p.add_argument("--out", required=True)
    _sweep_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="ROC, AUC, EER and confusion counts")
    p.add_argument("--scores", nargs="+", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="detector throughput on identical inputs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--systems", nargs="+", default=["cnn-dtw", "dtw-ks"],
                   choices=["cnn-dtw", "cnn", "dtw-ks", "dtw-qbye"], help="the last one is the speedup reference")
    p.add_argument("--model")
    p.add_argument("--keywords")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="write timing records as JSON")
    _sweep_args(p)
    p.set_defaults(func=cmd_bench)

    pipe = sub.add_parser("pipeline", help="end-to-end runs").add_subparsers(dest="action", required=True)
    p = pipe.add_parser("run")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="overwrite outputs made under another config")
    p.add_argument("--until", help="stop after this stage")
    p.set_defaults(func=cmd_pipeline_run)
    p = pipe.add_parser("init", help="write a default config file")
    p.add_argument("--out", required=True)
    p.add_argument("--run-dir", default="run")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pipeline_init)

    p = sub.add_parser("plots", help="SVG figures and CSVs from an eval report")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plots)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (KwsError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
