"""
Cleancoder desk-scale pipeline.

    python main.py gen-corpus --out work
    python main.py pretrain --out work
    python main.py train-frontend --out work
    python main.py train-asr --out work [--frontend work/frontend.ckpt]
    python main.py eval-mae --frontend work/frontend.ckpt --manifest work/manifests/test.jsonl --out work/eval
    python main.py eval-mae --frontend medium=m/frontend.ckpt --frontend large=l/frontend.ckpt --manifest ... --out ...
    python main.py eval-wer --asr work/backbone.ckpt [--frontend [NAME=]CKPT ...] --manifest ... --out work/eval
    python main.py merge-reports --rows s1/mae_rows.csv s2/mae_rows.csv --metrics mae --out merged
    python main.py plot-curves --logs a.csv b.csv --out curves.svg

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""
import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from evaluate_system import DENOISED, FRONTEND_DENOISED, RESERVED_CONDITIONS, evaluate_mae, evaluate_model
from models.asr import AsrModel
from models.cleancoder import CleancoderModel
from models.encoder import EncoderConfig
from pipeline.batching import FeatureStore, load_corpus
from pipeline.build_corpus import build_corpus, load_manifest
from pipeline.config import ConfigError, ExperimentConfig, env_seed, eval_threads, load_config, setup_logging
from pipeline.reports import (
    plot_curves,
    plot_snr_bars,
    read_metric_logs,
    read_row_dumps,
    snr_report,
    write_csv,
)
from pipeline.trainer import MetricLog, pretrain_backbone, train_asr, train_frontend

logger = logging.getLogger("cleancoder")
console = Console()

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class MissingPrerequisite(RuntimeError):
    pass


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{path} not found: run `{stage}` first")
    return path


def _seed(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        return args.seed
    from_env = env_seed()
    return from_env if from_env is not None else cfg.seed


def _threads(cfg: ExperimentConfig) -> int:
    return cfg.eval.threads or eval_threads()


def _corpus_dir(args) -> Path:
    return Path(args.corpus) if args.corpus else Path(args.out)


def _show_log(title: str, log: MetricLog) -> None:
    wide = log.wide()
    table = Table(title=title)
    for column in wide.columns:
        table.add_column(str(column), justify="right")
    for _, row in wide.iterrows():
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row.tolist()))
    console.print(table)


# --- commands -----------------------------------------------------------------


def cmd_gen_corpus(args, cfg: ExperimentConfig) -> None:
    manifests = build_corpus(cfg.corpus, args.out, seed=_seed(args, cfg))
    counts = {split: len(load_manifest(path)) for split, path in manifests.items()}
    console.print(" ".join(f"{split}={n}" for split, n in counts.items()))


def cmd_pretrain(args, cfg: ExperimentConfig) -> None:
    corpus_dir = _corpus_dir(args)
    _require(corpus_dir / "manifests" / "train.jsonl", "gen-corpus")
    corpus = load_corpus(corpus_dir, cfg.corpus.alphabet, cfg.corpus.word_length)
    result = pretrain_backbone(
        corpus, EncoderConfig.from_section(cfg.encoder), cfg.pretrain, args.out, seed=_seed(args, cfg)
    )
    _show_log("backbone pretraining", result.log)
    console.print(f"backbone checkpoint: {result.checkpoint} (best val WER {result.best_value:.3f})")


def cmd_train_frontend(args, cfg: ExperimentConfig) -> None:
    corpus_dir = _corpus_dir(args)
    _require(corpus_dir / "manifests" / "train.jsonl", "gen-corpus")
    backbone_path = Path(args.backbone) if args.backbone else Path(args.out) / "backbone.ckpt"
    _require(backbone_path, "pretrain")
    corpus = load_corpus(corpus_dir, cfg.corpus.alphabet, cfg.corpus.word_length)
    backbone = AsrModel.load(backbone_path)
    seed = _seed(args, cfg)
    model = CleancoderModel(backbone.encoder, backbone.stats, seed=seed)
    result = train_frontend(model, corpus, cfg.frontend, args.out, seed=seed)
    _show_log("frontend training", result.log)
    console.print(f"frontend checkpoint: {result.checkpoint} (best val L1 {result.best_value:.4f})")


def cmd_train_asr(args, cfg: ExperimentConfig) -> None:
    corpus_dir = _corpus_dir(args)
    _require(corpus_dir / "manifests" / "train.jsonl", "gen-corpus")
    frontend = None
    if args.frontend:
        frontend = CleancoderModel.load(_require(Path(args.frontend), "train-frontend"))
    corpus = load_corpus(corpus_dir, cfg.corpus.alphabet, cfg.corpus.word_length)
    result = train_asr(
        corpus,
        EncoderConfig.from_section(cfg.encoder),
        cfg.asr,
        args.out,
        seed=_seed(args, cfg),
        frontend=frontend,
    )
    _show_log("ASR training" + (" with frontend" if frontend else " (baseline)"), result.log)
    console.print(f"ASR checkpoint: {result.checkpoint} (best val WER {result.best_value:.3f})")


def _frontends(specs: list[str] | None, default: str) -> dict[str, CleancoderModel]:
    """Parse repeated `--frontend [NAME=]CKPT` into condition name -> model."""
    models: dict[str, CleancoderModel] = {}
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = default, spec
        if not name or not path:
            raise ConfigError(f"--frontend expects NAME=CKPT or CKPT, got '{spec}'")
        if name in models:
            raise ConfigError(f"frontend name '{name}' given twice")
        if name in RESERVED_CONDITIONS:
            raise ConfigError(f"frontend name '{name}' is a baseline condition")
        models[name] = CleancoderModel.load(_require(Path(path), "train-frontend"))
    return models


def _write_report(rows, metrics: list[str], out_dir: Path, stem: str, charts: bool) -> None:
    write_csv(rows, out_dir / f"{stem}_rows.csv")
    for metric in metrics:
        report = snr_report(rows, metric)
        write_csv(report, out_dir / f"{stem}_{metric}_by_snr.csv")
        if charts and not report.empty:
            plot_snr_bars(report, out_dir / f"{stem}_{metric}_by_snr.svg")
        overall = report[report["snr_db"] == "all"]
        for _, row in overall.iterrows():
            console.print(
                f"{metric} [{row['condition']}] seed {row['seed']} overall {row['mean']:.4f} over {row['count']} rows"
            )
    console.print(f"reports written to {out_dir}")


def cmd_eval_mae(args, cfg: ExperimentConfig) -> None:
    frontends = _frontends(args.frontend, DENOISED)
    rows = load_manifest(_require(Path(args.manifest), "gen-corpus"))
    results = evaluate_mae(frontends, rows, FeatureStore(cfg.eval.cache_items), threads=_threads(cfg))
    results["seed"] = _seed(args, cfg)
    _write_report(results, ["mae"], Path(args.out), "mae", cfg.eval.charts)


def cmd_eval_wer(args, cfg: ExperimentConfig) -> None:
    model = AsrModel.load(_require(Path(args.asr), "pretrain"))
    frontends = _frontends(args.frontend, FRONTEND_DENOISED)
    rows = load_manifest(_require(Path(args.manifest), "gen-corpus"))
    results = evaluate_model(
        model,
        rows,
        FeatureStore(cfg.eval.cache_items),
        frontend=frontends,
        threads=_threads(cfg),
        word_length=cfg.corpus.word_length,
    )
    results["seed"] = _seed(args, cfg)
    _write_report(results, ["wer", "ctc_loss"], Path(args.out), "wer", cfg.eval.charts)


def cmd_merge_reports(args, cfg: ExperimentConfig) -> None:
    rows = read_row_dumps(args.rows)
    console.print(f"merged {len(rows)} rows over seeds {sorted(rows['seed'].unique().tolist())}")
    _write_report(rows, args.metrics, Path(args.out), args.stem, cfg.eval.charts)


def cmd_plot_curves(args, cfg: ExperimentConfig) -> None:
    logs = read_metric_logs(args.logs)
    path = plot_curves(logs, args.out, metrics=args.metrics)
    console.print(f"curves written to {path}")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain": cmd_pretrain,
    "train-frontend": cmd_train_frontend,
    "train-asr": cmd_train_asr,
    "eval-mae": cmd_eval_mae,
    "eval-wer": cmd_eval_wer,
    "plot-curves": cmd_plot_curves,
    "merge-reports": cmd_merge_reports,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cleancoder", description="Cleancoder desk-scale pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed and CLEANCODER_SEED")
        p.add_argument("--log-level", help="overrides CLEANCODER_LOG_LEVEL")
        return p

    p = command("gen-corpus", "synthesise the paired noisy/clean corpus")
    p.add_argument("--out", required=True)

    p = command("pretrain", "train the clean-speech CTC backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="corpus directory (defaults to --out)")

    p = command("train-frontend", "train the Cleancoder on a frozen backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="corpus directory (defaults to --out)")
    p.add_argument("--backbone", help="backbone checkpoint (defaults to OUT/backbone.ckpt)")

    p = command("train-asr", "train an ASR model from scratch")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", help="corpus directory (defaults to --out)")
    p.add_argument("--frontend", help="frozen frontend checkpoint; omit for the baseline")

    p = command("eval-mae", "spectrogram MAE grouped by SNR")
    p.add_argument(
        "--frontend", action="append", required=True, metavar="[NAME=]CKPT", help="repeat to compare frontends"
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for CSV and SVG reports")

    p = command("eval-wer", "greedy WER grouped by SNR")
    p.add_argument("--asr", required=True)
    p.add_argument("--frontend", action="append", metavar="[NAME=]CKPT", help="repeat to compare frontends")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for CSV and SVG reports")

    p = command("plot-curves", "validation curves from metric logs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", nargs="+", default=["ctc", "wer"])

    p = command("merge-reports", "SNR reports over the row dumps of several seeds")
    p.add_argument("--rows", nargs="+", required=True, help="per-row CSVs written by eval-mae or eval-wer")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="merged")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        setup_logging(args.log_level)
        cfg = load_config(args.config)
    except ConfigError as exc:
        console.print(f"[red]config error:[/red] {exc}")
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args, cfg)
    except (ConfigError, ValidationError) as exc:
        console.print(f"[red]config error:[/red] {exc}")
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        console.print(f"[red]{args.command} failed:[/red] {exc}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
