"""
Training loops for the backbone, the denoising frontend and the downstream ASR.

All three share one step function (forward, backward, decoupled Adam) and
log validation metrics into a MetricLog. Training graphs run in float32;
given the same seed, config and corpus a run is reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import pandas as pd

from models.asr import AsrModel
from models.cleancoder import CleancoderModel, denoise_manifest
from models.encoder import ConformerEncoder, EncoderConfig, encoder_feeds, subsampled_length
from pipeline.batching import Batch, Corpus, FeatureFn, make_batches, to_words
from pipeline.config import AsrSection, FrontendSection, PretrainSection, TrainSection, eval_threads
from pipeline.reports import FLOAT_FORMAT, METRIC_LOG_COLUMNS, ReportSchemaError
from project_tools.ctc import greedy_decode
from project_tools.metrics import wer
from project_tools.numgrad import Graph, NonFiniteError, Rng, backward, forward_eval
from project_tools.optim import AdamState, adam_step, noam_lr

logger = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32


class TrainingAborted(RuntimeError):
    pass


# --- metric log ---------------------------------------------------------------


@dataclass
class MetricLog:
    """Long-format metric rows: step, split, metric, value, seed."""

    seed: int = 0
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, split: str, metric: str, value: float) -> None:
        self.rows.append(
            {"step": step, "split": split, "metric": metric, "value": float(value), "seed": self.seed}
        )

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_LOG_COLUMNS)

    def wide(self) -> pd.DataFrame:
        """One row per logged step with columns like val_ctc, val_wer, train_loss."""
        frame = self.frame()
        if frame.empty:
            return pd.DataFrame(columns=["step"])
        frame["column"] = frame["split"] + "_" + frame["metric"]
        wide = frame.pivot_table(index="step", columns="column", values="value", aggfunc="last")
        wide.columns.name = None
        return wide.reset_index()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricLog":
        frame = pd.read_csv(path)
        if list(frame.columns) != METRIC_LOG_COLUMNS:
            raise ReportSchemaError(f"{path}: columns {list(frame.columns)} do not match {METRIC_LOG_COLUMNS}")
        seed = int(frame["seed"].iloc[0]) if not frame.empty else 0
        return cls(seed=seed, rows=frame.to_dict("records"))


@dataclass
class TrainResult:
    checkpoint: Path
    log: MetricLog
    best_value: float
    steps: int


# --- shared machinery ---------------------------------------------------------


def _lr_schedule(cfg: TrainSection) -> Callable[[int], float]:
    if cfg.scheduler == "noam":
        return lambda step: noam_lr(step, cfg.lr, cfg.warmup_steps, cfg.min_lr)
    return lambda step: cfg.lr


def _adam(cfg: TrainSection) -> AdamState:
    return AdamState(beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)


def _evaluate(graph: Graph, feeds: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    try:
        return forward_eval(graph, feeds)
    except NonFiniteError as exc:
        raise TrainingAborted(f"training diverged: first non-finite value at {exc.node_label}") from exc


def train_step(graph: Graph, loss: int, feeds: dict[str, np.ndarray], state: AdamState, lr: float) -> float:
    """Forward, backward and one Adam update; returns the loss before the update."""
    _evaluate(graph, feeds)
    value = float(graph.value(loss))
    grads = backward(graph, loss)
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted(f"training diverged: non-finite gradient for parameter '{name}'")
    adam_step(state, graph.params, grads, lr)
    return value


def batch_feeds(batch: Batch) -> dict[str, np.ndarray]:
    feeds = encoder_feeds(batch.lengths, batch.specs.shape[1])
    feeds["features"] = batch.specs
    return feeds


def ctc_feeds(batch: Batch) -> dict[str, np.ndarray]:
    feeds = batch_feeds(batch)
    longest = max(1, max(len(t) for t in batch.texts))
    targets = np.zeros((batch.size, longest))
    for n, text in enumerate(batch.texts):
        targets[n, : len(text)] = text
    feeds["targets"] = targets
    feeds["input_lengths"] = np.array([subsampled_length(int(t)) for t in batch.lengths])
    feeds["target_lengths"] = np.array([len(t) for t in batch.texts])
    return feeds


def l1_feeds(batch: Batch) -> dict[str, np.ndarray]:
    feeds = batch_feeds(batch)
    feeds["target"] = batch.targets
    feeds["loss_mask"] = batch.pad_mask[:, :, None]
    return feeds


def _epoch_batches(
    corpus: Corpus, split: str, cfg: TrainSection, inputs: FeatureFn, seed: int | None, targets: FeatureFn | None = None
) -> Iterator[Batch]:
    return make_batches(
        corpus.rows(split),
        cfg.batch_size,
        corpus.stats,
        shuffle_seed=seed,
        inputs=inputs,
        targets=targets,
        alphabet=corpus.alphabet,
        max_frames=cfg.max_frames,
    )


# --- CTC models ---------------------------------------------------------------


def validate_asr(
    model: AsrModel, graph: Graph, corpus: Corpus, split: str, cfg: TrainSection, inputs: FeatureFn
) -> tuple[float, float]:
    """Dataset-mean CTC loss and mean greedy WER over a split."""
    loss_sum, wer_sum, count = 0.0, 0.0, 0
    rows = {row.id: row for row in corpus.rows(split)}
    for batch in _epoch_batches(corpus, split, cfg, inputs, seed=None):
        outputs = _evaluate(graph, ctc_feeds(batch))
        loss_sum += float(outputs["loss"]) * batch.size
        log_probs = outputs["log_probs"]
        for n, row_id in enumerate(batch.ids):
            t_prime = subsampled_length(int(batch.lengths[n]))
            hyp = greedy_decode(log_probs[n, :t_prime], corpus.alphabet).text
            ref = rows[row_id].text.split()
            wer_sum += wer(ref, to_words(hyp, corpus.word_length))
        count += batch.size
    if count == 0:
        raise TrainingAborted(f"no usable rows in the '{split}' split")
    return loss_sum / count, wer_sum / count


def _train_ctc(
    model: AsrModel,
    corpus: Corpus,
    cfg: TrainSection,
    inputs: dict[str, FeatureFn],
    out_path: Path,
    seed: int,
    stop_wer: float | None = None,
    extra_meta: dict | None = None,
) -> TrainResult:
    graph, loss = model.training_graph()
    state = _adam(cfg)
    lr_at = _lr_schedule(cfg)
    log = MetricLog(seed=seed)
    shuffle = Rng(seed)
    best = (np.inf, np.inf)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _epoch_batches(corpus, "train", cfg, inputs["train"], shuffle.next()):
            losses.append(train_step(graph, loss, ctc_feeds(batch), state, lr_at(state.step + 1)))
        if not losses:
            raise TrainingAborted("no usable rows in the 'train' split")
        log.add(state.step, "train", "loss", float(np.mean(losses)))
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        val_ctc, val_wer = validate_asr(model, graph, corpus, "val", cfg, inputs["val"])
        log.add(state.step, "val", "ctc", val_ctc)
        log.add(state.step, "val", "wer", val_wer)
        logger.info("epoch %d step %d: train %.4f val_ctc %.4f val_wer %.3f", epoch, state.step, losses[-1], val_ctc, val_wer)
        if (val_wer, val_ctc) < best:
            best = (val_wer, val_ctc)
            model.save(out_path, {"step": state.step, "val_wer": val_wer, "val_ctc": val_ctc, **(extra_meta or {})})
        if stop_wer is not None and val_wer <= stop_wer:
            logger.info("reached val WER %.3f <= %.3f after %d epochs", val_wer, stop_wer, epoch)
            break
    return TrainResult(out_path, log, best[0], state.step)


def pretrain_backbone(
    corpus: Corpus, enc_cfg: EncoderConfig, cfg: PretrainSection, out_dir: str | Path, seed: int = 0
) -> TrainResult:
    """
    Train encoder + CTC head on clean audio until the validation WER target
    or the epoch limit. The best checkpoint is saved even when the target is
    missed.
    """
    out_dir = Path(out_dir)
    encoder = ConformerEncoder(enc_cfg, seed=seed, dtype=TRAIN_DTYPE)
    model = AsrModel(encoder, corpus.stats, corpus.alphabet, seed=seed)
    clean = corpus.store.clean
    result = _train_ctc(
        model, corpus, cfg, {"train": clean, "val": clean}, out_dir / "backbone.ckpt", seed, stop_wer=cfg.target_wer
    )
    if result.best_value > cfg.target_wer:
        logger.warning(
            "backbone did not converge: best val WER %.3f above target %.3f; checkpoint saved anyway",
            result.best_value,
            cfg.target_wer,
        )
    result.log.save(out_dir / "pretrain_log.csv")
    return result


def train_asr(
    corpus: Corpus,
    enc_cfg: EncoderConfig,
    cfg: AsrSection,
    out_dir: str | Path,
    seed: int = 0,
    frontend: CleancoderModel | None = None,
) -> TrainResult:
    """
    Train a fresh encoder + CTC head with the Noam schedule. With a frontend,
    the model sees the frontend's denoised features, computed once per row.
    """
    out_dir = Path(out_dir)
    encoder = ConformerEncoder(enc_cfg, seed=seed, dtype=TRAIN_DTYPE)
    model = AsrModel(encoder, corpus.stats, corpus.alphabet, seed=seed)
    if frontend is not None:
        threads = eval_threads()
        denoised = {}
        for split in ("train", "val"):
            denoised.update(denoise_manifest(frontend, corpus.rows(split), corpus.store, threads))
        logger.info("cached frontend features for %d rows", len(denoised))
        inputs = {"train": lambda row: denoised[row.id], "val": lambda row: denoised[row.id]}
        name = "asr_frontend"
    else:
        source = corpus.store.noisy if cfg.train_on == "noisy" else corpus.store.clean
        inputs = {"train": source, "val": source}
        name = "asr_baseline"
    result = _train_ctc(
        model, corpus, cfg, inputs, out_dir / f"{name}.ckpt", seed, extra_meta={"frontend": frontend is not None}
    )
    result.log.save(out_dir / f"{name}_log.csv")
    return result


# --- frontend -----------------------------------------------------------------


def validate_frontend(graph: Graph, corpus: Corpus, split: str, cfg: TrainSection) -> float:
    """Masked L1 over every real (frame, bin) cell of the split, normalised domain."""
    total, cells = 0.0, 0.0
    for batch in _epoch_batches(corpus, split, cfg, corpus.store.noisy, None, targets=corpus.store.clean):
        outputs = _evaluate(graph, l1_feeds(batch))
        weight = float(batch.pad_mask.sum())
        total += float(outputs["loss"]) * weight
        cells += weight
    if cells == 0:
        raise TrainingAborted(f"no usable rows in the '{split}' split")
    return total / cells


def train_frontend(
    model: CleancoderModel, corpus: Corpus, cfg: FrontendSection, out_dir: str | Path, seed: int = 0
) -> TrainResult:
    """Fit the PWS and Highway decoder on noisy -> clean pairs; the encoder stays frozen."""
    out_dir = Path(out_dir)
    out_path = out_dir / "frontend.ckpt"
    graph, loss = model.training_graph()
    state = _adam(cfg)
    lr_at = _lr_schedule(cfg)
    log = MetricLog(seed=seed)
    shuffle = Rng(seed)

    best = validate_frontend(graph, corpus, "val", cfg)
    log.add(0, "val", "l1", best)
    model.save(out_path, {"step": 0, "val_l1": best})
    logger.info("initial val L1 %.4f", best)

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in _epoch_batches(
            corpus, "train", cfg, corpus.store.noisy, shuffle.next(), targets=corpus.store.clean
        ):
            losses.append(train_step(graph, loss, l1_feeds(batch), state, lr_at(state.step + 1)))
        if not losses:
            raise TrainingAborted("no usable rows in the 'train' split")
        log.add(state.step, "train", "loss", float(np.mean(losses)))
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        val_l1 = validate_frontend(graph, corpus, "val", cfg)
        log.add(state.step, "val", "l1", val_l1)
        logger.info("epoch %d step %d: train %.4f val_l1 %.4f", epoch, state.step, losses[-1], val_l1)
        if val_l1 < best:
            best = val_l1
            model.save(out_path, {"step": state.step, "val_l1": val_l1})
    log.save(out_dir / "frontend_log.csv")
    return TrainResult(out_path, log, best, state.step)
