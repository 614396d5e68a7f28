"""
Cleancoder evaluation: spectrogram MAE and downstream WER per manifest row.

Both protocols produce one record per (row, condition) and never stop on a
bad row; the failure is recorded in the `error` column instead. The SNR
tables in pipeline.reports are computed from these records.

Several frontends can be evaluated side by side (e.g. the medium and large
Cleancoder); each one contributes a condition named after it.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from models.asr import AsrModel
from models.cleancoder import CleancoderModel, cleancoder_forward
from pipeline.batching import FeatureStore, to_words, tokenize
from pipeline.build_corpus import CorpusError, ManifestRow
from project_tools.ctc import TargetUnreachableError, ctc_loss, greedy_decode
from project_tools.dsp import WavFormatError, normalize, spec_mae
from project_tools.metrics import wer

logger = logging.getLogger(__name__)

MAE_COLUMNS = ["id", "snr_db", "noise_type", "condition", "mae", "error"]
WER_COLUMNS = ["id", "snr_db", "noise_type", "condition", "wer", "ctc_loss", "ref", "hyp", "error"]
ROW_ERRORS = (WavFormatError, CorpusError, ValueError, OSError)

NOISY, DENOISED = "noisy", "denoised"
NOISY_BASELINE, FRONTEND_DENOISED, CLEAN = "noisy-baseline", "frontend-denoised", "clean"
RESERVED_CONDITIONS = {NOISY, NOISY_BASELINE, CLEAN}

Frontends = CleancoderModel | Mapping[str, CleancoderModel] | None


def named_frontends(frontends: Frontends, default: str) -> dict[str, CleancoderModel]:
    """Condition name -> frontend; a bare model is labelled `default`."""
    if frontends is None:
        return {}
    if isinstance(frontends, CleancoderModel):
        return {default: frontends}
    clash = RESERVED_CONDITIONS.intersection(frontends)
    if clash:
        raise ValueError(f"frontend names {sorted(clash)} collide with baseline conditions")
    return dict(frontends)


def _record(row: ManifestRow, condition: str, **values) -> dict:
    return {
        "id": row.id,
        "snr_db": row.snr_db,
        "noise_type": row.noise_type,
        "condition": condition,
        "error": "",
        **values,
    }


def _fan_out(fn, rows: Sequence[ManifestRow], threads: int) -> list[dict]:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_row = list(pool.map(fn, rows))
    return [record for records in per_row for record in records]


def evaluate_mae(
    frontends: Frontends, rows: Sequence[ManifestRow], store: FeatureStore, threads: int = 1
) -> pd.DataFrame:
    """MAE(noisy, clean) and MAE(denoised, clean) per frontend, raw log-Mel domain."""
    models = named_frontends(frontends, DENOISED)
    if not models:
        raise ValueError("eval-mae needs at least one frontend")
    missing = [row.id for row in rows if not row.clean_path]
    if missing:
        raise CorpusError(f"MAE needs clean references; rows without clean_path: {missing[:5]}")
    conditions = [NOISY, *models]

    def one(row: ManifestRow) -> list[dict]:
        try:
            noisy, clean = store.noisy(row), store.clean(row)
            records = [_record(row, NOISY, mae=spec_mae(noisy, clean))]
            for name, frontend in models.items():
                denoised = cleancoder_forward(frontend, noisy)
                records.append(_record(row, name, mae=spec_mae(denoised, clean)))
            return records
        except ROW_ERRORS as exc:
            logger.warning("row %s failed: %s", row.id, exc)
            return [_record(row, condition, mae=np.nan, error=str(exc)) for condition in conditions]

    return pd.DataFrame(_fan_out(one, rows, threads), columns=MAE_COLUMNS)


def _baseline_condition(row: ManifestRow) -> str:
    return CLEAN if row.noisy_path == row.clean_path else NOISY_BASELINE


def _score(model: AsrModel, features: np.ndarray, row: ManifestRow, word_length: int) -> dict:
    log_probs = model.log_probs(normalize(features, model.stats))
    hyp_words = to_words(greedy_decode(log_probs, model.alphabet).text, word_length)
    ref_words = row.text.split()
    try:
        loss = ctc_loss(log_probs, tokenize(row.text, model.alphabet))
    except TargetUnreachableError:
        loss = np.nan
    return {
        "wer": wer(ref_words, hyp_words),
        "ctc_loss": loss,
        "ref": " ".join(ref_words),
        "hyp": " ".join(hyp_words),
    }


def evaluate_model(
    model: AsrModel,
    rows: Sequence[ManifestRow],
    store: FeatureStore,
    frontend: Frontends = None,
    threads: int = 1,
    word_length: int = 3,
) -> pd.DataFrame:
    """
    Greedy WER and CTC loss per row on the noisy audio and, for every
    frontend given, on its denoised features as well.
    """
    models = named_frontends(frontend, FRONTEND_DENOISED)

    def one(row: ManifestRow) -> list[dict]:
        conditions = [_baseline_condition(row), *models]
        try:
            noisy = store.noisy(row)
            records = [_record(row, conditions[0], **_score(model, noisy, row, word_length))]
            for name, denoiser in models.items():
                denoised = cleancoder_forward(denoiser, noisy)
                records.append(_record(row, name, **_score(model, denoised, row, word_length)))
            return records
        except ROW_ERRORS as exc:
            logger.warning("row %s failed: %s", row.id, exc)
            return [
                _record(row, condition, wer=np.nan, ctc_loss=np.nan, ref=row.text, hyp="", error=str(exc))
                for condition in conditions
            ]

    return pd.DataFrame(_fan_out(one, rows, threads), columns=WER_COLUMNS)
