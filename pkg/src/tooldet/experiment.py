"""In-memory synthetic experiments: generate, train, detect and evaluate in one call."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import generate_sequences, held_out_sequences, sequence_folds, sequence_samples
from .detector import detect
from .evaluate import EvalReport, evaluate
from .model import TwoStreamDetector
from .trainer import LogEntry, train


@dataclass
class ExperimentResult:
    report: EvalReport
    history: list[LogEntry]
    model: TwoStreamDetector
    train_seconds: float
    detections: dict

    @property
    def ap(self) -> float:
        return self.report.ap


def detect_all(model: TwoStreamDetector, samples, cfg: RunConfig) -> tuple[dict, dict]:
    """Detections and wall-clock seconds per frame id."""
    dets, seconds = {}, {}
    for s in samples:
        flow = s.flow_image if model.config.two_stream else None
        d, sec = detect(model, s.image, flow, cfg.detect.score_thresh, cfg.detect.nms_thresh, s.frame_id)
        dets[s.frame_id] = d
        seconds[s.frame_id] = sec
    return dets, seconds


def train_and_evaluate(cfg: RunConfig, train_samples, test_samples) -> ExperimentResult:
    model = TwoStreamDetector(cfg.model, seed=cfg.seed)
    start = time.perf_counter()
    history = train(model, train_samples, cfg.train_config())
    elapsed = time.perf_counter() - start
    dets, seconds = detect_all(model, test_samples, cfg)
    report = evaluate({s.frame_id: s.annotation for s in test_samples}, dets, seconds,
                      cfg.eval.iou_thresh, cfg.eval.eleven_point)
    return ExperimentResult(report, history, model, elapsed, dets)


def _samples(seqs, ids, cfg: RunConfig):
    out = []
    for i in ids:
        out.extend(sequence_samples(seqs[i], cfg.data.flow_source, cfg.data.flow_alpha, cfg.data.flow_iterations))
    return out


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Generate ``data.n_sequences`` sequences, hold out ``data.n_test`` whole, train and score."""
    seqs = generate_sequences(cfg.data.n_sequences, cfg.scene, cfg.seed)
    test_ids = held_out_sequences(len(seqs), cfg.data.n_test, cfg.seed)
    train_ids = [i for i in range(len(seqs)) if i not in test_ids]
    return train_and_evaluate(cfg, _samples(seqs, train_ids, cfg), _samples(seqs, sorted(test_ids), cfg))


def cross_validate(cfg: RunConfig, k: int | None = None) -> list[float]:
    """AP of each of ``k`` randomized sequence-level train/test folds."""
    k = k or cfg.eval.folds
    seqs = generate_sequences(cfg.data.n_sequences, cfg.scene, cfg.seed)
    aps = []
    for fold in sequence_folds(len(seqs), k, cfg.seed):
        train_ids = [i for i in range(len(seqs)) if i not in fold]
        result = train_and_evaluate(cfg, _samples(seqs, train_ids, cfg), _samples(seqs, sorted(fold), cfg))
        aps.append(result.ap)
    return aps


def summarize(aps) -> str:
    aps = np.asarray(aps, dtype=np.float64)
    return f"mean {aps.mean():.4f}  min {aps.min():.4f}  max {aps.max():.4f}  n {aps.size}"
