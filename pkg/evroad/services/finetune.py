"""Road segmentation fine-tuning, evaluation and inference benchmarking."""
import time
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from evroad.core.config import ModelConfig, TrainConfig
from evroad.core.errors import ConfigError
from evroad.core.logger import get_logger
from evroad.core.utils import write_csv
from evroad.services.events import DAVIS346, EventWindow, SensorGeometry, synth_moving_edge
from evroad.services.network import (
    ModelParams,
    as_leaves,
    count_flops,
    count_params,
    forward_tensor,
    init_model,
    swap_head,
    window_tensors,
)
from evroad.services.pretrain import EpochStats, make_samples, train_epochs
from evroad.services.stream_io import window_stream

logger = get_logger(__name__)

SEG_HEAD = "segmentation_head"


#-------------------------------------------------
# Metrics
#-------------------------------------------------
@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary counts with road (1) as the positive class."""
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], truth: Sequence[int]) -> "ConfusionMatrix":
        if len(predicted) != len(truth):
            raise ConfigError(f"{len(predicted)} predictions for {len(truth)} labels")
        pred = np.asarray(predicted, dtype=int)
        true = np.asarray(truth, dtype=int)
        return cls(
            tp=int(np.sum((pred == 1) & (true == 1))),
            fp=int(np.sum((pred == 1) & (true == 0))),
            fn=int(np.sum((pred == 0) & (true == 1))),
            tn=int(np.sum((pred == 0) & (true == 0))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @staticmethod
    def _iou(hits: int, false_pos: int, false_neg: int) -> float:
        union = hits + false_pos + false_neg
        if union == 0:
            # class absent from both truth and predictions
            return 1.0 if hits + false_pos == 0 else 0.0
        return hits / union

    @property
    def iou_road(self) -> float:
        return self._iou(self.tp, self.fp, self.fn)

    @property
    def iou_background(self) -> float:
        return self._iou(self.tn, self.fn, self.fp)

    @property
    def miou(self) -> float:
        return 0.5 * (self.iou_road + self.iou_background)


class EvalReport(NamedTuple):
    accuracy: float
    miou: float
    confusion: ConfusionMatrix

    def csv_row(self) -> tuple:
        cm = self.confusion
        return (self.accuracy, self.miou, cm.tp, cm.fp, cm.fn, cm.tn)


EVAL_HEADER = ("accuracy", "miou", "tp", "fp", "fn", "tn")


def predict_labels(params: ModelParams, windows: Sequence[EventWindow]) -> List[int]:
    leaves = as_leaves(params)
    preds = []
    for w in windows:
        feats, deltas = window_tensors(w, params.dtype)
        logits = forward_tensor(leaves, params.config, feats, deltas).data
        preds.append(int(np.argmax(logits)))
    return preds


def evaluate(params: ModelParams, windows: Sequence[EventWindow], labels: Sequence[int]) -> EvalReport:
    if not windows:
        raise ConfigError("evaluation set is empty")
    cm = ConfusionMatrix.from_predictions(predict_labels(params, windows), labels)
    report = EvalReport(cm.accuracy, cm.miou, cm)
    logger.info(f"Evaluated {cm.total} windows: accuracy {report.accuracy:.4f}, mIoU {report.miou:.4f}")
    return report


def write_eval_csv(path: str, report: EvalReport) -> None:
    write_csv(path, EVAL_HEADER, [report.csv_row()])


#-------------------------------------------------
# Fine-tuning
#-------------------------------------------------
@dataclass
class FinetuneResult:
    params: ModelParams
    history: List[EpochStats]
    n_samples: int


def finetune(params: ModelParams, windows: Sequence[EventWindow], labels: Sequence[int],
             config: TrainConfig, threads: int = 1) -> FinetuneResult:
    """Train every tensor on labelled windows; the input params are left untouched."""
    if params.config.head != SEG_HEAD:
        raise ConfigError(f"fine-tuning needs the {SEG_HEAD}, model has {params.config.head}")
    if not windows:
        raise ConfigError("fine-tuning dataset is empty")
    if len(windows) != len(labels):
        raise ConfigError(f"{len(labels)} labels for {len(windows)} windows")

    limit = config.max_samples or len(windows)
    if len(windows) > limit:
        logger.info(f"Using the first {limit} of {len(windows)} labelled windows")
    samples = make_samples(windows[:limit], labels[:limit], params.dtype)
    trained, history = train_epochs(params, samples, config, threads, stage="finetune")
    return FinetuneResult(trained, history, len(samples))


def epochs_to_reach(history: Sequence[EpochStats], target_loss: float) -> Optional[int]:
    """Number of epochs until the mean loss first drops to ``target_loss``."""
    for stats in history:
        if stats.mean_loss <= target_loss:
            return stats.epoch + 1
    return None


@dataclass
class InitComparison:
    seed: int
    pretrained: EvalReport
    random: EvalReport
    pretrained_history: List[EpochStats]
    random_history: List[EpochStats]


def compare_initializations(pretrained: ModelParams, train_windows: Sequence[EventWindow],
                            train_labels: Sequence[int], test_windows: Sequence[EventWindow],
                            test_labels: Sequence[int], config: TrainConfig,
                            seeds: Sequence[int] = (0, 1, 2, 3, 4), threads: int = 1) -> List[InitComparison]:
    """Fine-tune from pretrained weights and from scratch under the same seeds."""
    results = []
    for seed in seeds:
        run_cfg = config.model_copy(update={"seed": seed})
        warm = pretrained if pretrained.config.head == SEG_HEAD else swap_head(pretrained, SEG_HEAD, seed)
        cold = init_model(warm.config, seed=seed, dtype=pretrained.dtype)

        warm_run = finetune(warm, train_windows, train_labels, run_cfg, threads)
        cold_run = finetune(cold, train_windows, train_labels, run_cfg, threads)
        comparison = InitComparison(
            seed=seed,
            pretrained=evaluate(warm_run.params, test_windows, test_labels),
            random=evaluate(cold_run.params, test_windows, test_labels),
            pretrained_history=warm_run.history,
            random_history=cold_run.history,
        )
        logger.info(f"Seed {seed}: pretrained accuracy {comparison.pretrained.accuracy:.4f}, "
                    f"random accuracy {comparison.random.accuracy:.4f}")
        results.append(comparison)
    return results


#-------------------------------------------------
# Benchmark
#-------------------------------------------------
BENCH_HEADER = ("params", "flops", "mean_s", "median_s", "std_s", "windows_per_s", "n_runs")


@dataclass
class BenchReport:
    param_count: int
    flops: float
    mean_s: float
    median_s: float
    std_s: float
    windows_per_s: float
    n_runs: int

    def csv_row(self) -> tuple:
        return (self.param_count, self.flops, self.mean_s, self.median_s,
                self.std_s, self.windows_per_s, self.n_runs)


def bench(params: ModelParams, config: Optional[ModelConfig] = None, n_warmup: int = 3,
          n_runs: int = 20, seed: int = 0) -> BenchReport:
    """Time single-window float32 forward passes on synthetic DAVIS-sized windows."""
    if n_runs < 1 or n_warmup < 0:
        raise ConfigError(f"need n_runs >= 1 and n_warmup >= 0, got {n_runs}, {n_warmup}")
    config = config or params.config
    p32 = params.astype(np.float32)
    leaves = as_leaves(p32)

    geom = SensorGeometry(*DAVIS346)
    events, _ = synth_moving_edge(geom, config.n * (n_warmup + n_runs), seed=seed)
    windows = window_stream(events, config.n, geom).windows
    inputs = [window_tensors(w, np.float32) for w in windows]

    for feats, deltas in inputs[:n_warmup]:
        forward_tensor(leaves, config, feats, deltas)
    times = []
    for feats, deltas in inputs[n_warmup:]:
        start = time.perf_counter()
        forward_tensor(leaves, config, feats, deltas)
        times.append(time.perf_counter() - start)

    arr = np.asarray(times)
    mean_s = float(arr.mean())
    report = BenchReport(
        param_count=count_params(config),
        flops=count_flops(config).total,
        mean_s=mean_s,
        median_s=float(np.median(arr)),
        std_s=float(arr.std()),
        windows_per_s=1.0 / mean_s if mean_s > 0 else float("inf"),
        n_runs=len(times),
    )
    logger.info(f"Bench: {report.param_count} params, {report.flops / 1e9:.4f} GFLOPs, "
                f"median {report.median_s * 1e3:.3f} ms over {report.n_runs} runs")
    return report


def write_bench_csv(path: str, report: BenchReport) -> None:
    write_csv(path, BENCH_HEADER, [report.csv_row()])
