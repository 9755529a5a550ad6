"""Polarity-entropy pretext labels, AdamW and the shared training loop."""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from evroad.core.config import SslConfig, TrainConfig
from evroad.core.errors import ConfigError, PreconditionError, TrainingError
from evroad.core.logger import get_logger
from evroad.core.utils import write_csv
from evroad.services import tensor as T
from evroad.services.events import EventWindow
from evroad.services.network import ModelParams, as_leaves, decays, forward_tensor, window_tensors
from evroad.services.tensor import Tape, Tensor

logger = get_logger(__name__)

LN2 = math.log(2.0)

# (features, deltas, label)
Sample = Tuple[np.ndarray, np.ndarray, int]


#-------------------------------------------------
# Pretext labels
#-------------------------------------------------
def positive_rate(w: EventWindow) -> float:
    """Fraction of positive events (the 1/N-normalised count)."""
    if len(w) < 1:
        raise PreconditionError("positive_rate needs at least one event")
    return sum(1 for e in w.events if e.p == 1) / len(w)


def polarity_entropy(p_plus: float) -> float:
    """Natural-log binary entropy with 0 log 0 = 0."""
    if not (0.0 <= p_plus <= 1.0):
        raise PreconditionError(f"p+ must lie in [0, 1], got {p_plus}")
    h = 0.0
    for p in (p_plus, 1.0 - p_plus):
        if p > 0.0:
            h -= p * math.log(p)
    return h


def ssl_label(h: float, a: float) -> int:
    return 1 if h > a else 0


def window_entropies(windows: Sequence[EventWindow]) -> List[float]:
    return [polarity_entropy(positive_rate(w)) for w in windows]


def calibrate_from_entropies(entropies: Sequence[float]) -> float:
    """Lower median of the entropies."""
    if len(entropies) < 2:
        raise PreconditionError(f"calibration needs at least 2 windows, got {len(entropies)}")
    values = sorted(entropies)
    if values[0] == values[-1]:
        raise ConfigError("all window entropies are identical; calibration is degenerate, use a fixed threshold")
    return values[(len(values) - 1) // 2]


def calibrate_threshold(windows: Sequence[EventWindow]) -> float:
    return calibrate_from_entropies(window_entropies(windows))


def label_windows(windows: Sequence[EventWindow], config: SslConfig) -> Tuple[List[int], float, List[float]]:
    """Pretext labels, the threshold used, and the window entropies."""
    entropies = window_entropies(windows)
    if config.threshold_mode == "fixed":
        a = config.threshold
    else:
        a = calibrate_from_entropies(entropies)
    labels = [ssl_label(h, a) for h in entropies]
    logger.info(f"Pretext threshold a={a:.6f}; {sum(labels)}/{len(labels)} windows labelled 1")
    return labels, a, entropies


#-------------------------------------------------
# Loss
#-------------------------------------------------
def cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label] through the stable log-softmax."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if label not in (0, 1) or logits.shape[-1] <= label:
        raise PreconditionError(f"label {label} invalid for logits of shape {logits.shape}")
    logp = T.log_softmax(logits)
    return T.neg(T.sum(T.slice_axis(logp, label, label + 1, axis=logp.ndim - 1)))


#-------------------------------------------------
# AdamW
#-------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Union[ModelParams, Mapping[str, np.ndarray]], grads: Mapping[str, np.ndarray],
               state: OptimizerState,
               decay_mask: Callable[[str], bool] = decays) -> Tuple[Union[ModelParams, Dict[str, np.ndarray]], OptimizerState]:
    """One decoupled-weight-decay Adam update; returns new arrays and a new state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for tensor {name}")

    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = theta
            continue
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        updated = theta
        if state.weight_decay and decay_mask(name):
            updated = updated - state.lr * state.weight_decay * theta
        updated = updated - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[name], new_m[name], new_v[name] = updated, m, v

    new_state = OptimizerState(state.lr, state.weight_decay, state.beta1, state.beta2, state.eps,
                               step, {**state.m, **new_m}, {**state.v, **new_v})
    if isinstance(params, ModelParams):
        return params.replace(new_params), new_state
    return new_params, new_state


#-------------------------------------------------
# Training loop
#-------------------------------------------------
@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    label1_fraction: float
    accuracy: float


def make_samples(windows: Sequence[EventWindow], labels: Sequence[int], dtype=np.float64) -> List[Sample]:
    if len(windows) != len(labels):
        raise ConfigError(f"{len(labels)} labels for {len(windows)} windows")
    return [(*window_tensors(w, dtype), int(y)) for w, y in zip(windows, labels)]


def loss_and_grads(params: ModelParams, sample: Sample) -> Tuple[float, Dict[str, np.ndarray], int]:
    """Loss, gradients and predicted class for one window on its own tape."""
    feats, deltas, label = sample
    leaves = as_leaves(params, requires_grad=True)
    with Tape() as tape:
        logits = forward_tensor(leaves, params.config, feats, deltas)
        loss = cross_entropy(logits, label)
    if not math.isfinite(loss.item()):
        raise TrainingError("loss is not finite")
    return loss.item(), tape.gradient(loss, leaves), int(np.argmax(logits.data))


def batch_gradients(params: ModelParams, batch: Sequence[Sample],
                    threads: int = 1) -> Tuple[List[float], Dict[str, np.ndarray], List[int]]:
    """Per-window losses and the mean gradient; summed in window order whatever the thread count."""
    if threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: loss_and_grads(params, s), batch))
    else:
        results = [loss_and_grads(params, s) for s in batch]

    total = {name: np.zeros_like(v) for name, v in params.items()}
    for _, grads, _ in results:
        for name, g in grads.items():
            total[name] += g
    scale = 1.0 / len(batch)
    return [r[0] for r in results], {k: v * scale for k, v in total.items()}, [r[2] for r in results]


def mean_loss(params: ModelParams, samples: Sequence[Sample]) -> float:
    leaves = as_leaves(params)
    losses = [cross_entropy(forward_tensor(leaves, params.config, f, d), y).item() for f, d, y in samples]
    return float(np.mean(losses))


def train_epochs(params: ModelParams, samples: Sequence[Sample], config: Union[SslConfig, TrainConfig],
                 threads: int = 1, stage: str = "train") -> Tuple[ModelParams, List[EpochStats]]:
    """Shuffled mini-batch AdamW over ``config.epochs`` epochs."""
    if not samples:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(config.seed)
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    label1 = sum(s[2] for s in samples) / len(samples)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses, correct = [], 0
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            batch_losses, grads, preds = batch_gradients(params, batch, threads)
            params, state = adamw_step(params, grads, state)
            losses.extend(batch_losses)
            correct += sum(int(p == s[2]) for p, s in zip(preds, batch))
        stats = EpochStats(epoch, float(np.mean(losses)), label1, correct / len(samples))
        history.append(stats)
        logger.info(f"[{stage}] epoch {epoch}: mean loss {stats.mean_loss:.4f}, accuracy {stats.accuracy:.3f}")
    return params, history


@dataclass
class PretrainResult:
    params: ModelParams
    history: List[EpochStats]
    threshold: float
    labels: List[int]


def pretrain(params: ModelParams, windows: Sequence[EventWindow], config: SslConfig,
             threads: int = 1) -> PretrainResult:
    if params.config.head != "ssl_classifier":
        raise ConfigError(f"pretraining needs the ssl_classifier head, model has {params.config.head}")
    if not windows:
        raise ConfigError("pretraining dataset is empty")
    labels, a, _ = label_windows(windows, config)
    samples = make_samples(windows, labels, params.dtype)
    trained, history = train_epochs(params, samples, config, threads, stage="pretrain")
    return PretrainResult(trained, history, a, labels)


def write_loss_history(path: str, history: Sequence[EpochStats]) -> None:
    write_csv(path, ("epoch", "mean_loss", "label1_fraction"),
              ((h.epoch, h.mean_loss, h.label1_fraction) for h in history))
