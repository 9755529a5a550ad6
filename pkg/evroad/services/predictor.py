#!/usr/bin/env python3
import threading
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from evroad.core.config import get_config
from evroad.core.errors import ConfigError, DataFormatError
from evroad.core.logger import get_logger
from evroad.services.events import Event, SensorGeometry, make_window
from evroad.services.finetune import BenchReport, bench
from evroad.services.network import ModelParams, count_flops, forward
from evroad.services.stream_io import load_checkpoint

logger = get_logger(__name__)


class ModelNotLoadedError(ConfigError):
    pass


class Predictor:
    #-------------------------------------------------
    # Initialization
    #-------------------------------------------------
    def __init__(self, checkpoint: Optional[str] = None):
        self.config = get_config()
        self.checkpoint_path = checkpoint or self.config.server.checkpoint
        self.params: Optional[ModelParams] = None
        self._lock = threading.Lock()

    #-------------------------------------------------
    # Model lifecycle
    #-------------------------------------------------
    @property
    def is_loaded(self) -> bool:
        return self.params is not None

    def _ensure_loaded(self) -> ModelParams:
        with self._lock:
            if self.params is None:
                if not self.checkpoint_path:
                    raise ModelNotLoadedError("No checkpoint configured; set server.checkpoint or POST a reload")
                self.params = load_checkpoint(self.checkpoint_path)
                logger.info(f"Predictor loaded {self.checkpoint_path}")
            return self.params

    def reload(self, path: str) -> ModelParams:
        """Swap in another checkpoint; the old model stays if loading fails."""
        params = load_checkpoint(path)
        with self._lock:
            self.params = params
            self.checkpoint_path = path
        logger.info(f"Predictor switched to {path}")
        return params

    def use_params(self, params: ModelParams, label: str = "<memory>") -> None:
        with self._lock:
            self.params = params
            self.checkpoint_path = label

    def get_status(self) -> Dict[str, Any]:
        params = self.params
        if params is None:
            return {"model_loaded": False, "checkpoint": self.checkpoint_path}
        return {
            "model_loaded": True,
            "checkpoint": self.checkpoint_path,
            "architecture": params.config.model_dump(),
            "param_count": params.count(),
            "flops_per_window": count_flops(params.config).total,
        }

    #-------------------------------------------------
    # Inference
    #-------------------------------------------------
    def predict(self, width: int, height: int, rows: Sequence[Sequence[int]]) -> Dict[str, Any]:
        """Classify one window given as ``[t, x, y, p]`` rows."""
        params = self._ensure_loaded()
        geom = SensorGeometry(width, height)
        events: List[Event] = []
        for i, row in enumerate(rows):
            if len(row) != 4:
                raise DataFormatError(f"event {i}: expected [t, x, y, p], got {len(row)} values")
            t, x, y, p = (int(v) for v in row)
            if p == 0:
                p = -1
            events.append(Event(x=x, y=y, t=t, p=p))
        logits = forward(params, make_window(events, geom))
        shifted = np.exp(logits - logits.max())
        probs = shifted / shifted.sum()
        return {
            "logits": [float(v) for v in logits],
            "probs": [float(v) for v in probs],
            "label": int(np.argmax(logits)),
        }

    def bench(self, n_runs: int = 20, n_warmup: int = 3) -> BenchReport:
        return bench(self._ensure_loaded(), n_warmup=n_warmup, n_runs=n_runs)


#-------------------------------------------------
# Singleton instance
#-------------------------------------------------
_predictor_instance = None


def get_predictor() -> Predictor:
    """Get singleton instance of Predictor"""
    global _predictor_instance

    if _predictor_instance is None:
        _predictor_instance = Predictor()

    return _predictor_instance


def reset_predictor() -> None:
    global _predictor_instance
    _predictor_instance = None
