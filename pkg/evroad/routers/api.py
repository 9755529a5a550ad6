import os
import tempfile
from typing import Any, Dict, List, Optional

from fastapi import APIRouter, File, Form, UploadFile
from pydantic import BaseModel, ConfigDict

from evroad.core.logger import get_logger
from evroad.services.predictor import get_predictor
from evroad.services.pretrain import calibrate_from_entropies, ssl_label, window_entropies
from evroad.services.stream_io import parse_event_text, window_stream

router = APIRouter()
logger = get_logger(__name__)

# Models
class StatusResponse(BaseModel):
    model_loaded: bool
    checkpoint: Optional[str] = None
    architecture: Optional[Dict[str, Any]] = None
    param_count: Optional[int] = None
    flops_per_window: Optional[float] = None

    model_config = ConfigDict(protected_namespaces=())

class PredictRequest(BaseModel):
    width: int
    height: int
    events: List[List[int]]

class PredictResponse(BaseModel):
    logits: List[float]
    probs: List[float]
    label: int

class WindowLabel(BaseModel):
    index: int
    entropy: float
    label: int

class SslLabelResponse(BaseModel):
    threshold: float
    windows: List[WindowLabel]
    dropped_events: int

class BenchResponse(BaseModel):
    params: int
    flops: float
    mean_s: float
    median_s: float
    std_s: float
    windows_per_s: float
    n_runs: int


# Routes
@router.get("/status", response_model=StatusResponse)
async def get_status():
    """Loaded checkpoint and its cost figures"""
    return get_predictor().get_status()

@router.post("/predict", response_model=PredictResponse)
def predict(request: PredictRequest):
    """Classify one event window"""
    return get_predictor().predict(request.width, request.height, request.events)

@router.post("/ssl-labels", response_model=SslLabelResponse)
def ssl_labels(file: UploadFile = File(...), n: int = Form(50), threshold: Optional[float] = Form(None)):
    """Polarity-entropy pretext labels for an uploaded event file"""
    fd, tmp_path = tempfile.mkstemp(suffix=".events")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(file.file.read())
        geom, events = parse_event_text(tmp_path)
    finally:
        os.remove(tmp_path)

    result = window_stream(events, n, geom)
    entropies = window_entropies(result.windows)
    a = threshold if threshold is not None else calibrate_from_entropies(entropies)
    logger.info(f"Labelled {len(entropies)} uploaded windows with threshold {a:.6f}")
    return {
        "threshold": a,
        "windows": [{"index": i, "entropy": h, "label": ssl_label(h, a)} for i, h in enumerate(entropies)],
        "dropped_events": result.dropped,
    }

@router.post("/bench", response_model=BenchResponse)
def run_bench(runs: int = 20, warmup: int = 3):
    """Time the loaded model's float32 forward pass"""
    report = get_predictor().bench(n_runs=runs, n_warmup=warmup)
    return {
        "params": report.param_count,
        "flops": report.flops,
        "mean_s": report.mean_s,
        "median_s": report.median_s,
        "std_s": report.std_s,
        "windows_per_s": report.windows_per_s,
        "n_runs": report.n_runs,
    }
