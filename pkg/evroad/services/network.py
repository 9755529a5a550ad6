"""Event-window transformer: parameters, forward pass, head swap and cost accounting."""
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np
from pydantic import ValidationError

from evroad.core.config import ModelConfig
from evroad.core.errors import ConfigError, ShapeError
from evroad.core.logger import get_logger
from evroad.services import tensor as T
from evroad.services.attention import BETA_INIT, PRIOR_NAMES, matched_sigma_raw, multi_head_tensor, softplus_inverse
from evroad.services.events import EventWindow, event_features, window_deltas
from evroad.services.tensor import Tensor

logger = get_logger(__name__)

N_FEATURES = 4
POS_STD = 0.02
HEAD_KINDS = ("ssl_classifier", "segmentation_head")


def _validated(config: ModelConfig) -> ModelConfig:
    try:
        return ModelConfig.model_validate(config.model_dump())
    except ValidationError as e:
        raise ConfigError(f"invalid model config: {e}") from e


#-------------------------------------------------
# Parameter layout
#-------------------------------------------------
def _dense_chain(prefix: str, dims_in: int, dims: List[int]) -> List[Tuple[str, int, int]]:
    layers, fan_in = [], dims_in
    for i, out in enumerate(dims):
        layers.append((f"{prefix}.{i}", fan_in, out))
        fan_in = out
    return layers


def head_layers(config: ModelConfig) -> List[Tuple[str, int, int]]:
    return _dense_chain("head", config.trunk_ffn[-1], config.head_dims)


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered tensor names and shapes; a pure function of the config."""
    d_e, n, h = config.d_e, config.n, config.n_heads
    shapes = {
        "input.weight": (d_e, N_FEATURES),
        "input.bias": (d_e,),
        "pos_embedding": (n, d_e),
    }
    for b in range(config.n_blocks):
        p = f"blocks.{b}"
        shapes[f"{p}.ln1.scale"] = (d_e,)
        shapes[f"{p}.ln1.shift"] = (d_e,)
        for name in ("w_q", "w_k", "w_v"):
            shapes[f"{p}.attn.{name}"] = (d_e, d_e)
        for name in ("pi_logits", "gamma_logits", "beta_raw"):
            shapes[f"{p}.attn.{name}"] = (h, n)
        for name in ("sigma_k_raw", "sigma_q_raw", "sigma_delta_raw"):
            shapes[f"{p}.attn.{name}"] = (h,)
        shapes[f"{p}.attn.w_o"] = (d_e, d_e)
        shapes[f"{p}.attn.b_o"] = (d_e,)
        shapes[f"{p}.ln2.scale"] = (d_e,)
        shapes[f"{p}.ln2.shift"] = (d_e,)
        for prefix, fan_in, out in _dense_chain(f"{p}.ffn", d_e, config.block_ffn):
            shapes[f"{prefix}.weight"] = (out, fan_in)
            shapes[f"{prefix}.bias"] = (out,)
    for prefix, fan_in, out in _dense_chain("trunk", d_e, config.trunk_ffn) + head_layers(config):
        shapes[f"{prefix}.weight"] = (out, fan_in)
        shapes[f"{prefix}.bias"] = (out,)
    return shapes


def is_head_tensor(name: str) -> bool:
    return name.startswith("head.")


def decays(name: str) -> bool:
    """Weight decay applies to projection and dense weights only."""
    return name.endswith((".weight", ".w_q", ".w_k", ".w_v", ".w_o"))


class ModelParams:
    """Named parameter arrays of one network, in config order."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]):
        self.config = config
        self.tensors: Dict[str, np.ndarray] = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        tensors = dict(self.tensors)
        tensors.update(updates)
        return ModelParams(self.config, tensors)

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def checksums(self) -> Dict[str, str]:
        return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest() for k, v in self.tensors.items()}


#-------------------------------------------------
# Initialisation
#-------------------------------------------------
def _init_tensor(name: str, shape: Tuple[int, ...], config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name == "pos_embedding":
        return rng.normal(0.0, POS_STD, size=shape)
    if leaf == "scale":
        return np.ones(shape)
    if leaf == "shift":
        return np.zeros(shape)
    if leaf in ("pi_logits", "gamma_logits"):
        return np.zeros(shape)
    if leaf == "beta_raw":
        return np.full(shape, softplus_inverse(BETA_INIT))
    if leaf in ("sigma_k_raw", "sigma_q_raw", "sigma_delta_raw"):
        return np.full(shape, matched_sigma_raw(config.head_dim))
    fan_in = shape[1] if len(shape) == 2 else config.d_e
    if leaf == "bias":
        # fan-in of the matching weight
        fan_in = _bias_fan_in(name, config)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _bias_fan_in(name: str, config: ModelConfig) -> int:
    return param_shapes(config)[name[:-len("bias")] + "weight"][1]


def _init_named(shapes: Mapping[str, Tuple[int, ...]], config: ModelConfig, seed: int,
                dtype=np.float64) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    # Values are drawn representable in float32 so checkpoints round-trip bitwise
    return {name: _init_tensor(name, shape, config, rng).astype(np.float32).astype(dtype)
            for name, shape in shapes.items()}


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    config = _validated(config)
    params = ModelParams(config, _init_named(param_shapes(config), config, seed, dtype))
    logger.debug(f"Initialised {len(params)} tensors ({params.count()} values) with seed {seed}")
    return params


def swap_head(params: ModelParams, new_head_kind: str, seed: int = 0) -> ModelParams:
    """Replace the task head; base tensors are carried over untouched."""
    if new_head_kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {new_head_kind!r}")
    if params.config.head == new_head_kind:
        logger.warning(f"Head is already {new_head_kind}; swap is a no-op")
        return params
    config = params.config.model_copy(update={"head": new_head_kind})
    head_shapes = {k: v for k, v in param_shapes(config).items() if is_head_tensor(k)}
    tensors = {k: v for k, v in params.items() if not is_head_tensor(k)}
    tensors.update(_init_named(head_shapes, config, seed, params.dtype))
    logger.info(f"Swapped head {params.config.head} -> {new_head_kind}")
    return ModelParams(config, tensors)


#-------------------------------------------------
# Forward pass
#-------------------------------------------------
def window_tensors(window: EventWindow, dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    return event_features(window).astype(dtype), window_deltas(window).astype(dtype)


def _dense(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, T.transpose(p[f"{prefix}.weight"])), p[f"{prefix}.bias"])


def mean_pool(x: Tensor) -> Tensor:
    return T.mean(x, axis=0, keepdims=True)


def forward_tensor(p: Mapping[str, Tensor], config: ModelConfig,
                   feats: np.ndarray, deltas: np.ndarray) -> Tensor:
    """Length-2 logits for one window, recorded on the active tape if any."""
    if feats.shape != (config.n, N_FEATURES):
        raise ShapeError(f"window of {feats.shape[0]} events, model expects {config.n}")
    x = T.add(_dense(Tensor(feats), p, "input"), p["pos_embedding"])

    for b in range(config.n_blocks):
        pre = f"blocks.{b}"
        h = T.layer_norm(x, p[f"{pre}.ln1.scale"], p[f"{pre}.ln1.shift"])
        attn = {name: p[f"{pre}.attn.{name}"] for name in ("w_q", "w_k", "w_v", "w_o", "b_o") + PRIOR_NAMES}
        x = T.add(x, multi_head_tensor(h, attn, deltas, config.n_heads))
        h = T.layer_norm(x, p[f"{pre}.ln2.scale"], p[f"{pre}.ln2.shift"])
        last = len(config.block_ffn) - 1
        for i in range(len(config.block_ffn)):
            h = _dense(h, p, f"{pre}.ffn.{i}")
            if i < last:
                h = T.gelu(h)
        x = T.add(x, h)

    z = mean_pool(x)
    for i in range(len(config.trunk_ffn)):
        z = T.gelu(_dense(z, p, f"trunk.{i}"))
    layers = head_layers(config)
    for i, (prefix, _, _) in enumerate(layers):
        z = _dense(z, p, prefix)
        if i < len(layers) - 1:
            z = T.relu(z)
    return T.reshape(z, (config.head_dims[-1],))


def as_leaves(params: ModelParams, requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def forward(params: ModelParams, window: EventWindow) -> np.ndarray:
    if len(window) != params.config.n:
        raise ShapeError(f"window of {len(window)} events, model expects {params.config.n}")
    feats, deltas = window_tensors(window, params.dtype)
    return forward_tensor(as_leaves(params), params.config, feats, deltas).data


#-------------------------------------------------
# Cost accounting
#-------------------------------------------------
def _dense_params(layers: List[Tuple[str, int, int]]) -> int:
    return sum(fan_in * out + out for _, fan_in, out in layers)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; equals ``init_model(config).count()``."""
    config = _validated(config)
    d_e, n, h = config.d_e, config.n, config.n_heads
    per_block = (
        4 * d_e                      # two LayerNorm scale/shift pairs
        + 3 * d_e * d_e              # query/key/value projections
        + 3 * h * n + 3 * h          # per-position priors and per-head scales
        + d_e * d_e + d_e            # output projection
        + _dense_params(_dense_chain("ffn", d_e, config.block_ffn))
    )
    return (
        N_FEATURES * d_e + d_e
        + n * d_e
        + config.n_blocks * per_block
        + _dense_params(_dense_chain("trunk", d_e, config.trunk_ffn))
        + _dense_params(head_layers(config))
    )


FLOP_FORMULA = (
    "FLOPs = 2*MAC over matmuls. input: 2N(4d+d); per block: qkv 2N*3d^2, scores 2N^2 d, "
    "posterior terms 2hN^2, weighted values 2N^2 d, output 2N(d^2+d), ffn 2N*sum(in*out+out); "
    "trunk and head 2*sum(in*out+out) once per window after pooling. "
    "LayerNorm, GeLU and softmax elementwise work is not counted."
)


@dataclass
class FlopReport:
    total: float
    per_block: float
    breakdown: Dict[str, float] = field(default_factory=dict)
    formula: str = FLOP_FORMULA

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def count_flops(config: ModelConfig) -> FlopReport:
    config = _validated(config)
    d_e, n, h = config.d_e, config.n, config.n_heads
    block = {
        "qkv": 2.0 * n * 3 * d_e * d_e,
        "scores": 2.0 * n * n * d_e,
        "posterior_terms": 2.0 * h * n * n,
        "weighted_values": 2.0 * n * n * d_e,
        "output_projection": 2.0 * n * (d_e * d_e + d_e),
        "block_ffn": 2.0 * n * _dense_params(_dense_chain("ffn", d_e, config.block_ffn)),
    }
    per_block = sum(block.values())
    breakdown = {
        "input": 2.0 * n * (N_FEATURES * d_e + d_e),
        "blocks": per_block * config.n_blocks,
        "trunk": 2.0 * _dense_params(_dense_chain("trunk", d_e, config.trunk_ffn)),
        "head": 2.0 * _dense_params(head_layers(config)),
    }
    breakdown.update({f"block.{k}": v for k, v in block.items()})
    total = breakdown["input"] + breakdown["blocks"] + breakdown["trunk"] + breakdown["head"]
    return FlopReport(total=total, per_block=per_block, breakdown=breakdown)
