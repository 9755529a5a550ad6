"""Probabilistic attention: a key posterior plus a spatial-distance posterior.

For query i and key j, with unit-norm rows and s_ij = q_i . k_j::

    D_i   = sum_k (gamma_k / sigma_q) exp(-1/sigma_q^2) exp(s_ik / sigma_q^2)
    key   = (pi_j / sigma_k) exp(-1/sigma_k^2) exp(s_ij / sigma_k^2) / D_i
    space = (beta_j / sigma_d) exp(-(1 - delta_ij)^2 / (2 sigma_d^2)) / D_i
    w_ij  = key + space

``pi`` and ``gamma`` are softmaxes of per-position logits, ``beta`` and the
three scales are softplus-constrained. Everything is evaluated in log space
with a log-sum-exp for D_i. Scores are not renormalised.
"""
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, Tuple

import numpy as np

from evroad.core.errors import ConfigError, PreconditionError, ShapeError
from evroad.services import tensor as T
from evroad.services.tensor import Tensor

SIGMA_FLOOR = 1e-3
BETA_INIT = 0.1

PRIOR_NAMES = ("pi_logits", "gamma_logits", "beta_raw", "sigma_k_raw", "sigma_q_raw", "sigma_delta_raw")


def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


def matched_sigma_raw(head_dim: int) -> float:
    """Raw scale whose constrained value is d^(1/4), so sigma^2 = sqrt(d)."""
    return softplus_inverse(head_dim ** 0.25 - SIGMA_FLOOR)


#-------------------------------------------------
# Parameter containers
#-------------------------------------------------
@dataclass(frozen=True)
class ProjectionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        if not (self.w_q.shape == self.w_k.shape == self.w_v.shape) or self.w_q.ndim != 2:
            raise ShapeError(f"projection weights disagree: {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")


@dataclass(frozen=True)
class AttentionPriors:
    """Per-head prior and scale parameters in unconstrained form."""
    pi_logits: np.ndarray
    gamma_logits: np.ndarray
    beta_raw: np.ndarray
    sigma_k_raw: float
    sigma_q_raw: float
    sigma_delta_raw: float

    @classmethod
    def matched(cls, n: int, head_dim: int, beta: float = BETA_INIT) -> "AttentionPriors":
        """Uniform pi and gamma, sigma_k = sigma_q = d^(1/4); beta=0 reduces to softmax attention."""
        raw_sigma = matched_sigma_raw(head_dim)
        beta_raw = softplus_inverse(beta) if beta > 0 else -np.inf
        return cls(
            pi_logits=np.zeros(n),
            gamma_logits=np.zeros(n),
            beta_raw=np.full(n, beta_raw),
            sigma_k_raw=raw_sigma,
            sigma_q_raw=raw_sigma,
            sigma_delta_raw=raw_sigma,
        )

    def with_beta_zero(self) -> "AttentionPriors":
        return replace(self, beta_raw=np.full(len(self.beta_raw), -np.inf))

    @property
    def n(self) -> int:
        return len(self.pi_logits)

    @property
    def pi(self) -> np.ndarray:
        return T._softmax(np.asarray(self.pi_logits, dtype=np.float64))

    @property
    def gamma(self) -> np.ndarray:
        return T._softmax(np.asarray(self.gamma_logits, dtype=np.float64))

    @property
    def beta(self) -> np.ndarray:
        return np.logaddexp(0.0, np.asarray(self.beta_raw, dtype=np.float64))

    @property
    def sigma_k(self) -> float:
        return float(np.logaddexp(0.0, self.sigma_k_raw)) + SIGMA_FLOOR

    @property
    def sigma_q(self) -> float:
        return float(np.logaddexp(0.0, self.sigma_q_raw)) + SIGMA_FLOOR

    @property
    def sigma_delta(self) -> float:
        return float(np.logaddexp(0.0, self.sigma_delta_raw)) + SIGMA_FLOOR

    def tensors(self) -> "PriorTensors":
        return PriorTensors(
            Tensor(self.pi_logits), Tensor(self.gamma_logits), Tensor(self.beta_raw),
            Tensor(np.array([self.sigma_k_raw])), Tensor(np.array([self.sigma_q_raw])),
            Tensor(np.array([self.sigma_delta_raw])),
        )


@dataclass(frozen=True)
class PriorTensors:
    pi_logits: Tensor
    gamma_logits: Tensor
    beta_raw: Tensor
    sigma_k_raw: Tensor
    sigma_q_raw: Tensor
    sigma_delta_raw: Tensor


#-------------------------------------------------
# Tape-level score computation
#-------------------------------------------------
def _log_sigma_and_inv_var(raw: Tensor) -> Tuple[Tensor, Tensor]:
    log_sigma = T.log(T.shift(T.softplus(raw), SIGMA_FLOOR))
    return log_sigma, T.exp(T.scale(log_sigma, -2.0))


def _check_deltas(deltas: np.ndarray, shape: Tuple[int, ...]) -> None:
    if deltas.shape != shape:
        raise ShapeError(f"deltas shape {deltas.shape} does not match scores {shape}")
    if np.any(deltas < 0.0) or np.any(deltas > 1.0):
        raise PreconditionError("spatial distances must be normalised to [0, 1]")


def log_gmm_denominator_tensor(S: Tensor, pri: PriorTensors) -> Tensor:
    """log D_i for every query row of the similarity matrix."""
    n = S.shape[1]
    log_sigma, inv_var = _log_sigma_and_inv_var(pri.sigma_q_raw)
    offset = T.sub(T.log_softmax(pri.gamma_logits), T.broadcast_scalar(T.add(log_sigma, inv_var), (n,)))
    return T.logsumexp_rows(T.add(T.mul(S, T.broadcast_scalar(inv_var, S.shape)), offset))


def key_term_tensor(S: Tensor, log_d: Tensor, pri: PriorTensors) -> Tensor:
    n = S.shape[1]
    log_sigma, inv_var = _log_sigma_and_inv_var(pri.sigma_k_raw)
    offset = T.sub(T.log_softmax(pri.pi_logits), T.broadcast_scalar(T.add(log_sigma, inv_var), (n,)))
    log_num = T.add(T.mul(S, T.broadcast_scalar(inv_var, S.shape)), offset)
    return T.exp(T.sub(log_num, T.broadcast_cols(log_d, n)))


def spatial_term_tensor(deltas: np.ndarray, log_d: Tensor, pri: PriorTensors) -> Tensor:
    rows, n = deltas.shape
    log_sigma, inv_var = _log_sigma_and_inv_var(pri.sigma_delta_raw)
    gap = Tensor(np.square(1.0 - deltas).astype(log_d.data.dtype))
    log_num = T.neg(T.mul(gap, T.broadcast_scalar(T.scale(inv_var, 0.5), gap.shape)))
    log_num = T.sub(log_num, T.broadcast_scalar(log_sigma, gap.shape))
    shape = T.exp(T.sub(log_num, T.broadcast_cols(log_d, n)))
    # beta multiplies outside the exponent so beta = 0 is representable
    return T.mul(shape, T.broadcast_rows(T.softplus(pri.beta_raw), rows))


def scores_tensor(S: Tensor, deltas: np.ndarray, pri: PriorTensors) -> Tensor:
    _check_deltas(deltas, S.shape)
    log_d = log_gmm_denominator_tensor(S, pri)
    return T.add(key_term_tensor(S, log_d, pri), spatial_term_tensor(deltas, log_d, pri))


def head_attention_tensor(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                          deltas: np.ndarray, pri: PriorTensors) -> Tensor:
    q = T.l2_normalize_rows(T.matmul(x, T.transpose(w_q)))
    k = T.l2_normalize_rows(T.matmul(x, T.transpose(w_k)))
    v = T.matmul(x, T.transpose(w_v))
    w = scores_tensor(T.matmul(q, T.transpose(k)), deltas, pri)
    return T.matmul(w, v)


def _head_row(t: Tensor, h: int) -> Tensor:
    return T.reshape(T.slice_axis(t, h, h + 1, axis=0), (t.shape[1],))


def multi_head_tensor(x: Tensor, p: Mapping[str, Tensor], deltas: np.ndarray, n_heads: int) -> Tensor:
    """Concatenate per-head outputs and project back to the token width.

    ``p`` holds d_e x d_e projections ``w_q``/``w_k``/``w_v`` whose row
    blocks are the heads, ``w_o``/``b_o`` and the (n_heads x N) prior tables.
    """
    d_e = x.shape[1]
    if d_e % n_heads != 0:
        raise ConfigError(f"token width {d_e} is not divisible by {n_heads} heads")
    d = d_e // n_heads
    outputs = []
    for h in range(n_heads):
        rows = (h * d, (h + 1) * d)
        pri = PriorTensors(
            _head_row(p["pi_logits"], h),
            _head_row(p["gamma_logits"], h),
            _head_row(p["beta_raw"], h),
            T.slice_axis(p["sigma_k_raw"], h, h + 1),
            T.slice_axis(p["sigma_q_raw"], h, h + 1),
            T.slice_axis(p["sigma_delta_raw"], h, h + 1),
        )
        outputs.append(head_attention_tensor(
            x,
            T.slice_axis(p["w_q"], *rows, axis=0),
            T.slice_axis(p["w_k"], *rows, axis=0),
            T.slice_axis(p["w_v"], *rows, axis=0),
            deltas, pri,
        ))
    merged = outputs[0] if n_heads == 1 else T.concat(outputs, axis=1)
    return T.add(T.matmul(merged, T.transpose(p["w_o"])), p["b_o"])


#-------------------------------------------------
# Array-level operations
#-------------------------------------------------
def project_qkv(tokens: np.ndarray, weights: ProjectionWeights) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = Tensor(tokens)
    if x.ndim != 2 or x.shape[1] != weights.w_q.shape[1]:
        raise ShapeError(f"project_qkv: tokens {x.shape} vs weights {weights.w_q.shape}")
    q = T.l2_normalize_rows(T.matmul(x, T.transpose(weights.w_q)))
    k = T.l2_normalize_rows(T.matmul(x, T.transpose(weights.w_k)))
    v = T.matmul(x, T.transpose(weights.w_v))
    return q.data, k.data, v.data


def softmax_attention(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Scaled dot-product scores softmax(q_i . k_j / sqrt(d)); the reference path."""
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"softmax_attention: query width {Q.shape[1]} vs key width {K.shape[1]}")
    return T.softmax_rows(Q @ K.T / math.sqrt(Q.shape[1])).data


def _row_similarity(q_i: np.ndarray, K: np.ndarray) -> np.ndarray:
    q_i = np.asarray(q_i, dtype=np.float64).reshape(1, -1)
    if q_i.shape[1] != K.shape[1]:
        raise ShapeError(f"query width {q_i.shape[1]} vs key width {K.shape[1]}")
    return q_i @ np.asarray(K, dtype=np.float64).T


def _check_priors(priors: AttentionPriors, n: int) -> None:
    if priors.n != n:
        raise ShapeError(f"priors sized for {priors.n} positions, got {n} keys")


def gmm_denominator(q_i: np.ndarray, K: np.ndarray, priors: AttentionPriors) -> float:
    S = _row_similarity(q_i, K)
    _check_priors(priors, S.shape[1])
    return float(np.exp(log_gmm_denominator_tensor(Tensor(S), priors.tensors()).data[0]))


def key_posterior_term(q_i: np.ndarray, K: np.ndarray, priors: AttentionPriors) -> np.ndarray:
    S = Tensor(_row_similarity(q_i, K))
    _check_priors(priors, S.shape[1])
    pri = priors.tensors()
    return key_term_tensor(S, log_gmm_denominator_tensor(S, pri), pri).data[0]


def spatial_posterior_term(q_i: np.ndarray, deltas: np.ndarray, K: np.ndarray,
                           priors: AttentionPriors) -> np.ndarray:
    S = Tensor(_row_similarity(q_i, K))
    _check_priors(priors, S.shape[1])
    deltas = np.asarray(deltas, dtype=np.float64).reshape(1, -1)
    _check_deltas(deltas, S.shape)
    pri = priors.tensors()
    return spatial_term_tensor(deltas, log_gmm_denominator_tensor(S, pri), pri).data[0]


def scores_from_similarity(S: np.ndarray, deltas: np.ndarray, priors: AttentionPriors) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    _check_priors(priors, S.shape[1])
    return scores_tensor(Tensor(S), np.asarray(deltas, dtype=np.float64), priors.tensors()).data


def prob_attention_scores(Q: np.ndarray, K: np.ndarray, deltas: np.ndarray,
                          priors: AttentionPriors) -> np.ndarray:
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"prob_attention_scores: query width {Q.shape[1]} vs key width {K.shape[1]}")
    return scores_from_similarity(np.asarray(Q) @ np.asarray(K).T, deltas, priors)


def attention_output(scores: np.ndarray, V: np.ndarray) -> np.ndarray:
    if scores.shape[1] != V.shape[0]:
        raise ShapeError(f"attention_output: scores {scores.shape} vs values {V.shape}")
    return T.matmul(scores, V).data


def multi_head(tokens: np.ndarray, heads: Sequence[Tuple[ProjectionWeights, AttentionPriors]],
               w_o: np.ndarray, b_o: np.ndarray, deltas: np.ndarray,
               n_heads: int = 4) -> np.ndarray:
    """Array-level multi-head attention over per-head weights and priors."""
    d_e = tokens.shape[1]
    if d_e % n_heads != 0:
        raise ConfigError(f"token width {d_e} is not divisible by {n_heads} heads")
    if len(heads) != n_heads:
        raise ConfigError(f"expected {n_heads} heads, got {len(heads)}")
    params = {
        "w_q": Tensor(np.concatenate([w.w_q for w, _ in heads], axis=0)),
        "w_k": Tensor(np.concatenate([w.w_k for w, _ in heads], axis=0)),
        "w_v": Tensor(np.concatenate([w.w_v for w, _ in heads], axis=0)),
        "w_o": Tensor(w_o),
        "b_o": Tensor(b_o),
    }
    for name in ("pi_logits", "gamma_logits", "beta_raw"):
        params[name] = Tensor(np.stack([getattr(p, name) for _, p in heads]))
    for name in ("sigma_k_raw", "sigma_q_raw", "sigma_delta_raw"):
        params[name] = Tensor(np.array([getattr(p, name) for _, p in heads], dtype=np.float64))
    return multi_head_tensor(Tensor(tokens), params, np.asarray(deltas, dtype=np.float64), n_heads).data
