"""Linear fast-weight baselines: decaying outer-product and delta rule.

Both keep one matrix M (head_dim x head_dim) per head and update it every
token (no chunking):

    mamba2:  M_t = alpha_t * M_{t-1} + v_t k_t^T
    delta:   M_t = M_{t-1} (alpha_t I - beta_t k_t k_t^T) + beta_t v_t k_t^T

with the read v_hat_t = M_t q_t (update first, then read, so the current
token is visible to itself). alpha_t in (0,1) is a decay, beta_t >= 0 a
write strength. The mamba2 update equals one eta=1 gradient step on
-v^T M k + ((1-alpha)/2) ||M||_F^2, which is what makes it the linear
ancestor of the nonlinear chunk-trained memory.

State size is fixed at construction; absorbing more tokens never grows it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, concat, constant, matmul, mT, reshape

__all__ = [
    "LinearMemoryConfig",
    "LinearState",
    "init_linear_state",
    "mamba2_step",
    "delta_step",
    "linear_read",
    "process_tokens",
]

_RULES = ("mamba2", "delta")


@dataclass(frozen=True)
class LinearMemoryConfig:
    n_heads: int
    head_dim: int
    rule: str = "mamba2"

    def __post_init__(self):
        if self.rule not in _RULES:
            raise ConfigError(f"rule must be one of {_RULES}, got {self.rule!r}")
        if self.n_heads < 1 or self.head_dim < 1:
            raise ConfigError("linear memory dimensions must be positive")


@dataclass
class LinearState:
    """One matrix per head: (batch, n_heads, head_dim, head_dim)."""

    m: Tensor
    tokens_absorbed: int = 0

    @property
    def batch(self) -> int:
        return self.m.shape[0]

    def raw_bytes(self) -> int:
        return self.m.data.nbytes


def init_linear_state(cfg: LinearMemoryConfig, batch: int) -> LinearState:
    return LinearState(m=constant(np.zeros((batch, cfg.n_heads, cfg.head_dim, cfg.head_dim))))


def _outer(a: Tensor, b: Tensor) -> Tensor:
    """(B, n, d) x (B, n, d) -> (B, n, d, d) outer products a b^T."""
    return matmul(_col(a), mT(_col(b)))


def _col(x: Tensor) -> Tensor:
    b, n, d = x.shape
    return reshape(x, (b, n, d, 1))


def mamba2_step(m, k, v, alpha) -> Tensor:
    """M' = alpha * M + v k^T; alpha broadcasts over (B, n, d, d)."""
    m, k, v = as_tensor(m), as_tensor(k), as_tensor(v)
    if k.ndim != 3 or v.ndim != 3:
        raise ShapeError("mamba2_step expects per-token (B, n, head_dim) k/v")
    return alpha * m + _outer(v, k)


def delta_step(m, k, v, alpha, beta) -> Tensor:
    """M' = M (alpha I - beta k k^T) + beta v k^T.

    Expanded as alpha*M - beta*(M k) k^T + beta*v k^T to avoid forming the
    d x d update matrix.
    """
    m, k, v = as_tensor(m), as_tensor(k), as_tensor(v)
    if k.ndim != 3 or v.ndim != 3:
        raise ShapeError("delta_step expects per-token (B, n, head_dim) k/v")
    mk = reshape(matmul(m, _col(k)), k.shape)  # (B, n, d)
    return alpha * m - beta * _outer(mk, k) + beta * _outer(v, k)


def linear_read(m, q) -> Tensor:
    """v_hat = M q for one token: (B, n, d, d) x (B, n, d) -> (B, n, d)."""
    m, q = as_tensor(m), as_tensor(q)
    return reshape(matmul(m, _col(q)), q.shape)


def process_tokens(
    state: LinearState, q, k, v, alpha, beta=None, rule: str = "mamba2"
) -> tuple[Tensor, LinearState]:
    """Token-recurrent pass over (B, n, L, d) slabs.

    ``alpha`` (and ``beta`` for the delta rule) are (B, L) per-token signals.
    Returns (v_hat (B, n, L, d), successor state); the input state is not
    modified.
    """
    if rule not in _RULES:
        raise ConfigError(f"rule must be one of {_RULES}, got {rule!r}")
    if rule == "delta" and beta is None:
        raise ConfigError("delta rule needs beta")
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    alpha = as_tensor(alpha)
    batch, n_heads, length, d_h = q.shape
    m = state.m
    reads = []
    for t in range(length):
        kt = k[:, :, t]
        vt = v[:, :, t]
        at = reshape(alpha[:, t], (batch, 1, 1, 1))
        if rule == "mamba2":
            m = mamba2_step(m, kt, vt, at)
        else:
            bt = reshape(as_tensor(beta)[:, t], (batch, 1, 1, 1))
            m = delta_step(m, kt, vt, at, bt)
        reads.append(reshape(linear_read(m, q[:, :, t]), (batch, n_heads, 1, d_h)))
    v_hat = concat(reads, axis=2)
    return v_hat, LinearState(m=m, tokens_absorbed=state.tokens_absorbed + length)
