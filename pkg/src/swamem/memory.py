"""Chunk-wise test-time-trained fast-weight memory.

Per memory head the state is a gated two-layer map with a residual:

    f(K) = (silu(K Wg^T) * (K Wu^T)) Wd^T + K

Within a sequence the weights are updated once per chunk by momentum SGD on
the inner objective

    L(W) = -sum_t eta_t * dot(f(k_t), v_t)

whose gradients are written out by hand (differentiable ops, so the outer
loop can backprop through the whole recurrence). eta_t >= 0 is a per-token
learning rate and mu in (0,1) a per-chunk momentum coefficient; both are
supplied by the caller.

Pipeline order per chunk is fixed: read the chunk's queries against the
*current* (pre-normalization) weights, then re-normalize each weight row to
its stored target L2 norm, then compute gradients at the normalized weights,
clip each gradient matrix to Frobenius norm ``clip_threshold``, and apply the
momentum update. ``order="normalize_first"`` swaps the first two stages and
exists to demonstrate that the order is observable; nothing else uses it.

All tensors carry a leading batch axis; per-head shapes are

    w_gate, w_up : (batch, n_heads, hidden, head_dim)
    w_down       : (batch, n_heads, head_dim, hidden)
    q, k, v      : (batch, n_heads, chunk, head_dim)
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import (
    Tensor,
    as_tensor,
    constant,
    frob_clip,
    mT,
    matmul,
    row_renorm,
    silu,
    silu_prime,
    tsum,
)

__all__ = [
    "MemoryConfig",
    "MemoryState",
    "init_fast_weights",
    "init_state",
    "memory_read",
    "inner_loss",
    "inner_gradients",
    "normalize_weights",
    "clip_gradients",
    "momentum_update",
    "absorb_chunk",
    "process_chunk",
    "serialize_state",
    "deserialize_state",
]

_WEIGHT_NAMES = ("w_gate", "w_up", "w_down")


@dataclass(frozen=True)
class MemoryConfig:
    """Shape and update parameters for the fast-weight memory."""

    n_heads: int
    head_dim: int
    hidden: int
    chunk_size: int
    clip_threshold: float = 1.0
    eta_on_down: bool = True  # scale the down-projection gradient by eta as well

    def __post_init__(self):
        if min(self.n_heads, self.head_dim, self.hidden, self.chunk_size) < 1:
            raise ConfigError("memory dimensions must be positive")
        if self.clip_threshold <= 0:
            raise ConfigError("clip_threshold must be positive")

    @property
    def fallback_target(self) -> float:
        """Target row norm for rows initialized at zero (the down projection)."""
        return 1.0 / np.sqrt(self.hidden)


@dataclass
class MemoryState:
    """Per-sequence fast weights, their momentum, and frozen norm targets.

    ``weights`` and ``momentum`` are triples of tensors ordered
    (w_gate, w_up, w_down); ``targets`` are plain arrays (never
    differentiated). The footprint is independent of how many tokens the
    state has absorbed.
    """

    weights: tuple[Tensor, Tensor, Tensor]
    momentum: tuple[Tensor, Tensor, Tensor]
    targets: tuple[np.ndarray, np.ndarray, np.ndarray]
    updates_applied: int = 0

    @property
    def batch(self) -> int:
        return self.weights[0].shape[0]

    def raw_bytes(self) -> int:
        """f64 bytes of everything the state stores."""
        n = sum(w.data.nbytes for w in self.weights)
        n += sum(m.data.nbytes for m in self.momentum)
        n += sum(t.nbytes for t in self.targets)
        return n


def init_fast_weights(rng: np.random.Generator, cfg: MemoryConfig) -> dict[str, np.ndarray]:
    """Fresh per-head init: gaussian gate/up scaled by 1/sqrt(head_dim), zero down."""
    scale = 1.0 / np.sqrt(cfg.head_dim)
    return {
        "w_gate": rng.normal(0.0, scale, size=(cfg.n_heads, cfg.hidden, cfg.head_dim)),
        "w_up": rng.normal(0.0, scale, size=(cfg.n_heads, cfg.hidden, cfg.head_dim)),
        "w_down": np.zeros((cfg.n_heads, cfg.head_dim, cfg.hidden)),
    }


def _norm_targets(value: np.ndarray, fallback: float) -> np.ndarray:
    """Row L2 norms, with zero rows mapped to a positive fallback target."""
    norms = np.linalg.norm(value, axis=-1)
    return np.where(norms > 1e-12, norms, fallback)


def init_state(cfg: MemoryConfig, weights: dict, batch: int) -> MemoryState:
    """Broadcast per-head init weights to a batch and capture norm targets.

    ``weights`` maps w_gate/w_up/w_down to (n_heads, hidden-ish) tensors or
    arrays; tape-attached tensors stay attached, so the outer loop can train
    the initial weights through the in-sequence recurrence.
    """
    ws = []
    targets = []
    zeros = constant(np.zeros((batch, 1, 1, 1)))
    for name in _WEIGHT_NAMES:
        if name not in weights:
            raise ConfigError(f"missing init weight {name}")
        w = as_tensor(weights[name])
        if w.ndim != 3 or w.shape[0] != cfg.n_heads:
            raise ShapeError(f"{name}: expected ({cfg.n_heads}, rows, cols), got {w.shape}")
        ws.append(w + zeros)  # (batch, n_heads, rows, cols)
        targets.append(_norm_targets(w.data, cfg.fallback_target))
    momentum = tuple(constant(np.zeros(w.shape)) for w in ws)
    return MemoryState(weights=tuple(ws), momentum=momentum, targets=tuple(targets))


def memory_read(weights, q) -> Tensor:
    """Apply the memory map to queries: (B, n, c, d_h) -> same shape."""
    w_gate, w_up, w_down = weights
    q = as_tensor(q)
    h_gate = matmul(q, mT(w_gate))
    h_in = matmul(q, mT(w_up))
    a = silu(h_gate) * h_in
    return matmul(a, mT(w_down)) + q


def inner_loss(weights, k, v, eta=None) -> Tensor:
    """The in-sequence objective: -sum eta_t * dot(f(k_t), v_t).

    ``eta`` broadcasts over (B, n, c, d_h); omitted means 1. Summed over
    batch, heads, tokens. This is the scalar whose fast-weight gradients
    :func:`inner_gradients` computes in closed form.
    """
    read = memory_read(weights, k)
    prod = read * as_tensor(v)
    if eta is not None:
        prod = prod * eta
    return -tsum(prod)


def inner_gradients(weights, k, v, eta, cfg: MemoryConfig):
    """Closed-form fast-weight gradients of :func:`inner_loss`.

    Built from differentiable ops so the outer loop can take second-order
    gradients through the update. ``eta`` has shape (B, 1, c, 1).

    Derivation, per head with K, V (c, d_h):
        G_out  = -V
        G_A    = G_out Wd
        G_in   = G_A * silu(H_gate)
        G_gate = G_A * H_in * silu'(H_gate)
        dWg = G_gate^T (eta*K);  dWu = G_in^T (eta*K);  dWd = G_out^T (eta*A)
    (eta on dWd is the ``eta_on_down`` knob; disabled it is G_out^T A.)
    """
    w_gate, w_up, w_down = weights
    k, v, eta = as_tensor(k), as_tensor(v), as_tensor(eta)
    h_gate = matmul(k, mT(w_gate))
    h_in = matmul(k, mT(w_up))
    a = silu(h_gate) * h_in
    g_out = -v
    g_a = matmul(g_out, w_down)  # (B, n, c, hidden)
    g_in = g_a * silu(h_gate)
    g_gate = g_a * h_in * silu_prime(h_gate)
    ek = eta * k
    d_gate = matmul(mT(g_gate), ek)
    d_up = matmul(mT(g_in), ek)
    d_down = matmul(mT(g_out), eta * a if cfg.eta_on_down else a)
    return d_gate, d_up, d_down


def normalize_weights(weights, targets):
    """Rescale every weight row to its stored target norm (zero rows pass)."""
    return tuple(row_renorm(w, t) for w, t in zip(weights, targets))


def clip_gradients(grads, threshold: float):
    """Frobenius-clip each per-head gradient matrix to ``threshold``."""
    return tuple(frob_clip(g, threshold) for g in grads)


def momentum_update(weights, momentum, grads, mu):
    """m <- mu*m - g;  w <- w + m. ``mu`` broadcasts (shape (B,1,1,1))."""
    new_m = tuple(mu * m - g for m, g in zip(momentum, grads))
    new_w = tuple(w + m for w, m in zip(weights, new_m))
    return new_w, new_m


def absorb_chunk(state: MemoryState, k, v, eta, mu, cfg: MemoryConfig) -> MemoryState:
    """The update half of the pipeline: normalize -> gradients -> clip -> step.

    k/v: (B, n_heads, c, head_dim); eta: (B, 1, c, 1); mu: (B, 1, 1, 1).
    Returns the successor state; the input state is not modified. Reads of
    this chunk's tokens happen against the *pre*-absorb state, so decode can
    emit them one token at a time before the chunk completes.
    """
    c = as_tensor(k).shape[2]
    if c < 1 or c > cfg.chunk_size:
        raise ShapeError(f"chunk of {c} tokens exceeds chunk_size={cfg.chunk_size}")
    w = normalize_weights(state.weights, state.targets)
    grads = inner_gradients(w, k, v, eta, cfg)
    grads = clip_gradients(grads, cfg.clip_threshold)
    new_w, new_m = momentum_update(w, state.momentum, grads, mu)
    return MemoryState(
        weights=new_w,
        momentum=new_m,
        targets=state.targets,
        updates_applied=state.updates_applied + 1,
    )


def process_chunk(
    state: MemoryState, q, k, v, eta, mu, cfg: MemoryConfig, order: str = "read_first"
) -> tuple[Tensor, MemoryState]:
    """Read one chunk and absorb it into the state.

    q/k/v: (B, n_heads, c, head_dim) with c <= chunk_size (trailing chunks
    may be short). eta: (B, 1, c, 1) per-token rates; mu: (B, 1, 1, 1) chunk
    momentum. Returns (v_hat for the chunk, successor state); the input
    state is not modified. The default order reads queries against the
    current weights before normalization; "normalize_first" demonstrates
    the alternative and exists only to show the orders differ.
    """
    if order == "read_first":
        v_hat = memory_read(state.weights, q)
    elif order == "normalize_first":
        v_hat = memory_read(normalize_weights(state.weights, state.targets), q)
    else:
        raise ConfigError(f"unknown pipeline order {order!r}")
    if as_tensor(q).shape[2] != as_tensor(k).shape[2]:
        raise ShapeError("q and k chunks differ in length")
    return v_hat, absorb_chunk(state, k, v, eta, mu, cfg)


# ----------------------------------------------------------------------
# serialization (single deterministic envelope; size independent of tokens)

_STATE_FORMAT = "swamem.memory_state"
_STATE_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=np.float64).reshape(obj["shape"])
    return arr.copy()


def serialize_state(state: MemoryState) -> bytes:
    """Deterministic versioned envelope for one memory state."""
    arrays = {}
    for name, w, m, t in zip(_WEIGHT_NAMES, state.weights, state.momentum, state.targets):
        arrays[name] = _encode(w.data)
        arrays["m_" + name] = _encode(m.data)
        arrays["n_" + name] = _encode(t)
    doc = {
        "format": _STATE_FORMAT,
        "version": _STATE_VERSION,
        # fixed width so the envelope size never depends on tokens absorbed
        "updates_applied": f"{state.updates_applied:020d}",
        "arrays": arrays,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def deserialize_state(blob: bytes) -> MemoryState:
    """Inverse of :func:`serialize_state`; tensors come back as constants."""
    try:
        doc = json.loads(blob.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("memory state blob is not valid JSON") from e
    if doc.get("format") != _STATE_FORMAT:
        raise CheckpointError(f"unexpected format {doc.get('format')!r}")
    if doc.get("version") != _STATE_VERSION:
        raise CheckpointError(f"unsupported version {doc.get('version')!r}")
    arrays = doc["arrays"]
    weights = tuple(constant(_decode(arrays[n])) for n in _WEIGHT_NAMES)
    momentum = tuple(constant(_decode(arrays["m_" + n])) for n in _WEIGHT_NAMES)
    targets = tuple(_decode(arrays["n_" + n]) for n in _WEIGHT_NAMES)
    return MemoryState(
        weights=weights,
        momentum=momentum,
        targets=targets,
        updates_applied=int(doc["updates_applied"]),
    )
