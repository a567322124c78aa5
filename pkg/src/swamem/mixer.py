"""Token mixer fusing window attention with a fast-weight memory, and the
small stacked language model built from it.

Layer structure (pre-norm residual blocks):

    x = x + W_o(SWA(rope(norm(x)))) + alpha * W_mo(gate(norm(x)) * MEM(norm(x)))
    x = x + MLP(norm(x))

Both mixer branches read the same pre-normalized input. The attention branch
is position-aware (rotary, window+sinks mask); the memory branch is
position-agnostic (no rotation) and sees tokens only through its causal conv
and the in-sequence weight updates. ``alpha`` is a learned per-channel gate,
zero-initialized on converted checkpoints so a fresh student starts exactly
at its window-attention teacher.

The attention Q/K path is projection -> per-head RMSNorm -> rotation. The
memory Q/K/V path is projection -> causal depthwise conv -> RMSNorm -> L2
per head (V stops after the conv). Per-token learning rate eta and per-token
decay (chunk-averaged into momentum mu for the chunked rule) come from two
scalar projections of the same pre-norm input.

Runtime geometry (attention mode, window, sinks, chunk size, memory rule) is
deliberately separate from the architecture config: the distillation harness
resamples it per step on an unchanged parameter set.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attention import (
    AttnConfig,
    WindowKVCache,
    decode_step,
    full_attention,
    rope_angles,
    rope_rotate,
    swa_sinks_attention,
)
from .errors import CheckpointError, ConfigError, ShapeError
from .linear_memory import LinearMemoryConfig, init_linear_state, process_tokens
from .memory import (
    MemoryConfig,
    MemoryState,
    absorb_chunk,
    init_fast_weights,
    init_state,
    memory_read,
    process_chunk,
)
from .tensor import (
    Tape,
    Tensor,
    causal_conv1d,
    concat,
    constant,
    l2_normalize,
    matmul,
    mT,
    permute,
    reshape,
    rmsnorm,
    sigmoid,
    silu,
    softplus,
    tmean,
)

__all__ = [
    "ModelConfig",
    "Runtime",
    "Model",
    "produce_qkv",
    "meta_params",
    "token_mixer",
    "channel_mixer",
    "full_layer",
    "init_params",
    "params_hash",
    "DESK_CONFIG",
]

_MEMORY_RULES = ("ttt", "mamba2", "delta", "none")
_ATTENTION_MODES = ("swa", "full")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (geometry defaults live here too)."""

    vocab: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    d_ff: int = 128
    window: int = 16
    sinks: int = 2
    chunk_size: int = 8
    mem_dim: int = 32
    mem_hidden: int = 32
    conv_kernel: int = 4
    rope_theta: float = 10000.0
    eps: float = 1e-6
    clip_threshold: float = 1.0
    eta_on_down: bool = True
    attention_mode: str = "swa"
    memory_rule: str = "ttt"

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError("n_heads must be a multiple of n_kv_heads")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even")
        if self.mem_dim % self.n_kv_heads != 0:
            raise ConfigError("mem_dim must split evenly across n_kv_heads memory heads")
        if self.attention_mode not in _ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {_ATTENTION_MODES}")
        if self.memory_rule not in _MEMORY_RULES:
            raise ConfigError(f"memory_rule must be one of {_MEMORY_RULES}")
        if self.conv_kernel < 1:
            raise ConfigError("conv_kernel must be at least 1")
        if min(self.window, self.chunk_size) < 1 or self.sinks < 0:
            raise ConfigError("bad window/sinks/chunk geometry")

    @property
    def n_mem(self) -> int:
        """Memory head count mirrors the KV head count."""
        return self.n_kv_heads

    @property
    def mem_head_dim(self) -> int:
        return self.mem_dim // self.n_mem

    @property
    def q_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv_heads * self.head_dim


DESK_CONFIG = ModelConfig()


@dataclass(frozen=True)
class Runtime:
    """Per-call geometry; resampled freely without touching parameters."""

    attention_mode: str = "swa"
    window: int = 16
    sinks: int = 2
    chunk_size: int = 8
    memory_rule: str = "ttt"

    def __post_init__(self):
        if self.attention_mode not in _ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {_ATTENTION_MODES}")
        if self.memory_rule not in _MEMORY_RULES:
            raise ConfigError(f"memory_rule must be one of {_MEMORY_RULES}")
        if self.window < 1 or self.sinks < 0 or self.chunk_size < 1:
            raise ConfigError("bad window/sinks/chunk geometry")


# ----------------------------------------------------------------------
# parameter initialization


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter set, keyed by dotted names (fixed insertion order)."""

    def mat(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    def ident_kernel(width):
        k = np.zeros((cfg.conv_kernel, width))
        k[-1] = 1.0  # pure current-token tap
        return k

    p: dict[str, np.ndarray] = {}
    p["embed.table"] = rng.normal(0.0, 0.5, size=(cfg.vocab, cfg.d_model))
    mem_cfg = MemoryConfig(
        n_heads=cfg.n_mem,
        head_dim=cfg.mem_head_dim,
        hidden=cfg.mem_hidden,
        chunk_size=cfg.chunk_size,
        clip_threshold=cfg.clip_threshold,
        eta_on_down=cfg.eta_on_down,
    )
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        p[f"{pre}.norm.gain"] = np.ones(cfg.d_model)
        p[f"{pre}.attn.w_q"] = mat(cfg.q_width, cfg.d_model)
        p[f"{pre}.attn.w_k"] = mat(cfg.kv_width, cfg.d_model)
        p[f"{pre}.attn.w_v"] = mat(cfg.kv_width, cfg.d_model)
        p[f"{pre}.attn.w_o"] = mat(cfg.d_model, cfg.q_width)
        p[f"{pre}.attn.q_gain"] = np.ones(cfg.head_dim)
        p[f"{pre}.attn.k_gain"] = np.ones(cfg.head_dim)
        p[f"{pre}.mem.w_q"] = mat(cfg.mem_dim, cfg.d_model)
        p[f"{pre}.mem.w_k"] = mat(cfg.mem_dim, cfg.d_model)
        p[f"{pre}.mem.w_v"] = mat(cfg.mem_dim, cfg.d_model)
        p[f"{pre}.mem.conv_q"] = ident_kernel(cfg.mem_dim)
        p[f"{pre}.mem.conv_k"] = ident_kernel(cfg.mem_dim)
        p[f"{pre}.mem.conv_v"] = ident_kernel(cfg.mem_dim)
        p[f"{pre}.mem.q_gain"] = np.ones(cfg.mem_head_dim)
        p[f"{pre}.mem.k_gain"] = np.ones(cfg.mem_head_dim)
        p[f"{pre}.mem.lr_w"] = np.zeros(cfg.d_model)
        p[f"{pre}.mem.lr_b"] = np.full(1, -2.0)  # softplus(-2): small initial rate
        p[f"{pre}.mem.mu_w"] = np.zeros(cfg.d_model)
        p[f"{pre}.mem.mu_b"] = np.zeros(1)  # sigmoid(0) = 0.5 decay/momentum
        p[f"{pre}.mem.gate_w"] = np.zeros((cfg.mem_dim, cfg.d_model))  # gate opens at 0.5
        p[f"{pre}.mem.out_w"] = mat(cfg.d_model, cfg.mem_dim)
        p[f"{pre}.mem.alpha"] = np.zeros(cfg.d_model)
        fast = init_fast_weights(rng, mem_cfg)
        p[f"{pre}.mem.init_gate"] = fast["w_gate"]
        p[f"{pre}.mem.init_up"] = fast["w_up"]
        p[f"{pre}.mem.init_down"] = fast["w_down"]
        p[f"{pre}.mlp.norm_gain"] = np.ones(cfg.d_model)
        p[f"{pre}.mlp.w_gate"] = mat(cfg.d_ff, cfg.d_model)
        p[f"{pre}.mlp.w_up"] = mat(cfg.d_ff, cfg.d_model)
        p[f"{pre}.mlp.w_down"] = mat(cfg.d_model, cfg.d_ff)
    p["final_norm.gain"] = np.ones(cfg.d_model)
    p["head.w"] = mat(cfg.vocab, cfg.d_model)
    return p


def params_hash(params: dict[str, np.ndarray], names) -> str:
    """SHA-256 over (name, raw float64 bytes) in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(names):
        if name not in params:
            raise ConfigError(f"hash requested for unknown parameter {name!r}")
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------
# mixer pieces (tensor-level, tape-friendly)


def produce_qkv(
    x_hat,
    w_q,
    w_k,
    w_v,
    n_q_heads: int,
    n_kv_heads: int,
    head_dim: int,
    q_gain=None,
    k_gain=None,
    conv_kernels=None,
    l2_heads: bool = False,
    eps: float = 1e-6,
):
    """Project a pre-normalized stream into per-head q/k/v.

    Pipeline: linear projections, then optional causal depthwise conv per
    stream, then head split, then (optional) per-head RMSNorm on q/k, then
    (optional) per-head L2 normalization of q/k. v is untouched after the
    conv. Returns (B, L, H, head_dim) tensors.
    """
    q = matmul(x_hat, mT(w_q))
    k = matmul(x_hat, mT(w_k))
    v = matmul(x_hat, mT(w_v))
    if conv_kernels is not None:
        cq, ck, cv = conv_kernels
        q = causal_conv1d(q, cq)
        k = causal_conv1d(k, ck)
        v = causal_conv1d(v, cv)
    batch, length = x_hat.shape[0], x_hat.shape[1]
    q = reshape(q, (batch, length, n_q_heads, head_dim))
    k = reshape(k, (batch, length, n_kv_heads, head_dim))
    v = reshape(v, (batch, length, n_kv_heads, head_dim))
    if q_gain is not None:
        q = rmsnorm(q, q_gain, eps)
        k = rmsnorm(k, k_gain, eps)
    if l2_heads:
        q = l2_normalize(q)
        k = l2_normalize(k)
    return q, k, v


def meta_params(x_hat, lr_w, lr_b, mu_w, mu_b):
    """Per-token rate eta = softplus(w.x+b) and decay = sigmoid(w.x+b).

    Returns two (B, L) tensors shared by all memory heads.
    """
    batch, length, d = x_hat.shape
    eta = softplus(matmul(x_hat, reshape(lr_w, (d, 1))) + lr_b)
    decay = sigmoid(matmul(x_hat, reshape(mu_w, (d, 1))) + mu_b)
    return reshape(eta, (batch, length)), reshape(decay, (batch, length))


def _heads_to_seq_major(t: Tensor) -> Tensor:
    """(B, L, H, d) -> (B, H, L, d)."""
    return permute(t, (0, 2, 1, 3))


def memory_branch(x_hat, p, cfg: ModelConfig, rt: Runtime, prefix: str) -> Tensor:
    """Run the fast-weight branch over a whole sequence; (B, L, d_model) out
    (pre-alpha: the caller applies the channel gate alpha)."""

    def mp(name):
        return p[f"{prefix}.mem.{name}"]

    q, k, v = produce_qkv(
        x_hat,
        mp("w_q"),
        mp("w_k"),
        mp("w_v"),
        cfg.n_mem,
        cfg.n_mem,
        cfg.mem_head_dim,
        q_gain=mp("q_gain"),
        k_gain=mp("k_gain"),
        conv_kernels=(mp("conv_q"), mp("conv_k"), mp("conv_v")),
        l2_heads=True,
        eps=cfg.eps,
    )
    q, k, v = _heads_to_seq_major(q), _heads_to_seq_major(k), _heads_to_seq_major(v)
    eta, decay = meta_params(x_hat, mp("lr_w"), mp("lr_b"), mp("mu_w"), mp("mu_b"))
    batch, length = x_hat.shape[0], x_hat.shape[1]

    if rt.memory_rule == "ttt":
        mem_cfg = MemoryConfig(
            n_heads=cfg.n_mem,
            head_dim=cfg.mem_head_dim,
            hidden=cfg.mem_hidden,
            chunk_size=rt.chunk_size,
            clip_threshold=cfg.clip_threshold,
            eta_on_down=cfg.eta_on_down,
        )
        state = init_state(
            mem_cfg,
            {"w_gate": mp("init_gate"), "w_up": mp("init_up"), "w_down": mp("init_down")},
            batch,
        )
        reads = []
        for start in range(0, length, rt.chunk_size):
            end = min(length, start + rt.chunk_size)
            mu_j = reshape(tmean(decay[:, start:end], axis=1), (batch, 1, 1, 1))
            eta_j = reshape(eta[:, start:end], (batch, 1, end - start, 1))
            v_hat, state = process_chunk(
                state,
                q[:, :, start:end],
                k[:, :, start:end],
                v[:, :, start:end],
                eta_j,
                mu_j,
                mem_cfg,
            )
            reads.append(v_hat)
        read = concat(reads, axis=2) if len(reads) > 1 else reads[0]
    else:
        lin_cfg = LinearMemoryConfig(cfg.n_mem, cfg.mem_head_dim, rt.memory_rule)
        state = init_linear_state(lin_cfg, batch)
        read, state = process_tokens(state, q, k, v, decay, eta, rule=rt.memory_rule)

    read = reshape(permute(read, (0, 2, 1, 3)), (batch, length, cfg.mem_dim))
    gate = sigmoid(matmul(x_hat, mT(mp("gate_w"))))
    return matmul(gate * read, mT(mp("out_w")))


def token_mixer(x, p, cfg: ModelConfig, rt: Runtime, prefix: str, positions) -> Tensor:
    """Window attention plus alpha-gated memory, from one shared pre-norm."""
    x_hat = rmsnorm(x, p[f"{prefix}.norm.gain"], cfg.eps)
    q, k, v = produce_qkv(
        x_hat,
        p[f"{prefix}.attn.w_q"],
        p[f"{prefix}.attn.w_k"],
        p[f"{prefix}.attn.w_v"],
        cfg.n_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        q_gain=p[f"{prefix}.attn.q_gain"],
        k_gain=p[f"{prefix}.attn.k_gain"],
        eps=cfg.eps,
    )
    qr = rope_rotate(q, positions, cfg.rope_theta)
    kr = rope_rotate(k, positions, cfg.rope_theta)
    if rt.attention_mode == "full":
        attn = full_attention(qr, kr, v)
    else:
        attn = swa_sinks_attention(qr, kr, v, rt.window, rt.sinks)
    out = matmul(attn, mT(p[f"{prefix}.attn.w_o"]))
    if rt.memory_rule != "none":
        mem = memory_branch(x_hat, p, cfg, rt, prefix)
        out = out + p[f"{prefix}.mem.alpha"] * mem
    return out


def channel_mixer(x, p, cfg: ModelConfig, prefix: str) -> Tensor:
    x_hat = rmsnorm(x, p[f"{prefix}.mlp.norm_gain"], cfg.eps)
    h = silu(matmul(x_hat, mT(p[f"{prefix}.mlp.w_gate"]))) * matmul(x_hat, mT(p[f"{prefix}.mlp.w_up"]))
    return matmul(h, mT(p[f"{prefix}.mlp.w_down"]))


def full_layer(x, p, cfg: ModelConfig, rt: Runtime, prefix: str, positions) -> Tensor:
    x = x + token_mixer(x, p, cfg, rt, prefix, positions)
    x = x + channel_mixer(x, p, cfg, prefix)
    return x


# ----------------------------------------------------------------------
# the stacked model


class Model:
    """Parameter store plus forward/stream/checkpoint plumbing.

    Parameters rest as plain float64 arrays; each forward wraps them as tape
    leaves (names in ``trainable``) or constants, so optimizers just mutate
    ``self.params`` between steps.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        want = set(init_params(cfg, np.random.default_rng(0)))
        got = set(params)
        if want != got:
            missing = sorted(want - got)[:4]
            extra = sorted(got - want)[:4]
            raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        # number of decode sessions ever opened; lets offline training
        # harnesses assert that no generation happened
        self.stream_calls = 0

    # -- construction --------------------------------------------------
    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def clone(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def runtime(self, **overrides) -> Runtime:
        base = dict(
            attention_mode=self.cfg.attention_mode,
            window=self.cfg.window,
            sinks=self.cfg.sinks,
            chunk_size=self.cfg.chunk_size,
            memory_rule=self.cfg.memory_rule,
        )
        base.update(overrides)
        return Runtime(**base)

    # -- forward -------------------------------------------------------
    def _wrap(self, tape: Tape | None, trainable) -> dict[str, Tensor]:
        out = {}
        train = set(trainable) if trainable is not None else set(self.params)
        for name, arr in self.params.items():
            if tape is not None and name in train:
                out[name] = tape.leaf(arr)
            else:
                out[name] = constant(arr)
        return out

    def forward(self, ids, rt: Runtime | None = None, tape: Tape | None = None, trainable=None):
        """Logits (B, L, vocab) as a Tensor; pass a tape to train.

        Returns (logits, leaves) where leaves maps trainable names to their
        tape leaf tensors (empty when no tape).
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ShapeError("ids must be (B, L)")
        rt = rt or self.runtime()
        p = self._wrap(tape, trainable)
        positions = np.arange(ids.shape[1])
        x = p["embed.table"][ids]
        for i in range(self.cfg.n_layers):
            x = full_layer(x, p, self.cfg, rt, f"layers.{i}", positions)
        x = rmsnorm(x, p["final_norm.gain"], self.cfg.eps)
        logits = matmul(x, mT(p["head.w"]))
        leaves = {}
        if tape is not None:
            train = set(trainable) if trainable is not None else set(self.params)
            leaves = {n: p[n] for n in train}
        return logits, leaves

    def logits(self, ids, rt: Runtime | None = None) -> np.ndarray:
        out, _ = self.forward(ids, rt=rt)
        return out.data

    # -- streaming decode ----------------------------------------------
    def stream(self, rt: Runtime | None = None, batch: int = 1) -> "StreamSession":
        self.stream_calls += 1
        return StreamSession(self, rt or self.runtime(), batch)

    # -- checkpoints -----------------------------------------------------
    def save(self, path: str) -> None:
        doc = {
            "format": _CKPT_FORMAT,
            "version": _CKPT_VERSION,
            "config": asdict(self.cfg),
            "params": {
                name: {
                    "shape": list(arr.shape),
                    "data": base64.b64encode(
                        np.ascontiguousarray(arr, dtype=np.float64).tobytes()
                    ).decode("ascii"),
                }
                for name, arr in sorted(self.params.items())
            },
        }
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="ascii") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Model":
        if not os.path.exists(path):
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with open(path, encoding="ascii") as f:
                doc = json.load(f)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
        if doc.get("format") != _CKPT_FORMAT:
            raise CheckpointError(f"not a model checkpoint: {path}")
        if doc.get("version") != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
        try:
            cfg = ModelConfig(**doc["config"])
        except TypeError as e:
            raise CheckpointError(f"bad config block: {e}") from e
        params = {}
        for name, entry in doc["params"].items():
            raw = base64.b64decode(entry["data"])
            params[name] = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
        return cls(cfg, params)


_CKPT_FORMAT = "swamem.checkpoint"
_CKPT_VERSION = 1


# ----------------------------------------------------------------------
# streaming session (inference only)


def _sig_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _rms_np(x, gain, eps):
    r = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x / r * gain


def _l2_np(x, floor=1e-12):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, floor)


class _LayerStream:
    """Per-layer decode state: KV cache, conv tails, memory state/buffers."""

    def __init__(self, model: Model, rt: Runtime, batch: int, prefix: str):
        cfg = model.cfg
        window = rt.window if rt.attention_mode == "swa" else 10**9
        sinks = rt.sinks if rt.attention_mode == "swa" else 0
        self.cache = WindowKVCache(
            AttnConfig(cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, window, sinks, cfg.rope_theta),
            batch,
        )
        self.conv_tails = {
            s: np.zeros((batch, cfg.conv_kernel - 1, cfg.mem_dim)) for s in ("q", "k", "v")
        }
        self.mem_state: MemoryState | None = None
        self.lin_m: np.ndarray | None = None
        if rt.memory_rule == "ttt":
            mem_cfg = MemoryConfig(
                n_heads=cfg.n_mem,
                head_dim=cfg.mem_head_dim,
                hidden=cfg.mem_hidden,
                chunk_size=rt.chunk_size,
                clip_threshold=cfg.clip_threshold,
                eta_on_down=cfg.eta_on_down,
            )
            self.mem_cfg = mem_cfg
            self.mem_state = init_state(
                mem_cfg,
                {
                    "w_gate": model.params[f"{prefix}.mem.init_gate"],
                    "w_up": model.params[f"{prefix}.mem.init_up"],
                    "w_down": model.params[f"{prefix}.mem.init_down"],
                },
                batch,
            )
        elif rt.memory_rule in ("mamba2", "delta"):
            self.lin_m = np.zeros((batch, cfg.n_mem, cfg.mem_head_dim, cfg.mem_head_dim))
        self.k_buf: list[np.ndarray] = []
        self.v_buf: list[np.ndarray] = []
        self.eta_buf: list[np.ndarray] = []
        self.sig_buf: list[np.ndarray] = []


class StreamSession:
    """Token-at-a-time inference; numerically matches whole-sequence prefill.

    Feed tokens in position order via :meth:`step`; each call returns the
    next-token logits (B, vocab). Uses constant per-token chunk boundaries:
    the memory absorbs a chunk exactly when ``chunk_size`` tokens have been
    buffered, which reproduces prefill's chunk grid.
    """

    def __init__(self, model: Model, rt: Runtime, batch: int):
        self.model = model
        self.rt = rt
        self.batch = batch
        self.position = 0
        self.layers = [
            _LayerStream(model, rt, batch, f"layers.{i}") for i in range(model.cfg.n_layers)
        ]

    def step(self, ids_t: np.ndarray) -> np.ndarray:
        cfg = self.model.cfg
        rt = self.rt
        p = self.model.params
        ids_t = np.asarray(ids_t)
        if ids_t.shape != (self.batch,):
            raise ShapeError(f"expected ids of shape ({self.batch},)")
        t = self.position
        x = p["embed.table"][ids_t]  # (B, d)
        for i, ls in enumerate(self.layers):
            pre = f"layers.{i}"
            x = x + self._mix_token(x, p, cfg, rt, pre, ls, t)
            x_hat = _rms_np(x, p[f"{pre}.mlp.norm_gain"], cfg.eps)
            h = x_hat @ p[f"{pre}.mlp.w_gate"].T
            h = h * _sig_np(h) * (x_hat @ p[f"{pre}.mlp.w_up"].T)
            x = x + h @ p[f"{pre}.mlp.w_down"].T
        x = _rms_np(x, p["final_norm.gain"], cfg.eps)
        self.position += 1
        return x @ p["head.w"].T

    def _mix_token(self, x, p, cfg, rt, pre, ls: _LayerStream, t: int):
        x_hat = _rms_np(x, p[f"{pre}.norm.gain"], cfg.eps)
        batch = x_hat.shape[0]

        # attention branch
        q = (x_hat @ p[f"{pre}.attn.w_q"].T).reshape(batch, cfg.n_heads, cfg.head_dim)
        k = (x_hat @ p[f"{pre}.attn.w_k"].T).reshape(batch, cfg.n_kv_heads, cfg.head_dim)
        v = (x_hat @ p[f"{pre}.attn.w_v"].T).reshape(batch, cfg.n_kv_heads, cfg.head_dim)
        q = _rms_np(q, p[f"{pre}.attn.q_gain"], cfg.eps)
        k = _rms_np(k, p[f"{pre}.attn.k_gain"], cfg.eps)
        cos, sin = rope_angles(np.array([t]), cfg.head_dim, cfg.rope_theta)
        q = self._rot(q, cos[0], sin[0])
        k = self._rot(k, cos[0], sin[0])
        attn, _ = decode_step(ls.cache, q, k, v, t)
        out = attn @ p[f"{pre}.attn.w_o"].T

        if rt.memory_rule == "none":
            return out

        # memory branch
        mq = x_hat @ p[f"{pre}.mem.w_q"].T
        mk = x_hat @ p[f"{pre}.mem.w_k"].T
        mv = x_hat @ p[f"{pre}.mem.w_v"].T
        rows = {}
        for name, row in (("q", mq), ("k", mk), ("v", mv)):
            kern = p[f"{pre}.mem.conv_{name}"]
            tail = ls.conv_tails[name]
            mixed = kern[-1] * row
            for j in range(cfg.conv_kernel - 1):
                mixed = mixed + kern[j] * tail[:, j]
            ls.conv_tails[name] = np.concatenate([tail[:, 1:], row[:, None, :]], axis=1)
            rows[name] = mixed.reshape(batch, cfg.n_mem, cfg.mem_head_dim)
        qh = _l2_np(_rms_np(rows["q"], p[f"{pre}.mem.q_gain"], cfg.eps))
        kh = _l2_np(_rms_np(rows["k"], p[f"{pre}.mem.k_gain"], cfg.eps))
        vh = rows["v"]
        eta_t = np.logaddexp(0.0, x_hat @ p[f"{pre}.mem.lr_w"] + p[f"{pre}.mem.lr_b"][0])
        sig_t = _sig_np(x_hat @ p[f"{pre}.mem.mu_w"] + p[f"{pre}.mem.mu_b"][0])

        if rt.memory_rule == "ttt":
            read = memory_read(ls.mem_state.weights, constant(qh[:, :, None, :])).data[:, :, 0, :]
            ls.k_buf.append(kh)
            ls.v_buf.append(vh)
            ls.eta_buf.append(eta_t)
            ls.sig_buf.append(sig_t)
            if len(ls.k_buf) == rt.chunk_size:
                kc = constant(np.stack(ls.k_buf, axis=2))
                vc = constant(np.stack(ls.v_buf, axis=2))
                etac = constant(np.stack(ls.eta_buf, axis=1)[:, None, :, None])
                mu = constant(np.mean(np.stack(ls.sig_buf, axis=1), axis=1).reshape(batch, 1, 1, 1))
                ls.mem_state = absorb_chunk(ls.mem_state, kc, vc, etac, mu, ls.mem_cfg)
                ls.k_buf, ls.v_buf, ls.eta_buf, ls.sig_buf = [], [], [], []
        else:
            alpha_t = sig_t.reshape(batch, 1, 1, 1)
            outer = vh[..., :, None] * kh[..., None, :]
            if rt.memory_rule == "mamba2":
                ls.lin_m = alpha_t * ls.lin_m + outer
            else:
                beta_t = eta_t.reshape(batch, 1, 1, 1)
                mk_read = np.einsum("bhde,bhe->bhd", ls.lin_m, kh)
                ls.lin_m = (
                    alpha_t * ls.lin_m
                    - beta_t * (mk_read[..., :, None] * kh[..., None, :])
                    + beta_t * outer
                )
            read = np.einsum("bhde,bhe->bhd", ls.lin_m, qh)

        read = read.reshape(batch, cfg.mem_dim)
        gate = _sig_np(x_hat @ p[f"{pre}.mem.gate_w"].T)
        mem_out = (gate * read) @ p[f"{pre}.mem.out_w"].T
        return out + p[f"{pre}.mem.alpha"] * mem_out

    @staticmethod
    def _rot(x, cos, sin):
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
