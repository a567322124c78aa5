"""Teacher pretraining and teacher-to-student distillation.

The workflow this module implements:

1. `train_teacher` fits an unwindowed-attention model (memory branch off)
   on associative-recall batches with Adam until it solves the task.
   `train_teacher_curriculum` runs it in two stages -- short sequences
   first, then full length.  The short stage matters: trained directly on
   long sequences, the teacher tends to relay pair payloads through
   mid-sequence scratch positions (plenty of idle filler to write to), a
   strategy whose critical hops sit outside any small window and which a
   windowed student therefore cannot inherit.  With only ~24 positions
   there is no room for that, and the teacher is forced into the local
   copy-forward circuit (match the repeated key one step back, fetch the
   token after its first occurrence) that survives windowing.
2. `convert_teacher` turns that checkpoint into a windowed student: all
   attention/MLP weights are copied, and the memory branch is initialized
   so that its output projection gate (`alpha`) is zero -- the student's
   logits are bitwise identical to running the teacher's weights with
   windowed attention and no memory.  The memory producer starts from the
   teacher's own K/V projections (and the matching query rows), giving the
   inner objective aligned keys and values from step one.
3. `distill` trains only the memory-branch parameters (names containing
   ".mem.") to match the teacher's output distribution, resampling the
   student's window/sink/chunk geometry every step so the memory cannot
   overfit one attention layout.  Everything outside the branch stays
   frozen, which `params_hash` over the frozen names makes checkable.
   Before the first step it re-seats three trainable tensors (see
   `_warm_start`): straight out of conversion the fusion gate is zero and
   the fast-weight down rows are zero, so every inner-loop feature
   gradient is identically zero (G_A = G_out W_down = 0) and the cheapest
   descent direction is to mute the memory rather than use it.

The harness is offline: batches come from `swamem.tasks`, no decode session
is ever opened (see `Model.stream_calls`), and the teacher's distribution
is computed fresh per batch under its own full-attention runtime.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyLossError, NumericError
from .mixer import Model, Runtime, init_params, params_hash
from .tasks import Batch, gen_task, recall
from .tensor import Tape, constant, log_softmax, take_along_last, tsum

__all__ = [
    "DistillSpec",
    "DistillResult",
    "METRICS_HEADER",
    "TEACHER_STAGES",
    "ce_loss",
    "distill_loss",
    "convert_teacher",
    "sample_runtime",
    "smoke_lr_check",
    "train_teacher",
    "train_teacher_curriculum",
    "distill",
    "trainable_names",
    "frozen_names",
]

METRICS_HEADER = "step,loss_kl,loss_ce,far_recall,near_recall"


# ----------------------------------------------------------------------
# losses


def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def ce_loss(logits, ids: np.ndarray, mask: np.ndarray):
    """Mean next-token cross-entropy over masked positions.

    `mask[b, t] == 1` scores the logits at (b, t) against target
    `ids[b, t + 1]`; positions with t == L-1 cannot be scored.
    """
    total = float(mask[:, :-1].sum())
    if total == 0.0 or float(mask[:, -1].sum()) != 0.0:
        raise EmptyLossError("mask must select at least one position before the last")
    logp = log_softmax(logits[:, :-1])
    picked = take_along_last(logp, ids[:, 1:])
    return -tsum(constant(mask[:, :-1]) * picked) / total


def distill_loss(
    student_logits,
    teacher_logits: np.ndarray,
    batch: Batch,
    *,
    kl_weight: float = 1.0,
    ce_weight: float = 0.0,
    temperature: float = 1.0,
):
    """alpha * KL(teacher || student) + beta * CE, averaged over masked positions.

    Both softmaxes in the KL term are computed from logits scaled by
    1/`temperature` (the CE term always uses unscaled logits).  The teacher
    term enters as constants: gradients flow only through the student's
    log-probabilities.  Returns (loss Tensor, kl float, ce float).
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    mask = batch.mask[:, :-1]
    total = float(mask.sum())
    if total == 0.0:
        raise EmptyLossError("distillation mask selects no positions")
    inv_t = 1.0 / temperature
    t_logp = _np_log_softmax(teacher_logits[:, :-1] * inv_t)
    t_prob = np.exp(t_logp)
    s_logp = log_softmax(student_logits[:, :-1] * inv_t if inv_t != 1.0
                         else student_logits[:, :-1])
    pointwise = tsum(constant(t_prob * t_logp) - constant(t_prob) * s_logp, axis=-1)
    kl = tsum(constant(mask) * pointwise) / total
    ce = ce_loss(student_logits, batch.ids, batch.mask)
    loss = kl * kl_weight + ce * ce_weight if ce_weight != 0.0 else kl * kl_weight
    return loss, float(kl.data), float(ce.data)


# ----------------------------------------------------------------------
# teacher -> student conversion


def trainable_names(model: Model) -> list[str]:
    return sorted(n for n in model.params if ".mem." in n)


def frozen_names(model: Model) -> list[str]:
    return sorted(n for n in model.params if ".mem." not in n)


def convert_teacher(teacher: Model, seed: int = 0) -> Model:
    """Clone a full-attention teacher into a windowed hybrid student.

    Shared weights are copied verbatim.  Memory producer projections start
    from the attention branch's own K/V (and the first query head of each
    KV group, so producer queries match attention queries), convolutions
    start as identity taps, and the fusion gate `alpha` starts at zero:
    before any training, the student equals the teacher-with-a-window.
    """
    cfg = teacher.cfg
    if cfg.mem_head_dim != cfg.head_dim:
        raise ConfigError(
            "conversion needs mem_head_dim == head_dim "
            f"(got {cfg.mem_head_dim} != {cfg.head_dim})"
        )
    if cfg.mem_dim != cfg.n_kv_heads * cfg.head_dim:
        raise ConfigError("conversion needs mem_dim == kv_width")
    params = {k: v.copy() for k, v in teacher.params.items()}
    fresh = init_params(cfg, np.random.default_rng(seed))
    group = cfg.n_heads // cfg.n_kv_heads
    for i in range(cfg.n_layers):
        attn, mem = f"layers.{i}.attn", f"layers.{i}.mem"
        params[f"{mem}.w_k"] = params[f"{attn}.w_k"].copy()
        params[f"{mem}.w_v"] = params[f"{attn}.w_v"].copy()
        q_rows = [
            params[f"{attn}.w_q"][g * group * cfg.head_dim : (g * group + 1) * cfg.head_dim]
            for g in range(cfg.n_kv_heads)
        ]
        params[f"{mem}.w_q"] = np.concatenate(q_rows, axis=0)
        params[f"{mem}.q_gain"] = np.broadcast_to(
            params[f"{attn}.q_gain"], (cfg.n_mem, cfg.head_dim)
        ).copy()
        params[f"{mem}.k_gain"] = params[f"{attn}.k_gain"].copy()
        for name in ("conv_q", "conv_k", "conv_v", "gate_w", "lr_w", "mu_w", "lr_b",
                     "mu_b", "alpha", "out_w", "init_gate", "init_up", "init_down"):
            params[f"{mem}.{name}"] = fresh[f"{mem}.{name}"].copy()
    student = Model(dataclasses.replace(cfg, attention_mode="swa", memory_rule="ttt"), params)
    return student


# ----------------------------------------------------------------------
# optimizers (plain numpy on the params dict)


class _Adam:
    def __init__(self, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names, self.lr = list(names), lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            m = self.m.setdefault(n, np.zeros_like(params[n]))
            v = self.v.setdefault(n, np.zeros_like(params[n]))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            mhat = m / (1 - self.beta1**self.t)
            vhat = v / (1 - self.beta2**self.t)
            params[n] = params[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _MomentumSGD:
    def __init__(self, names, lr, momentum=0.9, clip=1.0):
        self.names, self.lr, self.momentum, self.clip = list(names), lr, momentum, clip
        self.buf = {}

    def step(self, params, grads):
        if self.clip is not None:
            norm = np.sqrt(sum(float((grads[n] ** 2).sum()) for n in self.names if n in grads))
            scale = min(1.0, self.clip / max(norm, 1e-12))
        else:
            scale = 1.0
        for n in self.names:
            g = grads.get(n)
            if g is None:
                continue
            b = self.buf.setdefault(n, np.zeros_like(params[n]))
            b *= self.momentum
            b -= self.lr * scale * g
            params[n] = params[n] + b


def _backward_grads(model, ids, rt, trainable, loss_fn):
    tape = Tape()
    logits, leaves = model.forward(ids, rt=rt, tape=tape, trainable=trainable)
    loss_t, *extra = loss_fn(logits)
    tape.backward(loss_t)
    grads = {}
    for name, leaf in leaves.items():
        g = tape.grad(leaf)
        if g is not None:
            grads[name] = g
    return (float(loss_t.data), *extra), grads


# ----------------------------------------------------------------------
# teacher pretraining


def train_teacher(
    model: Model,
    rng: np.random.Generator,
    *,
    steps: int = 2500,
    batch: int = 32,
    length: int = 96,
    lr: float = 3e-3,
    n_pairs: int | tuple[int, int] = 4,
    n_queries: int = 8,
    target_recall: float = 0.97,
    eval_every: int = 100,
    eval_batch: int = 128,
    far_margin: int | None = None,
) -> list[dict]:
    """Adam-train a full-attention model on associative recall.

    Trains every non-memory parameter on multi-query batches (`n_queries`
    answer positions per sequence -- the dense supervision matters: recall
    formation shows a sharp phase transition, typically after ~1200 steps
    at these defaults).  `n_pairs` may be an (lo, hi) tuple, in which case
    each step draws its pair count uniformly from that inclusive range --
    varying the load stops the model from keying on a fixed layout.  Stops
    early once held-out single-query recall reaches `target_recall` for
    pairs placed anywhere AND far from the query.  Returns the eval
    history (step, loss, recall, far_recall).
    """
    rt = model.runtime(attention_mode="full", memory_rule="none")
    opt = _Adam(frozen_names(model), lr)
    if far_margin is None:
        # shrink the probe margin for short sequences so the far zone
        # stays feasible (the teacher sees everything regardless)
        far_margin = min(36, max(4, length // 2 - 2))
    pair_lo, pair_hi = (n_pairs, n_pairs) if isinstance(n_pairs, int) else n_pairs
    probe_pairs = round((pair_lo + pair_hi) / 2)
    history = []
    for step in range(1, steps + 1):
        pairs = int(rng.integers(pair_lo, pair_hi + 1))
        data = gen_task("associative_recall", batch, length, rng,
                        n_pairs=pairs, placement="anywhere", n_queries=n_queries)
        (loss,), grads = _backward_grads(
            model, data.ids, rt, frozen_names(model),
            lambda lg: (ce_loss(lg, data.ids, data.mask),),
        )
        if not np.isfinite(loss) or loss > 50.0:
            raise NumericError(f"teacher loss diverged at step {step}: {loss}")
        opt.step(model.params, grads)
        if step % eval_every == 0 or step == steps:
            probe = gen_task("associative_recall", eval_batch, length,
                             np.random.default_rng(999), n_pairs=probe_pairs,
                             placement="anywhere")
            far = gen_task("associative_recall", eval_batch, length,
                           np.random.default_rng(998), n_pairs=probe_pairs,
                           placement="far", far_margin=far_margin)
            acc, acc_far = recall(model, probe, rt), recall(model, far, rt)
            history.append({"step": step, "loss": loss, "recall": acc,
                            "far_recall": acc_far})
            if acc >= target_recall and acc_far >= target_recall:
                break
    return history


# Two-stage teacher curriculum.  Stage one is deliberately cramped: at 24
# positions there is no idle filler for the model to relay pair payloads
# through, so the only strategy that fits is the local copy-forward
# circuit (attend to the repeated key one step back, then fetch the token
# that followed its first occurrence).  Stage two stretches that circuit
# to full length.  Teachers trained on long sequences from scratch solve
# the task a different way -- parking payloads on mid-sequence positions
# -- which no windowed student can reproduce, and distillation from such
# a teacher stalls at chance-level far recall.
TEACHER_STAGES: tuple[dict, ...] = (
    dict(length=24, n_pairs=(2, 6), n_queries=2, steps=2500),
    dict(length=96, n_pairs=4, n_queries=8, steps=1500),
)


def train_teacher_curriculum(
    model: Model,
    rng: np.random.Generator,
    *,
    stages: tuple[dict, ...] = TEACHER_STAGES,
    **overrides,
) -> list[list[dict]]:
    """Run `train_teacher` over a staged curriculum (short, then long).

    `overrides` apply on top of every stage (e.g. `steps=50` for a smoke
    run).  Returns one eval history per stage.
    """
    return [train_teacher(model, rng, **{**stage, **overrides}) for stage in stages]


# ----------------------------------------------------------------------
# distillation


@dataclass(frozen=True)
class DistillSpec:
    """Knobs for one distillation run.

    `far_frac` is the fraction of training batches whose recall pairs are
    forced outside any sampled window (the rest place pairs anywhere):
    without it, most randomly placed pairs land within reach of attention
    and the memory branch never feels pressure to carry them.  The
    `warm_*` knobs control the pre-step re-seating of pathological zeros
    (see `_warm_start`); `warm_start=False` trains straight from the
    converted initialization.
    """

    steps: int = 400
    batch: int = 24
    length: int = 96
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 1.0
    kl_weight: float = 1.0
    ce_weight: float = 0.0
    temperature: float = 1.0
    trainable_filter: str = ".mem."
    rule: str = "ttt"
    n_pairs: int = 4
    n_queries: int = 8
    far_frac: float = 0.5
    far_margin: int = 36
    near_span: int = 16
    window_range: tuple = (8, 64)
    sinks_range: tuple = (0, 4)
    chunk_range: tuple = (4, 32)
    warm_start: bool = True
    warm_alpha: float = 0.1
    warm_down_norm: float = 0.5
    warm_seed: int = 77
    eval_every: int = 50
    eval_batch: int = 96
    eval_runtime: Runtime = field(
        default_factory=lambda: Runtime(
            attention_mode="swa", window=16, sinks=2, chunk_size=8, memory_rule="ttt"
        )
    )
    divergence_threshold: float = 50.0

    @classmethod
    def paper_scale(cls, **overrides) -> "DistillSpec":
        """Spec with sampling ranges at full production scale (128x the
        default desk ranges, same ordering relations)."""
        kw = dict(
            sinks_range=(0, 256),
            window_range=(512, 8192),
            chunk_range=(512, 4096),
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class DistillResult:
    metrics: list
    frozen_hash_before: str
    frozen_hash_after: str
    final_far_recall: float
    final_near_recall: float

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write(METRICS_HEADER + "\n")
        for row in self.metrics:
            buf.write(
                f"{row['step']},{row['loss_kl']:.6f},{row['loss_ce']:.6f},"
                f"{row['far_recall']:.4f},{row['near_recall']:.4f}\n"
            )
        return buf.getvalue()


def sample_runtime(rng: np.random.Generator, spec: DistillSpec) -> Runtime:
    """Draw a window/sink/chunk geometry for one student step."""
    return Runtime(
        attention_mode="swa",
        window=int(rng.integers(spec.window_range[0], spec.window_range[1] + 1)),
        sinks=int(rng.integers(spec.sinks_range[0], spec.sinks_range[1] + 1)),
        chunk_size=int(rng.integers(spec.chunk_range[0], spec.chunk_range[1] + 1)),
        memory_rule=spec.rule,
    )


def _warm_start(student: Model, spec: DistillSpec) -> None:
    """Re-seat the three trainables that conversion leaves at dead zeros.

    The converted student is exact (gate zero, memory silent), but as a
    training start it is pathological: with the fast-weight down matrix at
    zero, the gradient reaching the gate/up features is `G_out @ W_down.T
    == 0`, so the inner loop cannot begin learning features; and with the
    fusion gate at zero and the readout random, the steepest descent on
    the matching loss is to keep the memory muted rather than use it.
    Three local edits open those paths without touching frozen weights:

    * `out_w` <- the attention output-projection columns of each KV
      group's first query head, so a memory read of a value vector decodes
      through the same channels the teacher already listens to;
    * `alpha` <- a small uniform gate, so readout error is visible to the
      loss from step one;
    * `init_down` <- random rows rescaled to a fixed norm, so feature
      gradients are nonzero at the first inner-loop write.

    Only `.mem.` parameters move, so frozen-parameter hashes are
    unaffected.  Skipped entirely when `spec.steps == 0` (a zero-step run
    must leave the student bitwise equal to the converted teacher).
    """
    cfg = student.cfg
    group = cfg.n_heads // cfg.n_kv_heads
    # the column-copy only types when memory heads mirror attention's KV
    # geometry (always true for convert_teacher output)
    aligned = cfg.mem_head_dim == cfg.head_dim and cfg.n_mem == cfg.n_kv_heads
    wrng = np.random.default_rng(spec.warm_seed)
    for i in range(cfg.n_layers):
        if aligned:
            w_o = student.params[f"layers.{i}.attn.w_o"]
            blocks = [
                w_o[:, (h * group) * cfg.head_dim : (h * group + 1) * cfg.head_dim]
                for h in range(cfg.n_mem)
            ]
            student.params[f"layers.{i}.mem.out_w"] = np.concatenate(blocks, axis=1).copy()
        student.params[f"layers.{i}.mem.alpha"] = np.full(cfg.d_model, spec.warm_alpha)
        down = wrng.normal(size=student.params[f"layers.{i}.mem.init_down"].shape)
        down *= spec.warm_down_norm / np.linalg.norm(down, axis=-1, keepdims=True)
        student.params[f"layers.{i}.mem.init_down"] = down


def _eval_recalls(student: Model, spec: DistillSpec, rule: str) -> tuple[float, float]:
    rt = dataclasses.replace(spec.eval_runtime, memory_rule=rule)
    far = gen_task("associative_recall", spec.eval_batch, spec.length,
                   np.random.default_rng(7001), n_pairs=spec.n_pairs,
                   placement="far", far_margin=spec.far_margin)
    near = gen_task("associative_recall", spec.eval_batch, spec.length,
                    np.random.default_rng(7002), n_pairs=spec.n_pairs,
                    placement="near", near_span=spec.near_span)
    return recall(student, far, rt), recall(student, near, rt)


def distill(
    teacher: Model,
    student: Model,
    spec: DistillSpec,
    rng: np.random.Generator,
) -> DistillResult:
    """Match the student's masked-position distribution to the teacher's.

    Only parameters whose names contain ".mem." receive updates; the hash
    of all other parameters is recorded before and after so callers can
    verify the freeze held.  The student's attention geometry is resampled
    from `spec` every step; the teacher always runs unwindowed with its
    memory off.  Batches mix far-placed and anywhere-placed recall pairs
    (`spec.far_frac`), each scored at `spec.n_queries` positions.
    """
    teacher_rt = teacher.runtime(attention_mode="full", memory_rule="none")
    train = sorted(n for n in student.params if spec.trainable_filter in n)
    frozen = sorted(n for n in student.params if spec.trainable_filter not in n)
    hash_before = params_hash(student.params, frozen)
    warm_names = [f"layers.{i}.mem.{p}" for i in range(student.cfg.n_layers)
                  for p in ("out_w", "alpha", "init_down")]
    if (spec.steps > 0 and spec.warm_start
            and all(spec.trainable_filter in n for n in warm_names)):
        # skip silently when a custom filter freezes any tensor the warm
        # start would touch -- the freeze contract outranks the better init
        _warm_start(student, spec)
    opt = _MomentumSGD(train, spec.lr, spec.momentum, spec.grad_clip)
    metrics = []
    for step in range(1, spec.steps + 1):
        placement = "far" if rng.random() < spec.far_frac else "anywhere"
        data = gen_task("associative_recall", spec.batch, spec.length, rng,
                        n_pairs=spec.n_pairs, placement=placement,
                        far_margin=spec.far_margin, n_queries=spec.n_queries)
        t_logits = teacher.logits(data.ids, rt=teacher_rt)
        rt = sample_runtime(rng, spec)
        (loss, kl, ce), grads = _backward_grads(
            student, data.ids, rt, train,
            lambda lg: _loss_triple(lg, t_logits, data, spec),
        )
        if not np.isfinite(loss) or loss > spec.divergence_threshold:
            raise NumericError(f"distillation diverged at step {step}: loss={loss}")
        opt.step(student.params, grads)
        if step % spec.eval_every == 0 or step == spec.steps:
            far, near = _eval_recalls(student, spec, spec.rule)
            metrics.append({
                "step": step, "loss_kl": kl, "loss_ce": ce,
                "far_recall": far, "near_recall": near,
            })
    far, near = metrics[-1]["far_recall"], metrics[-1]["near_recall"]
    return DistillResult(
        metrics=metrics,
        frozen_hash_before=hash_before,
        frozen_hash_after=params_hash(student.params, frozen),
        final_far_recall=far,
        final_near_recall=near,
    )


def _loss_triple(logits, t_logits, data, spec):
    loss, kl, ce = distill_loss(
        logits, t_logits, data, kl_weight=spec.kl_weight,
        ce_weight=spec.ce_weight, temperature=spec.temperature,
    )
    return loss, kl, ce


def smoke_lr_check(
    teacher: Model,
    student: Model,
    spec: DistillSpec,
    rng: np.random.Generator,
    *,
    steps: int = 200,
) -> dict:
    """Quick learning-rate sanity: does `steps` of near-split distillation
    at least halve the KL gap?

    Measures mean KL on a fixed near-split probe batch at the state
    training starts from (warm start included, when enabled) and again
    after a short all-near training run (far_frac=0).  Returns a dict with
    ``kl_start``, ``kl_end``, and ``halved``.  Meant for choosing `spec.lr`:
    a rate that cannot halve the easy split within a couple hundred steps
    is too low (or diverging) for the real run.
    """
    probe = gen_task("associative_recall", spec.eval_batch, spec.length,
                     np.random.default_rng(7003), n_pairs=spec.n_pairs,
                     placement="near", near_span=spec.near_span,
                     n_queries=spec.n_queries)
    teacher_rt = teacher.runtime(attention_mode="full", memory_rule="none")
    t_probe = teacher.logits(probe.ids, rt=teacher_rt)

    def measure() -> float:
        rt = dataclasses.replace(spec.eval_runtime, memory_rule=spec.rule)
        s_logits = student.logits(probe.ids, rt=rt)
        _, kl, _ = distill_loss(constant(s_logits), t_probe, probe,
                                temperature=spec.temperature)
        return kl

    if spec.warm_start:
        _warm_start(student, spec)  # idempotent; distill() re-applies the same values
    kl_start = measure()
    run_spec = dataclasses.replace(spec, steps=steps, far_frac=0.0,
                                   eval_every=steps)
    distill(teacher, student, run_spec, rng)
    kl_end = measure()
    return {"kl_start": kl_start, "kl_end": kl_end,
            "halved": kl_end <= 0.5 * kl_start}
