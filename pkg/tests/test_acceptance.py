"""Acceptance gate: one test per shipped guarantee, each printing a verdict line.

Every test here re-derives its expected values from an independent route
(finite differences, scalar recurrences, closed-form identities, enumeration)
rather than trusting the library's own arithmetic, and each prints exactly one
``[accept] <name>: PASS/FAIL`` line with the measured worst case and elapsed
time.  Budgets are asserted too: these checks are meant to stay cheap enough
to run on every change.
"""

import dataclasses
import time

import numpy as np
import numpy.testing as npt

from swamem.attention import AttnConfig, WindowKVCache
from swamem.costs import band_check
from swamem.distill import (
    DistillSpec,
    convert_teacher,
    distill,
    train_teacher_curriculum,
)
from swamem.linear_memory import mamba2_step
from swamem.memory import (
    MemoryConfig,
    MemoryState,
    init_fast_weights,
    init_state,
    inner_gradients,
    inner_loss,
    process_chunk,
    serialize_state,
)
from swamem.mixer import Model, ModelConfig, Runtime
from swamem.tasks import gen_task, recall
from swamem.tensor import Tape, Tensor, constant, matmul, mT, silu, tsum

# ----------------------------------------------------------------------
# reporting helper: exactly one verdict line per criterion


def _verdict(name: str, ok: bool, elapsed: float, budget: float, detail: str):
    line = (f"[accept] {name}: {'PASS' if ok else 'FAIL'} "
            f"({detail}; {elapsed:.2f}s of {budget:.0f}s budget)")
    print(line)
    assert ok, line
    assert elapsed < budget, f"{name} exceeded its {budget:.0f}s budget: {elapsed:.2f}s"


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _rel(got, want, floor=1e-8):
    return float(np.max(np.abs(got - want) / (np.abs(want) + floor)))


# ----------------------------------------------------------------------
# 1. closed-form inner gradients vs finite differences and tape autodiff


def _np_read(wg, wu, wd, x):
    hg = x @ wg.T
    return (hg * _sig(hg) * (x @ wu.T)) @ wd.T + x


def _np_loss(wg, wu, wd, k, v, eta):
    return -float(np.sum(eta[:, None] * _np_read(wg, wu, wd, k) * v))


def _fd_grad(loss_of, w, h=1e-5):
    g = np.zeros_like(w)
    flat, gf = w.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_of()
        flat[i] = orig - h
        fm = loss_of()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def test_01_inner_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_fd, worst_tape, worst_mid = 0.0, 0.0, 0.0
    for trial in range(20):
        hidden = int(rng.integers(5, 12))
        d = int(rng.integers(3, 9))
        c = int(rng.integers(3, 8))
        cfg = MemoryConfig(n_heads=1, head_dim=d, hidden=hidden, chunk_size=c)
        wg = rng.normal(0, 0.5, size=(hidden, d))
        wu = rng.normal(0, 0.5, size=(hidden, d))
        wd = rng.normal(0, 0.5, size=(d, hidden))
        k = rng.normal(size=(c, d))
        v = rng.normal(size=(c, d))
        eta = np.abs(rng.normal(0.3, 0.2, size=c)) + 0.05

        ws = (Tensor(wg[None, None]), Tensor(wu[None, None]), Tensor(wd[None, None]))
        kt, vt = Tensor(k[None, None]), Tensor(v[None, None])
        et = Tensor(eta[None, None, :, None])
        dg, du, dd = inner_gradients(ws, kt, vt, et, cfg)

        # route A: central finite differences of the weighted dot-product loss
        fd_g = _fd_grad(lambda: _np_loss(wg, wu, wd, k, v, eta), wg)
        fd_u = _fd_grad(lambda: _np_loss(wg, wu, wd, k, v, eta), wu)
        fd_d = _fd_grad(lambda: _np_loss(wg, wu, wd, k, v, eta), wd)
        worst_fd = max(worst_fd, _rel(dg.data[0, 0], fd_g), _rel(du.data[0, 0], fd_u),
                       _rel(dd.data[0, 0], fd_d))

        # route B: reverse-mode tape through the same loss
        tape = Tape()
        leaves = (tape.leaf(wg[None, None]), tape.leaf(wu[None, None]),
                  tape.leaf(wd[None, None]))
        tape.backward(inner_loss(leaves, constant(k[None, None]),
                                 constant(v[None, None]),
                                 constant(eta[None, None, :, None])))
        worst_tape = max(worst_tape,
                         _rel(dg.data, tape.grad(leaves[0])),
                         _rel(du.data, tape.grad(leaves[1])),
                         _rel(dd.data, tape.grad(leaves[2])))

        # route C: each intermediate of the hand chain, checked against the
        # tape gradient at a pass-through leaf inserted at that node.  The
        # hand quantities strip the per-token rate, so the tape gradient
        # equals eta * G_<node> elementwise.
        hg_v = k @ wg.T
        hin_v = k @ wu.T
        a_v = hg_v * _sig(hg_v) * hin_v
        out_v = a_v @ wd.T + k
        g_out = -v
        g_a = g_out @ wd
        g_in = g_a * (hg_v * _sig(hg_v))
        g_gate = g_a * hin_v * (_sig(hg_v) * (1 + hg_v * (1 - _sig(hg_v))))
        ec = eta[:, None]

        tp = Tape()
        lout = tp.leaf(out_v)
        tp.backward(tsum(-constant(ec) * lout * constant(v)))
        worst_mid = max(worst_mid, _rel(tp.grad(lout), ec * g_out))

        tp = Tape()
        la = tp.leaf(a_v)
        out = matmul(la, mT(constant(wd))) + constant(k)
        tp.backward(tsum(-constant(ec) * out * constant(v)))
        worst_mid = max(worst_mid, _rel(tp.grad(la), ec * g_a))

        tp = Tape()
        lhg, lhin = tp.leaf(hg_v), tp.leaf(hin_v)
        out = matmul(silu(lhg) * lhin, mT(constant(wd))) + constant(k)
        tp.backward(tsum(-constant(ec) * out * constant(v)))
        worst_mid = max(worst_mid, _rel(tp.grad(lhin), ec * g_in),
                        _rel(tp.grad(lhg), ec * g_gate))

    ok = worst_fd < 1e-5 and worst_tape < 1e-10 and worst_mid < 1e-10
    _verdict("inner-gradient fidelity", ok, time.perf_counter() - t0, 10.0,
             f"fd rel {worst_fd:.1e}, tape rel {worst_tape:.1e}, "
             f"chain-node rel {worst_mid:.1e}, 20 instances")


# ----------------------------------------------------------------------
# 2. read/normalize/update order is observable and deterministic


def test_02_pipeline_order():
    t0 = time.perf_counter()
    cfg = MemoryConfig(n_heads=1, head_dim=4, hidden=6, chunk_size=8)
    rng = np.random.default_rng(7)
    init = init_fast_weights(rng, cfg)
    init["w_down"] = rng.normal(0, 0.4, size=init["w_down"].shape)
    base = init_state(cfg, init, batch=1)
    state = MemoryState(weights=tuple(w * 1.9 for w in base.weights),
                        momentum=base.momentum, targets=base.targets)
    c = cfg.chunk_size
    q = Tensor(rng.normal(size=(1, 1, c, 4)))
    k = Tensor(rng.normal(size=(1, 1, c, 4)))
    v = Tensor(rng.normal(size=(1, 1, c, 4)))
    eta = Tensor(np.abs(rng.normal(0.3, 0.1, size=(1, 1, c, 1))))
    mu = constant(np.full((1, 1, 1, 1), 0.8))
    runs = {}
    stable = True
    for order in ("read_first", "normalize_first"):
        a, _ = process_chunk(state, q, k, v, eta, mu, cfg, order=order)
        b, _ = process_chunk(state, q, k, v, eta, mu, cfg, order=order)
        stable = stable and bool(np.array_equal(a.data, b.data))
        runs[order] = a.data
    gap = float(np.max(np.abs(runs["read_first"] - runs["normalize_first"])))
    _verdict("pipeline order", stable and gap > 0.0, time.perf_counter() - t0, 1.0,
             f"order gap {gap:.3e}, reruns bitwise stable: {stable}")


# ----------------------------------------------------------------------
# 3. converted student with the fusion gate at zero == windowed teacher


def test_03_gate_zero_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(31)
    worst = 0.0
    teacher = Model.init(ModelConfig(), seed=3)
    student = convert_teacher(teacher, seed=9)
    assert all(np.all(student.params[f"layers.{i}.mem.alpha"] == 0.0)
               for i in range(teacher.cfg.n_layers))
    for _ in range(10):
        length = int(rng.integers(20, 97))
        w = int(rng.integers(4, 25))
        s = int(rng.integers(0, 5))
        cchunk = int(rng.integers(4, 12))
        ids = rng.integers(0, teacher.cfg.vocab, size=(1, length))
        t_logits = teacher.logits(ids, rt=Runtime("swa", w, s, cchunk, "none"))
        s_logits = student.logits(ids, rt=Runtime("swa", w, s, cchunk, "ttt"))
        worst = max(worst, float(np.max(np.abs(t_logits - s_logits))))
    _verdict("zero-gate reduction", worst <= 1e-12, time.perf_counter() - t0, 5.0,
             f"max |logit delta| {worst:.2e} over 10 sequences")


# ----------------------------------------------------------------------
# 4. decaying rank-1 update == one gradient step on its quadratic objective


def test_04_mamba_gradient_step_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 9))
        m = rng.normal(size=(d, d))
        k = rng.normal(size=d)
        v = rng.normal(size=d)
        alpha = float(rng.uniform(0.0, 1.0))
        got = mamba2_step(
            Tensor(m[None, None]), Tensor(k[None, None]), Tensor(v[None, None]),
            constant(np.full((1, 1, 1, 1), alpha)),
        ).data[0, 0]
        # d/dM [ -v^T M k + (1-alpha)/2 ||M||_F^2 ], one unit-rate step
        grad = -np.outer(v, k) + (1.0 - alpha) * m
        worst = max(worst, float(np.max(np.abs(got - (m - grad)))))
    _verdict("rank-1 update as gradient step", worst <= 1e-12,
             time.perf_counter() - t0, 1.0, f"max |delta| {worst:.2e} over 20 draws")


# ----------------------------------------------------------------------
# 5. state stays O(1) in sequence length; KV cache stays O(window)


def test_05_constant_state_bounded_cache():
    t0 = time.perf_counter()
    cfg = MemoryConfig(n_heads=2, head_dim=4, hidden=8, chunk_size=64)
    rng = np.random.default_rng(5)
    init = init_fast_weights(rng, cfg)
    sizes = []
    for length in (64, 1024, 8192):
        state = init_state(cfg, init, batch=1)
        for _ in range(length // cfg.chunk_size):
            q = Tensor(rng.normal(size=(1, 2, 64, 4)))
            k = Tensor(rng.normal(size=(1, 2, 64, 4)))
            v = Tensor(rng.normal(size=(1, 2, 64, 4)))
            eta = Tensor(np.abs(rng.normal(0.2, 0.05, size=(1, 2, 64, 1))))
            mu = constant(np.full((1, 1, 1, 1), 0.7))
            _, state = process_chunk(state, q, k, v, eta, mu, cfg)
        sizes.append(len(serialize_state(state)))
    state_ok = sizes[0] == sizes[1] == sizes[2]

    cache_ok = True
    for i in range(50):
        crng = np.random.default_rng(500 + i)
        n_kv = int(crng.integers(1, 4))
        acfg = AttnConfig(
            n_heads=n_kv * int(crng.integers(1, 3)),
            n_kv_heads=n_kv,
            head_dim=2 * int(crng.integers(1, 5)),
            window=int(crng.integers(1, 10)),
            sinks=int(crng.integers(0, 5)),
        )
        batch = int(crng.integers(1, 4))
        cache = WindowKVCache(acfg, batch=batch)
        bytes0 = cache.capacity_bytes()
        total = acfg.sinks + acfg.window + int(crng.integers(1, 21))
        for t in range(total):
            kv = crng.normal(size=(batch, acfg.n_kv_heads, acfg.head_dim))
            cache.append(kv, kv, t)
        cache_ok = cache_ok and cache.n_entries == acfg.sinks + acfg.window
        cache_ok = cache_ok and cache.capacity_bytes() == bytes0
    _verdict("constant state, bounded cache", state_ok and cache_ok,
             time.perf_counter() - t0, 30.0,
             f"state bytes {sizes}, 50 cache configs at sinks+window")


# ----------------------------------------------------------------------
# 6. streaming decode reproduces batched prefill


def test_06_prefill_decode_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    rules = ["ttt", "mamba2", "delta", "none"]
    worst = 0.0
    for i in range(10):
        rule = rules[i % 4]
        model = Model.init(ModelConfig(), seed=60 + i)
        rt = Runtime("swa", int(rng.integers(4, 17)), int(rng.integers(0, 4)),
                     int(rng.integers(3, 10)), rule)
        batch = int(rng.integers(1, 3))
        length = int(rng.integers(16, 129))
        ids = rng.integers(0, model.cfg.vocab, size=(batch, length))
        want = model.logits(ids, rt=rt)
        sess = model.stream(rt=rt, batch=batch)
        got = np.stack([sess.step(ids[:, t]) for t in range(length)], axis=1)
        worst = max(worst, float(np.max(np.abs(got - want))))
    _verdict("prefill/decode equivalence", worst <= 1e-8,
             time.perf_counter() - t0, 60.0,
             f"max |logit delta| {worst:.2e} over 10 configs")


# ----------------------------------------------------------------------
# 7. long-context cost anchor: unwindowed / hybrid ratio inside [7, 12]


def test_07_cost_anchor_band():
    t0 = time.perf_counter()
    # chunk size never enters the totals: the chunked update's contraction
    # work is linear in tokens, so it telescopes to a per-token constant.
    out = band_check()  # 128k tokens, window 4096, 128 sinks, 0.6B-like shape
    _verdict("cost anchor band", bool(out["ok"]), time.perf_counter() - t0, 1.0,
             f"mul-add ratio {out['ratio_ops2']:.4f}, "
             f"single-op ratio {out['ratio_ops1']:.4f}, band {out['band']}")


# ----------------------------------------------------------------------
# 8. distilled memory beats windowed attention alone on far recall
#
# The probe geometry is fixed (window 16, 2 sinks) and every recall pair sits
# at least 36 tokens from the query -- outside the reach of two stacked
# 16-token windows -- so windowed attention alone scores near chance and any
# lift must come from the memory branch.  The same probe batch (its own seed)
# scores every model.


def _probe_far_recall(model: Model, rule: str) -> float:
    probe = gen_task("associative_recall", 96, 96, np.random.default_rng(7001),
                     n_pairs=4, placement="far", far_margin=36)
    rt = Runtime(attention_mode="swa", window=16, sinks=2, chunk_size=8,
                 memory_rule=rule)
    return recall(model, probe, rt)


def test_08_far_recall_separation():
    t0 = time.perf_counter()
    teacher = Model.init(ModelConfig(), seed=0)
    train_teacher_curriculum(teacher, np.random.default_rng(1))
    teacher_far = recall(
        teacher,
        gen_task("associative_recall", 96, 96, np.random.default_rng(7001),
                 n_pairs=4, placement="far", far_margin=36),
        teacher.runtime(attention_mode="full", memory_rule="none"),
    )
    # Geometry ranges here are tightened around the probe point: with windows
    # drawn up to 64 on 96-token sequences, most training batches are solvable
    # by attention alone and the memory branch feels almost no pressure (far
    # recall ~0.13 after 400 steps); drawing windows in [8, 16] keeps the
    # recall pairs out of attention's reach so the distillation loss can only
    # be paid down by the memory.  Sink range stays at the default.
    spec = DistillSpec(window_range=(8, 16), chunk_range=(4, 8), eval_every=400)
    trained, windowed_only, untrained = [], [], []
    for seed in (1, 2, 3):
        student = convert_teacher(teacher, seed=seed)
        windowed_only.append(_probe_far_recall(student, "none"))
        untrained.append(_probe_far_recall(student, "ttt"))
        result = distill(teacher, student, spec, np.random.default_rng(100 + seed))
        trained.append(result.final_far_recall)
    linear_student = convert_teacher(teacher, seed=1)
    linear_result = distill(teacher, linear_student,
                            dataclasses.replace(spec, rule="mamba2"),
                            np.random.default_rng(201))
    t_mean = float(np.mean(trained))
    w_mean = float(np.mean(windowed_only))
    u_mean = float(np.mean(untrained))
    ok = t_mean >= w_mean + 0.20 and t_mean >= u_mean + 0.30
    _verdict(
        "far-recall separation", ok, time.perf_counter() - t0, 1800.0,
        f"trained {t_mean:.3f} vs windowed-only {w_mean:.3f} "
        f"(+{(t_mean - w_mean) * 100:.0f}pts, need +20) and untrained "
        f"{u_mean:.3f} (+{(t_mean - u_mean) * 100:.0f}pts, need +30); "
        f"linear-rule student {linear_result.final_far_recall:.3f} "
        f"(reported, no ordering); teacher full-attention {teacher_far:.3f}",
    )


# ----------------------------------------------------------------------
# 9. the distillation loop freezes what it promises and is seed-reproducible


def _tiny_distill(teacher):
    spec = DistillSpec(steps=6, batch=4, length=48, far_margin=20, near_span=10,
                       eval_every=3, eval_batch=32, window_range=(6, 16),
                       sinks_range=(0, 2), chunk_range=(4, 8))
    student = convert_teacher(teacher, seed=1)
    result = distill(teacher, student, spec, np.random.default_rng(123))
    return student, result


def test_09_freeze_and_determinism():
    t0 = time.perf_counter()
    teacher = Model.init(ModelConfig(), seed=5)
    student_a, result_a = _tiny_distill(teacher)
    student_b, result_b = _tiny_distill(teacher)
    frozen_ok = result_a.frozen_hash_before == result_a.frozen_hash_after
    repro_ok = result_a.metrics == result_b.metrics and all(
        np.array_equal(student_a.params[name], student_b.params[name])
        for name in student_a.params
    )
    moved = any(
        not np.array_equal(student_a.params[n], convert_teacher(teacher, seed=1).params[n])
        for n in student_a.params if ".mem." in n
    )
    _verdict("freeze contract and determinism", frozen_ok and repro_ok and moved,
             time.perf_counter() - t0, 300.0,
             f"frozen hash equal: {frozen_ok}, reruns identical: {repro_ok}, "
             f"memory params moved: {moved}")
