"""Exercise the linear fast-weight baselines: decaying outer-product and delta rule.

Three quick experiments on the per-head matrix memories:
  1. exact recall: with no decay, the delta rule stores orthogonal key/value
     pairs exactly (M q returns the paired value to machine precision);
  2. capacity contrast: when keys collide, the delta rule's subtract-then-write
     keeps retrieval clean while the plain outer-product accumulates cross-talk;
  3. decay forgets: with alpha < 1 old associations fade geometrically.

Run:  python3 demos/04_linear_baselines.py
"""

import numpy as np

from swamem.linear_memory import (
    LinearMemoryConfig,
    init_linear_state,
    linear_read,
    process_tokens,
)
from swamem.tensor import constant

D = 16


def slab(rows):
    """(L, d) -> (1, 1, L, d) single-batch single-head slab."""
    return constant(np.asarray(rows)[None, None])


def main():
    rng = np.random.default_rng(0)
    cfg = LinearMemoryConfig(n_heads=1, head_dim=D, rule="delta")

    # 1. orthonormal keys, no decay: delta retrieval is exact
    keys = np.linalg.qr(rng.normal(size=(D, D)))[0][:6]
    values = rng.normal(size=(6, D))
    alpha = constant(np.ones((1, 6)))
    beta = constant(np.ones((1, 6)))
    state = init_linear_state(cfg, batch=1)
    _, state = process_tokens(state, slab(keys), slab(keys), slab(values), alpha, beta, rule="delta")
    worst = 0.0
    for i in range(6):
        got = linear_read(state.m, constant(keys[None, None, i])).data[0, 0]
        worst = max(worst, np.max(np.abs(got - values[i])))
    print(f"delta rule, orthogonal keys: worst retrieval error {worst:.3e}")
    assert worst < 1e-12

    # 2. overwrite the same key: delta replaces, outer-product accumulates
    key = keys[0]
    v_old, v_new = values[0], values[1]
    seq_k = slab([key, key])
    seq_v = slab([v_old, v_new])
    two = constant(np.ones((1, 2)))
    d_state = init_linear_state(cfg, batch=1)
    _, d_state = process_tokens(d_state, seq_k, seq_k, seq_v, two, two, rule="delta")
    m_state = init_linear_state(LinearMemoryConfig(n_heads=1, head_dim=D, rule="mamba2"), batch=1)
    _, m_state = process_tokens(m_state, seq_k, seq_k, seq_v, two, rule="mamba2")
    d_got = linear_read(d_state.m, constant(key[None, None])).data[0, 0]
    m_got = linear_read(m_state.m, constant(key[None, None])).data[0, 0]
    print("rewritten key: delta error vs new value  "
          f"{np.max(np.abs(d_got - v_new)):.3e}")
    print("               mamba2 error vs new value "
          f"{np.max(np.abs(m_got - v_new)):.3e} (old value still superposed)")
    assert np.max(np.abs(d_got - v_new)) < 1e-12
    assert np.max(np.abs(m_got - (v_old + v_new))) < 1e-12

    # 3. decay: an association written once fades as alpha^steps
    cfg_m = LinearMemoryConfig(n_heads=1, head_dim=D, rule="mamba2")
    state = init_linear_state(cfg_m, batch=1)
    _, state = process_tokens(state, slab([key]), slab([key]), slab([v_old]),
                              constant(np.ones((1, 1))), rule="mamba2")
    zeros = np.zeros((8, D))
    _, state = process_tokens(state, slab(zeros), slab(zeros), slab(zeros),
                              constant(np.full((1, 8), 0.5)), rule="mamba2")
    got = linear_read(state.m, constant(key[None, None])).data[0, 0]
    ratio = np.linalg.norm(got) / np.linalg.norm(v_old)
    print(f"after 8 decay steps at alpha=0.5: retained fraction {ratio:.6f} (expect 0.5^8 = {0.5**8:.6f})")
    assert abs(ratio - 0.5 ** 8) < 1e-12
    print("linear baselines: OK")


if __name__ == "__main__":
    main()
