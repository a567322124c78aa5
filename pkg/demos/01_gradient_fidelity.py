"""Check fast-weight inner gradients against finite differences and the tape.

Two layers of verification for the closed-form update gradients used inside
the streaming memory:
  1. central finite differences of the inner objective, and
  2. reverse-mode autodiff of the same objective through the tape.

Run:  python3 demos/01_gradient_fidelity.py
"""

import numpy as np

from swamem.memory import MemoryConfig, inner_gradients, inner_loss
from swamem.tensor import Tape, Tensor, constant

CFG = MemoryConfig(n_heads=1, head_dim=6, hidden=10, chunk_size=8)


def np_loss(wg, wu, wd, k, v, eta):
    """Scalar reimplementation of the inner objective for differencing."""
    hg = k @ wg.T
    a = hg / (1.0 + np.exp(-hg)) * (k @ wu.T)
    read = a @ wd.T + k
    return -float(np.sum(eta[:, None] * read * v))


def fd_grad(loss_of, w, h=1e-5):
    g = np.zeros_like(w)
    flat, gf = w.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_of(w)
        flat[i] = orig - h
        lo = loss_of(w)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def batched(arr):
    return arr[None, None]


def main():
    rng = np.random.default_rng(0)
    print("fast-weight inner objective: closed form vs finite differences vs tape")
    print(f"{'draw':>4} {'fd rel err':>12} {'tape rel err':>14}")
    worst_fd, worst_tape = 0.0, 0.0
    for draw in range(5):
        wg = rng.normal(0, 0.5, size=(CFG.hidden, CFG.head_dim))
        wu = rng.normal(0, 0.5, size=(CFG.hidden, CFG.head_dim))
        wd = rng.normal(0, 0.5, size=(CFG.head_dim, CFG.hidden))
        k = rng.normal(size=(CFG.chunk_size, CFG.head_dim))
        v = rng.normal(size=(CFG.chunk_size, CFG.head_dim))
        eta = np.abs(rng.normal(0.3, 0.2, size=CFG.chunk_size))
        eta4 = eta[None, None, :, None]

        ws = (Tensor(batched(wg)), Tensor(batched(wu)), Tensor(batched(wd)))
        analytic = inner_gradients(ws, Tensor(batched(k)), Tensor(batched(v)), Tensor(eta4), CFG)

        numeric = (
            fd_grad(lambda w: np_loss(w, wu, wd, k, v, eta), wg.copy()),
            fd_grad(lambda w: np_loss(wg, w, wd, k, v, eta), wu.copy()),
            fd_grad(lambda w: np_loss(wg, wu, w, k, v, eta), wd.copy()),
        )

        tape = Tape()
        leaves = (tape.leaf(batched(wg)), tape.leaf(batched(wu)), tape.leaf(batched(wd)))
        loss = inner_loss(leaves, constant(batched(k)), constant(batched(v)), constant(eta4))
        tape.backward(loss)
        taped = tuple(tape.grad(leaf) for leaf in leaves)

        fd_err = max(
            np.max(np.abs(a.data[0, 0] - n)) / (np.max(np.abs(n)) + 1e-12)
            for a, n in zip(analytic, numeric)
        )
        tape_err = max(
            np.max(np.abs(a.data - t)) / (np.max(np.abs(t)) + 1e-12)
            for a, t in zip(analytic, taped)
        )
        worst_fd = max(worst_fd, fd_err)
        worst_tape = max(worst_tape, tape_err)
        print(f"{draw:>4} {fd_err:>12.3e} {tape_err:>14.3e}")

    print(f"\nworst finite-difference relative error: {worst_fd:.3e}")
    print(f"worst tape relative error:              {worst_tape:.3e}")
    assert worst_fd < 1e-5 and worst_tape < 1e-10
    print("gradient fidelity: OK")


if __name__ == "__main__":
    main()
