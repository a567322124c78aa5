"""Synthetic recall tasks for training and probing long-range memory.

Both tasks share one 64-token vocabulary carved into disjoint ranges:

* specials [0, 4): BOS, SEP (reserved), QUERY, NEEDLE
* keys     [4, 20)
* values   [20, 36)
* filler   [36, 64)

Because filler never overlaps the value range, a sequence's answer token
appears nowhere except immediately after its key (or needle marker).  When
pairs are placed in the "far" zone, the answer is therefore *structurally
absent* from the trailing region a windowed-attention model can see -- any
correct prediction must come from state carried forward, not from copying
within the window.

Sequence layout (associative_recall, L tokens):

    BOS  filler...  [k1 v1] ... [kn vn]  filler...  QUERY  kq  vq
    0                                                L-3   L-2  L-1

The loss/metric mask marks position L-2 only: the logits emitted there
predict the answer token at L-1.  needle_copy replaces keyed pairs with a
single [NEEDLE v] pair and drops the trailing key:

    BOS  filler...  NEEDLE v  filler...  QUERY  vq
    0                                    L-2    L-1
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError

__all__ = [
    "BOS",
    "SEP",
    "QUERY",
    "NEEDLE",
    "KEYS",
    "VALUES",
    "FILLER",
    "Batch",
    "gen_task",
    "recall",
]

BOS, SEP, QUERY, NEEDLE = 0, 1, 2, 3
KEYS = range(4, 20)
VALUES = range(20, 36)
FILLER = range(36, 64)

KINDS = ("associative_recall", "needle_copy")
PLACEMENTS = ("far", "near", "anywhere")


@dataclass(frozen=True)
class Batch:
    """One generated batch: token ids, response mask, and answer bookkeeping.

    `mask[b, t] == 1.0` means the logits at position t are scored; the
    target is `ids[b, t + 1]`.  `answer_pos` is that t (one per row here)
    and `answer` the target token.
    """

    ids: np.ndarray
    mask: np.ndarray
    answer_pos: np.ndarray
    answer: np.ndarray


def _pair_zone(kind, length, placement, far_margin, near_span, min_start, n_queries):
    tail = 3 * n_queries if kind == "associative_recall" else 2
    if placement == "far":
        lo, hi = min_start, length - far_margin - 1  # pair occupies [p, p+1]
    elif placement == "near":
        lo, hi = max(1, length - tail - near_span), length - tail - 1
    elif placement == "anywhere":
        lo, hi = 1, length - tail - 1
    else:
        raise ConfigError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    return lo, hi, tail


def gen_task(
    kind: str,
    batch: int,
    length: int,
    rng: np.random.Generator,
    *,
    n_pairs: int = 4,
    placement: str = "far",
    far_margin: int = 36,
    near_span: int = 16,
    min_start: int = 5,
    n_queries: int = 1,
) -> Batch:
    """Generate a batch of recall problems.

    `placement` controls where key/value pairs land relative to the query
    at the end of the sequence: "far" keeps every pair at least
    `far_margin` tokens from the end AND at least `min_start` tokens from
    the start (outside any sink block that windowed attention always sees;
    `far_margin` should cover n_layers * window + sinks so information
    cannot relay forward through stacked window hops), "near" packs pairs
    into the last `near_span` body positions, "anywhere" uses the whole
    body.  Raises GenerationError when the zone cannot hold `n_pairs`
    non-overlapping pairs.

    `n_queries > 1` (associative_recall only) appends that many
    QUERY-key-value triples instead of one, masking each predicting
    position -- denser supervision for training; `answer`/`answer_pos`
    still describe the final triple.
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "needle_copy":
        n_pairs = 1
    if n_pairs < 1 or n_pairs > len(KEYS):
        raise ConfigError(f"n_pairs must be in [1, {len(KEYS)}]")
    if n_queries < 1 or (n_queries > 1 and kind != "associative_recall"):
        raise ConfigError("n_queries > 1 is only supported for associative_recall")
    lo, hi, tail = _pair_zone(kind, length, placement, far_margin, near_span, min_start, n_queries)
    starts_grid = np.arange(lo, hi, 2)
    if lo >= hi or len(starts_grid) < n_pairs:
        raise GenerationError(
            f"cannot place {n_pairs} pairs in zone [{lo}, {hi}) of a length-{length} "
            f"{placement!r} sequence"
        )

    ids = rng.integers(FILLER.start, FILLER.stop, size=(batch, length))
    ids[:, 0] = BOS
    mask = np.zeros((batch, length))
    answer = np.empty(batch, dtype=np.int64)
    for b in range(batch):
        starts = rng.choice(starts_grid, size=n_pairs, replace=False)
        keys = rng.choice(np.arange(KEYS.start, KEYS.stop), size=n_pairs, replace=False)
        values = rng.integers(VALUES.start, VALUES.stop, size=n_pairs)
        pick = int(rng.integers(n_pairs))
        for i, p in enumerate(starts):
            ids[b, p] = keys[i] if kind == "associative_recall" else NEEDLE
            ids[b, p + 1] = values[i]
        if kind == "associative_recall":
            queried = np.concatenate(
                [rng.integers(n_pairs, size=n_queries - 1), [pick]]
            )
            for j, qi in enumerate(queried):
                base = length - 3 * (n_queries - j)
                ids[b, base] = QUERY
                ids[b, base + 1] = keys[qi]
                ids[b, base + 2] = values[qi]
                mask[b, base + 1] = 1.0
        else:
            ids[b, length - 2] = QUERY
            ids[b, length - 1] = values[pick]
            mask[b, length - 2] = 1.0
        answer[b] = values[pick]
    return Batch(
        ids=ids,
        mask=mask,
        answer_pos=np.full(batch, length - 2, dtype=np.int64),
        answer=answer,
    )


def recall(model, batch: Batch, rt=None) -> float:
    """Fraction of rows whose argmax at the scored position hits the answer."""
    logits = model.logits(batch.ids, rt=rt) if rt is not None else model.logits(batch.ids)
    rows = np.arange(batch.ids.shape[0])
    pred = np.argmax(logits[rows, batch.answer_pos], axis=-1)
    return float(np.mean(pred == batch.answer))
