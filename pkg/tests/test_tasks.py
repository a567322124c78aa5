"""Task generators: structure, placement guarantees, determinism."""

import numpy as np
import numpy.testing as npt
import pytest

from swamem import errors
from swamem.tasks import (
    BOS,
    FILLER,
    KEYS,
    NEEDLE,
    QUERY,
    VALUES,
    Batch,
    gen_task,
    recall,
)


def test_vocab_ranges_partition():
    ranges = [range(0, 4), KEYS, VALUES, FILLER]
    seen = sorted(t for r in ranges for t in r)
    assert seen == list(range(64))


def test_recall_batch_structure():
    rng = np.random.default_rng(0)
    b = gen_task("associative_recall", 8, 96, rng, placement="anywhere")
    assert b.ids.shape == (8, 96) and b.mask.shape == (8, 96)
    npt.assert_array_equal(b.answer_pos, 94)
    # exactly one scored position, predicting the final token
    npt.assert_array_equal(b.mask.sum(axis=1), 1.0)
    npt.assert_array_equal(b.mask[:, 94], 1.0)
    npt.assert_array_equal(b.ids[:, 95], b.answer)
    assert np.all((b.answer >= VALUES.start) & (b.answer < VALUES.stop))
    npt.assert_array_equal(b.ids[:, 0], BOS)
    npt.assert_array_equal(b.ids[:, 93], QUERY)
    # queried key occurs exactly once in the body (keys are distinct)
    for row, key in zip(b.ids, b.ids[:, 94]):
        assert KEYS.start <= key < KEYS.stop
        assert np.sum(row[:93] == key) == 1


def test_far_placement_is_structurally_far():
    rng = np.random.default_rng(1)
    margin, start_guard = 36, 5
    b = gen_task("associative_recall", 16, 96, rng, placement="far", far_margin=margin)
    body_tail = b.ids[:, 96 - margin : 93]
    # no key or value tokens anywhere near the query...
    assert not np.any((body_tail >= KEYS.start) & (body_tail < VALUES.stop))
    # ...nor inside the sink-visible prefix
    head = b.ids[:, 1:start_guard]
    assert not np.any((head >= KEYS.start) & (head < VALUES.stop))
    # the answer token itself is absent outside pair slots
    for row, ans in zip(b.ids, b.answer):
        assert np.sum(row[96 - margin : 95] == ans) == 0


def test_near_placement_is_inside_window():
    rng = np.random.default_rng(2)
    b = gen_task("associative_recall", 16, 96, rng, placement="near", near_span=16, n_pairs=4)
    # all pair tokens live in the last near_span body positions
    body = b.ids[:, 1:93]
    paired = (body >= KEYS.start) & (body < VALUES.stop)
    cols = np.where(paired.any(axis=0))[0] + 1
    assert cols.min() >= 96 - 3 - 16


def test_needle_copy_structure():
    rng = np.random.default_rng(3)
    b = gen_task("needle_copy", 8, 64, rng, placement="far", far_margin=20)
    npt.assert_array_equal(b.ids[:, 62], QUERY)
    npt.assert_array_equal(b.ids[:, 63], b.answer)
    for row, ans in zip(b.ids, b.answer):
        (pos,) = np.where(row == NEEDLE)
        assert len(pos) == 1
        assert row[pos[0] + 1] == ans
        assert pos[0] + 1 < 64 - 20


def test_determinism_by_seed():
    a = gen_task("associative_recall", 4, 80, np.random.default_rng(42))
    b = gen_task("associative_recall", 4, 80, np.random.default_rng(42))
    npt.assert_array_equal(a.ids, b.ids)
    npt.assert_array_equal(a.mask, b.mask)
    npt.assert_array_equal(a.answer, b.answer)
    c = gen_task("associative_recall", 4, 80, np.random.default_rng(43))
    assert np.any(c.ids != a.ids)


def test_infeasible_placement_raises():
    rng = np.random.default_rng(4)
    with pytest.raises(errors.GenerationError):
        gen_task("associative_recall", 2, 48, rng, placement="far", far_margin=44)
    with pytest.raises(errors.GenerationError):
        gen_task("associative_recall", 2, 24, rng, placement="near", near_span=4, n_pairs=4)
    with pytest.raises(errors.ConfigError):
        gen_task("associative_recall", 2, 96, rng, n_pairs=99)
    with pytest.raises(errors.ConfigError):
        gen_task("other_task", 2, 96, rng)
    with pytest.raises(errors.ConfigError):
        gen_task("associative_recall", 2, 96, rng, placement="sideways")


class _RiggedModel:
    def __init__(self, vocab, hit):
        self.vocab, self.hit = vocab, hit

    def logits(self, ids, rt=None):
        b, length = ids.shape
        out = np.zeros((b, length, self.vocab))
        if self.hit:
            out[np.arange(b), length - 2, ids[:, length - 1]] = 10.0
        else:
            out[:, :, 0] = 10.0
        return out


def test_recall_metric():
    rng = np.random.default_rng(5)
    b = gen_task("associative_recall", 6, 64, rng, placement="anywhere")
    assert recall(_RiggedModel(64, hit=True), b) == 1.0
    assert recall(_RiggedModel(64, hit=False), b) == 0.0
