"""Cost model: enumeration oracles, scaling laws, CSV, instrumentation audit."""

import io

import numpy as np
import pytest

from swamem import errors
from swamem.attention import swa_mask
from swamem.costs import (
    COMPONENTS,
    DESK_GEOMETRY,
    STUDY_GEOMETRY,
    Geometry,
    band_check,
    component_cost,
    crossover_length,
    emit_cost_csv,
    expected_forward_macs,
    flops,
    kv_cache_bytes,
    memory_macs_per_token,
    memory_state_bytes,
    visible_pairs,
)
from swamem.mixer import DESK_CONFIG, Model
from swamem.tensor import count_macs


def test_visible_pairs_matches_mask_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(25):
        length = int(rng.integers(1, 40))
        window = int(rng.integers(1, 12))
        sinks = int(rng.integers(0, 5))
        mask = swa_mask(length, window, sinks)
        assert visible_pairs(length, window, sinks) == int(mask.sum())
    # unwindowed == lower triangle
    assert visible_pairs(37) == 37 * 38 // 2


def test_visible_pairs_edges():
    assert visible_pairs(0) == 0
    assert visible_pairs(1, window=1, sinks=0) == 1
    # window+sinks >= L: identical to full causal
    assert visible_pairs(16, window=20, sinks=0) == visible_pairs(16)
    assert visible_pairs(16, window=8, sinks=8) == visible_pairs(16)
    with pytest.raises(errors.ConfigError):
        visible_pairs(4, window=0)


def test_full_prefill_scales_quadratically():
    a = component_cost(STUDY_GEOMETRY, "full_attention", 65536).prefill_macs
    b = component_cost(STUDY_GEOMETRY, "full_attention", 131072).prefill_macs
    assert 3.7 < b / a < 4.0  # core ~4x, projections ~2x


def test_hybrid_prefill_scales_linearly():
    g = STUDY_GEOMETRY
    a = component_cost(g, "allmem", 65536).prefill_macs
    b = component_cost(g, "allmem", 131072).prefill_macs
    # affine in L beyond the window: the increment is exactly L * steady rate
    steady = (
        g.d_model * (g.q_width + 2 * g.kv_width) + g.q_width * g.d_model
        + 2 * g.n_heads * g.head_dim * (4096 + 128)
        + memory_macs_per_token(g)
    )
    assert b - a == g.n_layers * 65536 * steady
    assert 1.99 < b / a < 2.03
    # and the ratio tends to 2 as the ramp-in discount washes out
    huge = component_cost(g, "allmem", 1 << 24).prefill_macs
    huger = component_cost(g, "allmem", 1 << 25).prefill_macs
    assert 1.999 < huger / huge < 2.001


def test_components_agree_at_short_context():
    # inside the window, swa_sinks degenerates to full attention
    for length in (1, 64, 4224):
        full = component_cost(STUDY_GEOMETRY, "full_attention", length)
        swa = component_cost(STUDY_GEOMETRY, "swa_sinks", length)
        assert full.prefill_macs == swa.prefill_macs
        assert full.decode_macs == swa.decode_macs
        assert full.cache_bytes == swa.cache_bytes


def test_hybrid_is_swa_plus_memory():
    for length in (128, 16384):
        swa = component_cost(STUDY_GEOMETRY, "swa_sinks", length)
        hyb = component_cost(STUDY_GEOMETRY, "allmem", length)
        per_tok = memory_macs_per_token(STUDY_GEOMETRY)
        assert hyb.prefill_macs - swa.prefill_macs == STUDY_GEOMETRY.n_layers * length * per_tok
        assert hyb.decode_macs - swa.decode_macs == STUDY_GEOMETRY.n_layers * per_tok
        assert hyb.cache_bytes - swa.cache_bytes == memory_state_bytes(STUDY_GEOMETRY)


def test_windowed_cache_is_bounded():
    small = kv_cache_bytes(STUDY_GEOMETRY, 16384, window=4096, sinks=128)
    large = kv_cache_bytes(STUDY_GEOMETRY, 131072, window=4096, sinks=128)
    assert small == large
    assert kv_cache_bytes(STUDY_GEOMETRY, 131072) == 8 * kv_cache_bytes(STUDY_GEOMETRY, 16384)
    # below capacity the cache holds exactly L entries
    assert kv_cache_bytes(STUDY_GEOMETRY, 10, window=4096, sinks=128) == kv_cache_bytes(
        STUDY_GEOMETRY, 10
    )


def test_memory_state_bytes_hand_value():
    g = DESK_GEOMETRY
    # per head: 3 weight matrices + momentum (32x16 each) + targets (32+32+16)
    per_head = (2 * 3 * 32 * 16 + 80) * 8
    assert memory_state_bytes(g) == g.n_layers * g.mem_heads * per_head


def test_band_check_anchor():
    bc = band_check()
    assert bc["ok"]
    assert 7.0 <= bc["ratio_ops2"] <= 12.0
    assert 7.0 <= bc["ratio_ops1"] <= 12.0


def test_crossover_below_16k():
    cross = crossover_length()
    assert STUDY_GEOMETRY.n_heads  # geometry sane
    assert 4224 < cross < 16384
    # verify the boundary is genuine
    before = component_cost(STUDY_GEOMETRY, "allmem", cross - 1)
    after = component_cost(STUDY_GEOMETRY, "allmem", cross)
    assert before.prefill_macs >= component_cost(STUDY_GEOMETRY, "full_attention", cross - 1).prefill_macs
    assert after.prefill_macs < component_cost(STUDY_GEOMETRY, "full_attention", cross).prefill_macs


def test_flops_conventions():
    assert flops(10) == 20
    assert flops(10, 1) == 10
    with pytest.raises(errors.ConfigError):
        flops(10, 3)
    r = component_cost(STUDY_GEOMETRY, "allmem", 1024)
    assert r.prefill_flops(2) == 2 * r.prefill_flops(1)


def test_cost_csv_schema_and_determinism():
    text = emit_cost_csv(None)
    again = io.StringIO()
    emit_cost_csv(again)
    assert text == again.getvalue()
    lines = text.strip().split("\n")
    assert lines[0] == "component,L,prefill_flops,decode_flops,cache_bytes"
    assert lines[-1].startswith("# band_check,")
    assert lines[-1].endswith(",pass")
    rows = [ln.split(",") for ln in lines[1:-1]]
    assert len(rows) == 3 * 5
    assert {r[0] for r in rows} == set(COMPONENTS)
    for r in rows:
        assert all(int(v) >= 0 for v in r[1:])
    # monotone prefill in L within each component
    for comp in COMPONENTS:
        vals = [int(r[2]) for r in rows if r[0] == comp]
        assert vals == sorted(vals) and len(set(vals)) == 5


@pytest.mark.parametrize("rule", ["ttt", "mamba2", "delta", "none"])
def test_instrumented_macs_match_audit(rule):
    model = Model.init(DESK_CONFIG, seed=1)
    ids = np.random.default_rng(2).integers(0, 64, size=(2, 19))
    rt = model.runtime(memory_rule=rule, chunk_size=5)
    with count_macs() as tally:
        model.logits(ids, rt=rt)
    want = expected_forward_macs(DESK_CONFIG, rt, 2, 19)
    assert abs(tally.macs - want) <= 0.02 * want
    assert tally.macs == want  # currently exact, not merely within 2%


def test_geometry_validation():
    with pytest.raises(errors.ConfigError):
        Geometry(
            d_model=0, n_layers=1, n_heads=1, n_kv_heads=1, head_dim=2,
            mem_heads=1, mem_head_dim=2, mem_hidden=2, conv_kernel=1, d_ff=2, vocab=2,
        )
    g = Geometry.from_model_config(DESK_CONFIG)
    assert g == DESK_GEOMETRY
    assert g.q_width == 64 and g.kv_width == 32 and g.mem_dim == 32
