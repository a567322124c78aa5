"""Compare analytic compute/memory costs of the three mixer variants.

Prints prefill MACs, decode MACs/token, and cache bytes across sequence
lengths for full attention, windowed attention with sinks, and the hybrid
(windowed attention + fast-weight memory), at the study-scale geometry.
Ends with the two headline numbers: the long-context prefill ratio of full
attention over the hybrid, and the length where the hybrid becomes cheaper.

Run:  python3 demos/05_cost_curves.py
"""

from swamem.costs import (
    COMPONENTS,
    DEFAULT_LENGTHS,
    STUDY_GEOMETRY,
    band_check,
    component_cost,
    crossover_length,
)

WINDOW, SINKS = 4096, 128


def main():
    geo = STUDY_GEOMETRY
    print(f"geometry: d_model={geo.d_model}, layers={geo.n_layers}, heads={geo.n_heads}, "
          f"window={WINDOW}, sinks={SINKS}")
    print(f"\n{'component':>15} {'L':>8} {'prefill GMACs':>14} {'decode MMACs/tok':>17} {'cache MB':>10}")
    for comp in COMPONENTS:
        for length in DEFAULT_LENGTHS:
            rep = component_cost(geo, comp, length, window=WINDOW, sinks=SINKS)
            print(f"{comp:>15} {length:>8} {rep.prefill_macs / 1e9:>14.2f} "
                  f"{rep.decode_macs / 1e6:>17.2f} {rep.cache_bytes / 1e6:>10.2f}")
        print()

    result = band_check(geo, window=WINDOW, sinks=SINKS)
    lo, hi = result["band"]
    print(f"long-context prefill ratio, full attention / hybrid at L={DEFAULT_LENGTHS[-1]}:")
    print(f"  {result['ratio_ops2']:.4f} (2 ops/MAC) and {result['ratio_ops1']:.4f} (1 op/MAC), "
          f"expected band [{lo}, {hi}]: {'pass' if result['ok'] else 'FAIL'}")

    cross = crossover_length(geo, window=WINDOW, sinks=SINKS)
    print(f"prefill crossover: hybrid becomes cheaper than full attention at L = {cross}")
    assert result["ok"]


if __name__ == "__main__":
    main()
