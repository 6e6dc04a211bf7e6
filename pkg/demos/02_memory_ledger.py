"""Why warping instead of cost volumes: the activation-memory ledger.

Compares the floats retained for backprop by three indexing strategies at a
64x64 feature map with 64 channels, and shows how each scales with
resolution. The full cost volume is quadratic in pixel count; the partial
(neighborhood) volume is linear but pays (2r+1)^2 * scales lookups per pixel
per step; warping retains exactly one feature map per step.

Run:  python3 demos/02_memory_ledger.py               (instant)
"""

from warpflow.profiler import bench_grid, profile_indexing, rows_to_markdown

print(rows_to_markdown(bench_grid()))

warp = profile_indexing("warp", 64, 64, 64, steps=5)
pcv = profile_indexing("partial_cv", 64, 64, 64, r=4, scales=4, steps=5)
full = profile_indexing("full_cv", 64, 64, 64, steps=5)

print("\nper-strategy totals at 64x64, d=64, 5 steps:")
for name, led in (("warp", warp), ("partial_cv", pcv), ("full_cv", full)):
    print(f"  {name:11s} {led.total_floats / 1e6:8.2f} Mfloats")

ratio = (pcv.by_op()["partial_cost_volume"] / 5) / (64 * 64 * 64)
print(f"\npartial/warp per-step ratio at r=4, 4 scales: {ratio}  "
      "((2*4+1)^2 * 4 / 64)")
