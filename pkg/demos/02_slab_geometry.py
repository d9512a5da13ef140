"""Depth-window geometry: synchronized selectors and the depth partition.

One uniform draw picks the slab for a training step; the low-resolution
feature window and the high-resolution image window cover the same
percentile of slices. Encoding uses a disjoint partition instead.
"""

import numpy as np

from slabgan.geometry import (concat_subvolumes, partition_volume, sample_r,
                              select_high, select_low, split_volume)
from slabgan.tensor import Tensor

rng = np.random.default_rng(1)

depth_low, scale = 16, 4
w = sample_r(depth_low, 2, rng, resolution_scale=scale)
print(f"drawn window: low [{w.start}, {w.start + w.length}) "
      f"-> high [{w.high_start}, {w.high_start + w.high_length})")

a = Tensor(np.arange(16, dtype=np.float32)[None, :, None, None]
           * np.ones((1, 16, 2, 2), np.float32))
x = Tensor(np.arange(64, dtype=np.float32)[None, :, None, None]
           * np.ones((1, 64, 2, 2), np.float32))
low = select_low(a, w)
high = select_high(x, w)
print(f"low slab depth indices:  {low.data[0, :, 0, 0].astype(int)}")
print(f"high slab depth range:   {int(high.data[0, 0, 0, 0])}..{int(high.data[0, -1, 0, 0])}")
assert high.data[0, 0, 0, 0] == scale * low.data[0, 0, 0, 0]

# empirical uniformity of the window start
starts = [sample_r(64, 8, rng).start for _ in range(10000)]
counts = np.bincount(starts, minlength=57)
print(f"start uniformity over 10k draws: min {counts.min()}, max {counts.max()} "
      f"(ideal {10000 // 57})")

# non-overlapping partition covers the depth exactly and concat inverts it
p = partition_volume(64, 8)
print(f"partition of depth 64 into 8: starts {p.starts}, length {p.length}")
parts = split_volume(x, 8)
rebuilt = concat_subvolumes(parts)
assert np.array_equal(rebuilt.data, x.data)
print("split -> concat round trip: exact")
