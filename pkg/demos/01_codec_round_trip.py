"""
Coarse and fine maps for one spine
==================================

Each of the 11 objects becomes a Gaussian on an 8×8 grid plus two offset
maps that say how far the true point sits from each grid anchor. Decoding
takes the argmax cell and subtracts its offset.
"""

import numpy as np

from ccfnet import OBJECT_IDS, GridSpec, SynthConfig, decode_arrays, encode_targets, generate_sample

grid = GridSpec()
sample = generate_sample(SynthConfig(), index=0)
ann = sample.annotation
maps = encode_targets(ann, grid)
print("heatmap", maps.heatmap.shape, "omega cells per object", maps.omega.reshape(11, -1).sum(1))

# The L1 vertebra (object 1) as a coarse map. Rows are y, columns are x.
np.set_printoptions(precision=2, suppress=True, linewidth=120)
print(maps.heatmap[1])

# Anchor t(i) = (i - 0.5) * 16, so the first column sits at x = -8.
anchors = (np.arange(grid.map_w) - grid.align) * grid.stride
print("anchors", anchors)

# Decoding the targets gives back the annotation.
xy, prob = decode_arrays(maps.heatmap, maps.fine_x, maps.fine_y, maps.category, grid)
for oid, (x, y), (gx, gy), p in zip(OBJECT_IDS, xy, ann.xy, prob):
    print(f"{oid:>6}  decoded ({x:7.3f}, {y:7.3f})  truth ({gx:7.3f}, {gy:7.3f})  diseased {p:.0f}")
print("max error px", np.abs(xy - ann.xy).max())
