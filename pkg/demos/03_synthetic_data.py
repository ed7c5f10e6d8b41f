"""
Synthetic sagittal slices
=========================

Vertebral bodies and discs are drawn along a curved spine. Each sample is a
pure function of (seed, index), so datasets never need to be stored, though
they can be written out as 16-bit PGM plus JSON for the command line tools.
"""

import tempfile
from pathlib import Path

import numpy as np

from ccfnet import OBJECT_IDS, AugmentPolicy, SynthConfig, augment, generate_dataset, read_dataset, write_sample

cfg = SynthConfig()
data = generate_dataset(cfg, 200)
labels = np.stack([s.annotation.labels for s in data])
print("diseased fraction per object", labels.mean(0).round(2))

# Crude ASCII view of one image (every 6th row, every 3rd column).
img = data[0].image[0]
chars = " .:-=+*#%@"
for row in img[::6, ::3]:
    print("".join(chars[min(int(v * 10), 9)] for v in row))
print("objects", " ".join(OBJECT_IDS))
print("diseased", data[0].annotation.labels.astype(int))

# Augmentation moves pixels and coordinates together.
rng = np.random.default_rng(0)
aug = augment(data[0], AugmentPolicy(), rng)
print("before", data[0].annotation.xy[:2].round(1).tolist())
print("after ", aug.annotation.xy[:2].round(1).tolist())

with tempfile.TemporaryDirectory() as d:
    for s in data[:5]:
        write_sample(d, s)
    back = read_dataset(d)
    print(sorted(p.name for p in Path(d).iterdir())[:4], "...")
    print("PGM quantization error", max(float(np.abs(a.image - b.image).max()) for a, b in zip(back, data)))
