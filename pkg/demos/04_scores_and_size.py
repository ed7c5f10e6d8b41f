"""
Score formula and model size
============================

The overall score multiplies mean localization recall by mean
classification AUC. The multi-scale context stage is also meant to be
lighter than the plain residual stage it replaces.
"""

from ccfnet import EncoderConfig, auc, count_params_flops, overall_score

# Recall 0.95 and AUCs of 0.91 / 0.79 give a score near 80.
print(overall_score(0.9475, 0.9471, 0.9088, 0.7916))

# AUC is the fraction of correctly ordered positive/negative pairs.
print(auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]))

for use_msc in (True, False):
    c = count_params_flops(EncoderConfig(use_msc=use_msc), (128, 128))
    print(f"use_msc={use_msc!s:<5}  params {c['params']:>7}  MFLOPs {c['flops'] / 1e6:6.1f}")

# FLOPs grow with image area, parameters do not.
for size in (64, 128, 256):
    c = count_params_flops(EncoderConfig(), (size, size))
    print(size, c["params"], c["flops"])
