"""Dissecting a hand-built network on a generated micro-Broden set.

Run:  python3 demos/01_dissect_a_planted_unit.py
"""

# %% Generate a small concept dataset: colored shapes with texture and color labels.
import tempfile

import numpy as np
import torch

from dissectprune import MicroBrodenSpec, ModelSpec, build_model, dissect_network, generate_micro_broden, load_concept_dataset

root = tempfile.mkdtemp(prefix="micro_broden_")
generate_micro_broden(MicroBrodenSpec(), root)
ds = load_concept_dataset(root)
print(len(ds.image_ids()), "images,", len(ds.index), "concepts:", [c.name for c in ds.index.concepts])

# %% How much of the image does each concept cover?  IoU against a 0.5% segmentation
# can only be large for concepts that are rare at the pixel level.
for concept in ds.index.concepts:
    cov = np.mean([(ds.label_map(i, concept.category) == concept.concept_id).mean() for i in ds.image_ids()])
    print(f"  {concept.category:8s} {concept.name:9s} {100 * cov:5.1f}% of pixels")

# %% A network whose first final-stage unit is a red detector and whose other units are silent.
spec = ModelSpec(input_size=(32, 32), widths=(4, 4, 8), blocks=(1, 1, 1), num_classes=2)
model = build_model(spec, 0)
with torch.no_grad():
    for p in model.parameters():
        p.zero_()
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.eps = 0.0
            m.weight.fill_(1.0)
            m.running_mean.zero_()
            m.running_var.fill_(1.0)
    model.stem[0].weight[0, :, 1, 1] = torch.tensor([1.0, -1.0, -1.0])  # R - G - B
    model.stem[1].bias[0] = -1.0
    for stage in model.stages():
        if len(stage[0].shortcut):
            stage[0].shortcut[0].weight[0, 0, 0, 0] = 1.0  # pass channel 0 through

# %% Dissect: per-unit 0.995 activation quantile, upsample, threshold, IoU per concept.
report = dissect_network(model, None, ds, keep_ious=True)
for u in report.units[:3]:
    name = report.concept_names.get(u.best_concept, ("-", "-"))[0]
    print(f"unit {u.unit}: T={u.threshold:.3f} best={name} IoU={u.best_iou:.3f} interpretable={u.interpretable}")
print("interpretable units:", sorted(report.interpretable_units()))
