"""Iterative magnitude pruning with rewinding on the shape task.

Trains a small residual net, prunes 20% of the remaining weights per
round, rewinds survivors to epoch 1 and replays the schedule.
Takes a few minutes on one core.

Run:  python3 demos/02_prune_and_rewind.py
"""

# %%
import logging

from dissectprune import ModelSpec, PruneConfig, TrainingSchedule, build_model, iterate_prune, train
from dissectprune.concept_data import MicroBrodenSpec, make_shape_task
from dissectprune.model import evaluate_accuracy
from dissectprune.pruner import sparsity_after_rounds

logging.basicConfig(level=logging.INFO, format="%(message)s")

scenes = MicroBrodenSpec(image_size=(24, 24))
train_set = make_shape_task(1600, scenes, seed=1, noise=0.1)
test_set = make_shape_task(400, scenes, seed=2, noise=0.1)

# %% Baseline; a snapshot (weights + momentum) is kept for every epoch.
spec = ModelSpec(input_size=(24, 24), widths=(8, 16, 32), blocks=(1, 1, 1), num_classes=len(scenes.shapes))
schedule = TrainingSchedule(epochs=10, lr=0.05, decay_epochs=(7,), batch_size=64)
series, model = train(build_model(spec, 0), train_set, schedule)
print("baseline accuracy", evaluate_accuracy(model, test_set))

# %% Five pruning rounds.  Kept weights track 0.8^r of the prunable total.
rounds = iterate_prune(series, PruneConfig(), 5, train_set, mode="rewind", rewind_epoch=1)
for res in rounds:
    print(f"round {res.round}: {100 * res.mask.fraction_remaining:6.2f}% remaining "
          f"(target {100 * sparsity_after_rounds(res.round):6.2f}%)  accuracy {evaluate_accuracy(res.model, test_set):.3f}")
