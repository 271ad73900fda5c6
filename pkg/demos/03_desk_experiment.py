"""Full pipeline from a config file, then a look at the result tables.

Equivalent to ``dissectprune run --config configs/tiny.yaml --out runs/demo``.
Swap in configs/desk.yaml for the 12-round experiment (about 10 minutes).

Run:  python3 demos/03_desk_experiment.py [config]
"""

# %%
import sys
from pathlib import Path

from dissectprune.config import validate_config
from dissectprune.metrics_report import read_csv
from dissectprune.pipeline import run_experiment

config = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs" / "tiny.yaml")
cfg = validate_config(config)
exp = run_experiment(cfg, Path("runs") / f"demo_{config.stem}")

# %% Interpretability and consistency per round for the first trial.
summaries, consistency = read_csv(exp.trial_dir(cfg.seeds[0]))
print("round  remaining  accuracy  interpretable  concepts")
for s in summaries:
    print(f"{s.round:5d}  {100 * s.fraction_remaining:8.2f}%  {s.accuracy:8.3f}  {s.interpretable_units:13d}  {s.unique_concepts:8d}")
print("round  still-interpretable  same-concept")
for c in consistency:
    print(f"{c.round:5d}  {100 * c.retained_fraction:18.1f}%  {100 * c.same_concept_fraction:11.1f}%")
print("figures in", exp.out / "figures")
