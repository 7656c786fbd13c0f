"""
Synthetic tasks and a short toy run
===================================

Generates a few samples of each task, checks them against the brute-force
simulators and trains a small KLA model on MQAR for a few hundred steps.
Set ``STEPS=1200`` to watch it cross 95% (about 4 minutes on one core).
"""

# %%
import os

import numpy as np

from kla.autodiff.model import ModelConfig
from kla.autodiff.train import OptimConfig, train
from kla.tasks import TaskConfig, generate, oracle_mismatches

for task in ("mqar", "sniah", "palindrome", "stack"):
    ds = generate(TaskConfig(task, length=24, vocab=32, num_pairs=4), 200)
    s = ds[0]
    print(f"{task:10s} mismatches={oracle_mismatches(ds)}  input={s.input_ids.tolist()}")
    print(f"{'':10s} scored at {np.flatnonzero(s.loss_mask).tolist()} -> {s.target_ids[s.loss_mask].tolist()}")

# %%
steps = int(os.environ.get("STEPS", "400"))
tc = TaskConfig("mqar", length=64, vocab=64, num_pairs=8)
train_ds, valid_ds = generate(tc, 20000, "train"), generate(tc, 2000, "valid")
cfg = ModelConfig(vocab=64, d_model=64, d_k=32, n_layers=2, rule="kla")
res = train(cfg, train_ds, valid_ds, OptimConfig(steps=steps, eval_every=200, target_acc=0.95), seed=42, log=print)
print(res.stop_reason, res.best_acc, res.best_step)
