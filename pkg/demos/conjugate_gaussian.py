"""Meta-train a small flow operator on 1-d Gaussian tasks and compare it
against the exact posterior and a bootstrap particle filter.

Run from the repository root::

    python3 demos/conjugate_gaussian.py [iterations]

With the default 100 iterations this takes under a minute on one core.
"""
import sys

import numpy as np

from pfbr import baselines as bl
from pfbr import metrics as mt
from pfbr import models as mdl
from pfbr import tasks as tk
from pfbr.flownet import FlowDims
from pfbr.particle_flow import initial_ensemble, sequential_inference
from pfbr.rng import Rng
from pfbr.train import TrainConfig, meta_train


def main(iterations=100):
    family = tk.FamilyConfig(family="gaussian", d=1, n_tasks=40, M=5)
    train = tk.generate_training_set(family, Rng(1))
    vali = tk.generate_training_set(tk.FamilyConfig(family="gaussian", d=1, n_tasks=5, M=5),
                                    Rng(2))
    cfg = TrainConfig(iterations=iterations, lr=5e-3, vali_every=10, n_particles=64)
    best, history = meta_train(train, vali, cfg, dims=FlowDims(d=1, obs_dim=1),
                               log=lambda r: r["vali_loss"] is not None and print(
                                   f"iter {r['iteration']:4d}  vali loss {r['vali_loss']:.4f}"))

    model = mdl.mvn_model(1, 3.0)
    task = tk.held_out_task(model, Rng(7), 10)
    flow = sequential_inference(initial_ensemble(task.prior, Rng(8), 256), model,
                                task.observations, best, cfg.integrator)
    smc = bl.smc_filter(model, task.observations, Rng(9), 256)
    print(f"\ntruth {task.truth[0]:+.3f}")
    print(" m  exact mean  flow mean  smc mean   flow CE   smc CE")
    for m, (e, w, p) in enumerate(zip(flow, smc, task.oracle()), start=1):
        ref = p.sample(Rng(100 + m), 2000)
        resampled = w.resample(Rng(200 + m)).positions
        print(f"{m:2d}  {p.mean[0]:+10.4f} {e.positions.mean():+10.4f} {w.mean()[0]:+9.4f}"
              f"  {mt.cross_entropy(ref, e.positions):8.4f} {mt.cross_entropy(ref, resampled):8.4f}")
    print(f"\nbest validation loss {history.best_vali:.4f} at iteration {history.best_iteration}")
    return np.array([e.positions.mean() for e in flow])


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
