"""Scratch harness for tuning the end-to-end ordering benchmark."""
import sys
import time
from dataclasses import replace

import numpy as np

from neat import datagen, model
from neat.model import TrainConfig


def make_data(seed, gen_kw, ratio=0.4, test_ipc=20):
    spec = datagen.GenSpec(seed=seed, **gen_kw)
    train = datagen.generate(spec)
    train = datagen.inject_noise(train, datagen.NoiseSpec("symmetric", ratio, seed=seed + 1000), gen=spec)
    test = datagen.generate(replace(spec, instances_per_category=test_ipc, seed=seed + 2000))
    return train, test


def bench(gen_kw, base_cfg, seeds=(1, 2, 3), verbose=False):
    rows = {}
    t0 = time.time()
    for name, cfg_kw in [
        ("ce_all", dict(strategy="none", lambda_r=0.0, warmup_epochs=base_cfg.epochs)),
        ("ct_var", dict(strategy="none", lambda_r=0.0)),
        ("ct_ncl", dict(strategy="NCL")),
    ]:
        accs, f1s = [], []
        for seed in seeds:
            train, test = make_data(seed, gen_kw)
            cfg = replace(base_cfg, seed=seed, **cfg_kw)
            res = model.run(train, cfg, test_data=test)
            accs.append(max(m.test_accuracy for m in res.history))
            f1s.append(max(m.detection_f1 for m in res.history))
            if verbose:
                accp = [round(m.test_accuracy, 2) for m in res.history[::10]]
                print(f"  {name} seed={seed} best={accs[-1]:.3f} trace={accp} f1={f1s[-1]:.2f}")
        rows[name] = (np.mean(accs), np.std(accs), np.mean(f1s))
    dt = time.time() - t0
    print(f"gen={gen_kw}")
    for name, (m, s, f1) in rows.items():
        print(f"  {name}: acc {m:.3f} +- {s:.3f}   best-F1 {f1:.3f}")
    print(f"  ordering ok: {rows['ce_all'][0] < rows['ct_var'][0] < rows['ct_ncl'][0]}, "
          f"ncl-ce gap: {rows['ct_ncl'][0] - rows['ce_all'][0]:.3f}, elapsed {dt:.1f}s")
    return rows


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    base = TrainConfig(epochs=60, batch_size=32, learning_rate=0.1, weight_decay=1e-4,
                       warmup_epochs=10, b=8, encoder_hidden=64, encoder_dim=32,
                       proj_dim=32, tau=0.1, B=16, strategy="NCL", ct_mode="ct",
                       score_mode="var")
    if which == "a":
        bench(dict(num_categories=10, instances_per_category=40, frames=8, dim=32,
                   planted_channels_per_category=3, scene_strength=1.0, motion_strength=1.0,
                   distractor_strength=0.5, noise_sigma=0.3), base, verbose=True)
    elif which == "b":
        bench(dict(num_categories=10, instances_per_category=40, frames=8, dim=32,
                   planted_channels_per_category=3, scene_strength=0.6, motion_strength=0.6,
                   distractor_strength=0.8, noise_sigma=0.4), base, verbose=True)
