"""Sweep training hyperparameters for the ordering benchmark."""
import time
from dataclasses import replace

import numpy as np

from neat import datagen, model
from neat.model import TrainConfig
import scratch_c6 as sc

GEN = dict(num_categories=10, instances_per_category=40, frames=8, dim=32,
           planted_channels_per_category=3, scene_strength=0.0, motion_strength=2.0,
           distractor_strength=0.5, noise_sigma=0.2)


def ceiling(gen_kw, base, seeds=(1, 2, 3)):
    accs = []
    for seed in seeds:
        spec = datagen.GenSpec(seed=seed, **gen_kw)
        train = datagen.generate(spec)
        test = datagen.generate(replace(spec, instances_per_category=20, seed=seed + 2000))
        cfg = replace(base, seed=seed, strategy="none", lambda_r=0.0,
                      warmup_epochs=base.epochs)
        res = model.run(train, cfg, test_data=test)
        accs.append(max(m.test_accuracy for m in res.history))
    return np.mean(accs)


def trio(gen_kw, base, seeds=(1, 2, 3)):
    out = {}
    for name, kw in [("ce_all", dict(strategy="none", lambda_r=0.0, warmup_epochs=base.epochs)),
                     ("ct_var", dict(strategy="none", lambda_r=0.0)),
                     ("ct_ncl", dict(strategy="NCL"))]:
        accs = []
        for seed in seeds:
            train, test = sc.make_data(seed, gen_kw)
            res = model.run(train, replace(base, seed=seed, **kw), test_data=test)
            accs.append(max(m.test_accuracy for m in res.history))
        out[name] = np.mean(accs)
    ok = out["ce_all"] < out["ct_var"] < out["ct_ncl"]
    gap = out["ct_ncl"] - out["ce_all"]
    return out, ok, gap


if __name__ == "__main__":
    base = TrainConfig(epochs=60, batch_size=32, learning_rate=0.1, weight_decay=1e-4,
                       warmup_epochs=10, b=6, encoder_hidden=64, encoder_dim=32,
                       proj_dim=32, tau=0.1, B=16, score_mode="var")
    print("clean ceiling:", round(ceiling(GEN, base), 3))
    t0 = time.time()
    for lam, wu, wd in [(0.5, 10, 1e-3), (0.2, 10, 1e-4), (0.5, 5, 1e-4),
                        (0.2, 5, 1e-3), (1.0, 10, 1e-3)]:
        cfg = replace(base, lambda_r=lam, warmup_epochs=wu, weight_decay=wd)
        out, ok, gap = trio(GEN, cfg)
        print(f"lam={lam} wu={wu} wd={wd}: " +
              " ".join(f"{k}={v:.3f}" for k, v in out.items()) +
              f" ok={ok} gap={gap:+.3f}  [{time.time()-t0:.0f}s]")
