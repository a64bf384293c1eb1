"""Command-line entry point: gen / train / detect / eval.

Configs are flat JSON documents whose keys are exactly the field names of the
generator, noise, and training configs plus `out_dir` and `run_name`; unknown
keys are rejected, missing keys take documented defaults, and every command
echoes the fully resolved config next to its outputs. Exit codes: 0 success,
2 configuration error, 3 I/O or format error, 4 numeric failure.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import datagen, metrics, model, truncation as trunc
from .errors import ConfigurationError, DataFormatError, TrainingAborted

_GEN_KEYS = ("num_categories", "instances_per_category", "frames", "dim",
             "planted_channels_per_category", "scene_strength", "motion_strength",
             "distractor_strength", "noise_sigma")
_NOISE_KEYS = ("kind", "ratio", "pair_map")
_TRAIN_KEYS = tuple(f.name for f in fields(model.TrainConfig) if f.name != "seed")
_CLI_KEYS = ("out_dir", "run_name", "seed")

max_threads = 0  # NEAT_THREADS cap; 0 = auto. Execution is single-process.


@dataclass(frozen=True)
class RunConfig:
    """Union of generator, noise, and training settings in one flat document."""

    num_categories: int = 10
    instances_per_category: int = 50
    frames: int = 8
    dim: int = 64
    planted_channels_per_category: int = 4
    scene_strength: float = 1.0
    motion_strength: float = 1.0
    distractor_strength: float = 0.5
    noise_sigma: float = 0.1
    kind: str = "symmetric"
    ratio: float = 0.4
    pair_map: tuple | None = None
    epochs: int = model.TrainConfig.epochs
    batch_size: int = model.TrainConfig.batch_size
    learning_rate: float = model.TrainConfig.learning_rate
    momentum: float = model.TrainConfig.momentum
    weight_decay: float = model.TrainConfig.weight_decay
    warmup_epochs: int = model.TrainConfig.warmup_epochs
    b: int = model.TrainConfig.b
    xi: float = model.TrainConfig.xi
    tau: float = model.TrainConfig.tau
    B: int = model.TrainConfig.B
    lambda_r: float = model.TrainConfig.lambda_r
    score_mode: str = model.TrainConfig.score_mode
    strategy: str = model.TrainConfig.strategy
    ct_mode: str = model.TrainConfig.ct_mode
    encoder: str = model.TrainConfig.encoder
    encoder_hidden: int = model.TrainConfig.encoder_hidden
    encoder_dim: int = model.TrainConfig.encoder_dim
    proj_dim: int = model.TrainConfig.proj_dim
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = model.TrainConfig.lr_decay_factor
    kmeans_init: bool = model.TrainConfig.kmeans_init
    anchors_per_category: int = model.TrainConfig.anchors_per_category
    slice_mode: str = model.TrainConfig.slice_mode
    open_set_mode: bool = model.TrainConfig.open_set_mode
    seed: int = 1
    out_dir: str = "runs"
    run_name: str = "run"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(raw)
        for key in ("pair_map", "lr_decay_epochs"):
            if values.get(key) is not None:
                values[key] = tuple(values[key])
        cfg = cls(**values)
        if cfg.kind.endswith("asymmetric") and cfg.pair_map is None:
            cfg = replace(cfg, pair_map=datagen.default_pair_map(cfg.num_categories))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def resolved(self) -> dict:
        out = asdict(self)
        if out["pair_map"] is not None:
            out["pair_map"] = list(out["pair_map"])
        out["lr_decay_epochs"] = list(out["lr_decay_epochs"])
        return out

    def gen_spec(self) -> datagen.GenSpec:
        kwargs = {key: getattr(self, key) for key in _GEN_KEYS}
        return datagen.GenSpec(seed=self.seed, **kwargs)

    def noise_spec(self) -> datagen.NoiseSpec:
        return datagen.NoiseSpec(kind=self.kind, ratio=self.ratio,
                                 pair_map=self.pair_map, seed=self.seed)

    def train_config(self) -> model.TrainConfig:
        kwargs = {key: getattr(self, key) for key in _TRAIN_KEYS}
        return model.TrainConfig(seed=self.seed, **kwargs)


def _write_json(payload: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen(config_path, out_path, seed: int | None = None) -> int:
    cfg = RunConfig.load(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    spec = cfg.gen_spec()
    spec.validate()
    noise = cfg.noise_spec()
    noise.validate(spec.num_categories)

    data = datagen.generate(spec)
    data = datagen.inject_noise(data, noise, gen=spec)
    datagen.save_dataset(data, out_path)

    flipped = np.flatnonzero((data.noisy_label != data.true_label) | data.open_set_flag)
    per_cat = {}
    for a in range(data.K):
        if noise.kind.startswith("open_set"):
            cat_ids = (data.noisy_label == a) & data.open_set_flag
        else:
            cat_ids = (data.true_label == a) & (data.noisy_label != data.true_label)
        per_cat[str(a)] = int(cat_ids.sum())
    sidecar = {
        "config": cfg.resolved(),
        "noise": {
            "flipped_total": int(flipped.size),
            "flipped_per_category": per_cat,
            "flipped_ids": [int(i) for i in flipped],
            "open_set": bool(noise.kind.startswith("open_set")),
        },
        "planted_channels": {
            str(a): [int(c) for c in datagen.planted_channels(
                spec.num_categories, spec.dim, spec.planted_channels_per_category, a)]
            for a in range(spec.num_categories)
        },
    }
    _write_json(sidecar, str(out_path) + ".json")
    print(f"wrote {out_path} ({data.M} instances, {flipped.size} noisy)")
    return 0


def cmd_train(config_path, data_path, out_dir, test_path=None,
              seed: int | None = None) -> int:
    cfg = RunConfig.load(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    data = datagen.load_dataset(data_path)
    test_data = datagen.load_dataset(test_path) if test_path else None
    tc = cfg.train_config()
    tc.validate()
    d_enc = data.d if tc.encoder == "identity" else (tc.encoder_dim or data.d)
    if tc.ct_mode != "ct_all" and tc.b > d_enc:
        raise ConfigurationError(f"b={tc.b} exceeds the encoder dimension {d_enc}")

    os.makedirs(out_dir, exist_ok=True)
    _write_json(cfg.resolved(), os.path.join(out_dir, "config.json"))
    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="\n") as fh:
        metrics.write_metrics_header(fh)
        fh.flush()

        def on_epoch(m):
            # wall time is zeroed in the file so reruns are byte-identical
            fh.write(metrics.format_metrics_row(m, deterministic_wall=True))
            fh.flush()

        result = model.run(data, tc, test_data=test_data, on_epoch=on_epoch)

    model.save_checkpoint(result.state, tc, os.path.join(out_dir, "checkpoint.neam"))
    trunc.export_split_csv(result.split, data, os.path.join(out_dir, "split.csv"))
    best = max(m.test_accuracy for m in result.history)
    print(f"trained {tc.epochs} epochs; best test accuracy {best:.4f}")
    return 0


def cmd_detect(checkpoint_path, data_path, out_csv, config_path=None,
               seed: int | None = None) -> int:
    state, tc = model.load_checkpoint(checkpoint_path)
    if config_path is not None:
        cfg = RunConfig.load(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        tc = cfg.train_config()
        tc.validate()
    data = datagen.load_dataset(data_path)
    if data.d != state.d_in:
        raise ConfigurationError(
            f"dataset dimension {data.d} does not match checkpoint input {state.d_in}")
    split = model.detect(data, state, tc)
    for note in split.warnings:
        print(f"warning: {note}", file=sys.stderr)
    trunc.export_split_csv(split, data, out_csv)
    print(f"wrote {out_csv} ({split.clean_count}/{data.M} estimated clean)")
    return 0


def cmd_eval(run_dir) -> int:
    rows = metrics.read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    summary = metrics.summarize(rows)
    _write_json(summary, os.path.join(run_dir, "summary.json"))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _read_thread_cap() -> int:
    raw = os.environ.get("NEAT_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"NEAT_THREADS must be an integer, got {raw!r}") from exc
    if cap < 0:
        raise ConfigurationError("NEAT_THREADS must be >= 0")
    return cap


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neat",
                                     description="generate, train, detect, evaluate")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a dataset with injected label noise")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--out", required=True, help="output .neatds path")
    p_gen.add_argument("--seed", type=int, default=None)

    p_train = sub.add_parser("train", help="run the full detect/update training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--test", default=None, help="optional held-out test .neatds")
    p_train.add_argument("--seed", type=int, default=None)

    p_detect = sub.add_parser("detect", help="one detection round on a checkpoint")
    p_detect.add_argument("--checkpoint", required=True)
    p_detect.add_argument("--data", required=True)
    p_detect.add_argument("--out", required=True, help="output split CSV path")
    p_detect.add_argument("--config", default=None)
    p_detect.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("eval", help="summarize a run directory's metrics.csv")
    p_eval.add_argument("--out", required=True, help="run directory")
    return parser


def main(argv=None) -> int:
    global max_threads
    try:
        max_threads = _read_thread_cap()
        args = _build_parser().parse_args(argv)
        if args.command == "gen":
            return cmd_gen(args.config, args.out, seed=args.seed)
        if args.command == "train":
            return cmd_train(args.config, args.data, args.out,
                             test_path=args.test, seed=args.seed)
        if args.command == "detect":
            return cmd_detect(args.checkpoint, args.data, args.out,
                              config_path=args.config, seed=args.seed)
        return cmd_eval(args.out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
