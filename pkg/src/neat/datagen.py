"""Synthetic multi-frame embedding datasets with planted discriminative channels.

Each category owns a small set of "planted" channels. Planted channels split
into a scene half (a frame-constant offset of amplitude `scene_strength`) and
a motion half (an oscillation `motion_strength * (0.5 + 0.5 sin(2*pi*t/T + phase))`
with a seeded per-instance phase, so it carries both a clip-level mean and a
temporal variance). If one strength is exactly zero the whole planted set goes
to the other kind, so single-signal datasets stay fully recoverable by the
matching score statistic. All remaining channels carry an instance-constant
distractor draw `distractor_strength * N(0, 1)`; `noise_sigma` jitter is added
per frame on every channel, and every frame is then L2-normalized.

When `num_categories * planted_channels_per_category <= dim` the planted sets
are disjoint contiguous blocks; otherwise block starts are spread evenly over
the channel range and neighboring categories overlap (the configuration is
accepted, not rejected, so dense layouts remain usable).
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .rng import substream

NOISE_KINDS = ("symmetric", "asymmetric", "open_set_symmetric", "open_set_asymmetric")

_MAGIC = b"NEAT"
_VERSION = 1


@dataclass(frozen=True)
class GenSpec:
    """Parameters of the synthetic generator."""

    num_categories: int
    instances_per_category: int
    frames: int
    dim: int
    planted_channels_per_category: int
    scene_strength: float = 1.0
    motion_strength: float = 1.0
    distractor_strength: float = 0.5
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_categories", "instances_per_category", "frames", "dim",
                     "planted_channels_per_category"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be a positive integer")
        if self.planted_channels_per_category > self.dim:
            raise ConfigurationError(
                f"planted_channels_per_category={self.planted_channels_per_category} "
                f"exceeds dim={self.dim}")
        for name in ("scene_strength", "motion_strength", "distractor_strength",
                     "noise_sigma"):
            if float(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")


@dataclass(eq=False)
class Dataset:
    """M instances of T unit-normalized d-dimensional frame features."""

    features: np.ndarray      # (M, T, d) float32, unit L2 norm per frame
    noisy_label: np.ndarray   # (M,) int32 in [0, K)
    true_label: np.ndarray    # (M,) int32 in [0, K), -1 for open-set
    open_set_flag: np.ndarray # (M,) bool
    K: int

    @property
    def M(self) -> int:
        return self.features.shape[0]

    @property
    def T(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def copy(self) -> "Dataset":
        return Dataset(self.features.copy(), self.noisy_label.copy(),
                       self.true_label.copy(), self.open_set_flag.copy(), self.K)

    def true_clean_mask(self) -> np.ndarray:
        """True where the noisy label matches the true label (open-set is noisy)."""
        return (self.noisy_label == self.true_label) & ~self.open_set_flag


@dataclass(frozen=True)
class NoiseSpec:
    """Label-noise configuration.

    `pair_map` is required for the asymmetric kinds: a fixed-point-free
    permutation made of disjoint 2-cycles, plus exactly one 3-cycle when the
    category count is odd (see `default_pair_map`).
    """

    kind: str
    ratio: float
    pair_map: tuple | None = None
    seed: int = 0

    def validate(self, num_categories: int) -> None:
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigurationError(f"noise ratio must be in [0, 1), got {self.ratio}")
        if self.kind.endswith("asymmetric"):
            if self.pair_map is None:
                raise ConfigurationError("asymmetric noise requires a pair_map")
            validate_pair_map(self.pair_map, num_categories)


def default_pair_map(num_categories: int) -> tuple:
    """Adjacent-index 2-cycles; an odd remainder becomes one 3-cycle."""
    if num_categories < 2:
        raise ConfigurationError("pair map needs at least 2 categories")
    pm = list(range(num_categories))
    limit = num_categories if num_categories % 2 == 0 else num_categories - 3
    for k in range(0, limit, 2):
        pm[k], pm[k + 1] = k + 1, k
    if num_categories % 2 == 1:
        a = num_categories - 3
        pm[a], pm[a + 1], pm[a + 2] = a + 1, a + 2, a
    return tuple(pm)


def validate_pair_map(pair_map, num_categories: int) -> None:
    pm = tuple(int(v) for v in pair_map)
    if len(pm) != num_categories or sorted(pm) != list(range(num_categories)):
        raise ConfigurationError("pair_map must be a permutation of the categories")
    if any(pm[k] == k for k in range(num_categories)):
        raise ConfigurationError("pair_map must be fixed-point-free")
    seen = set()
    n_three = 0
    for k in range(num_categories):
        if k in seen:
            continue
        cycle = [k]
        nxt = pm[k]
        while nxt != k:
            cycle.append(nxt)
            nxt = pm[nxt]
        seen.update(cycle)
        if len(cycle) == 3:
            n_three += 1
        elif len(cycle) != 2:
            raise ConfigurationError("pair_map cycles must have length 2 or 3")
    if n_three != num_categories % 2:
        raise ConfigurationError("pair_map must contain a 3-cycle exactly when K is odd")


def planted_channels(num_categories: int, dim: int, planted: int, category: int) -> np.ndarray:
    """Channel indices planted for one category (sorted)."""
    if num_categories * planted <= dim:
        start = category * planted
    else:
        start = (category * dim) // num_categories
    return np.sort((start + np.arange(planted)) % dim)


def _scene_motion_split(channels: np.ndarray, scene_strength: float,
                        motion_strength: float) -> tuple:
    if scene_strength == 0.0 and motion_strength > 0.0:
        return channels[:0], channels
    if motion_strength == 0.0 and scene_strength > 0.0:
        return channels, channels[:0]
    half = (len(channels) + 1) // 2
    return channels[:half], channels[half:]


def _normalize_frames(raw: np.ndarray) -> np.ndarray:
    """Unit L2 norm per frame; an all-zero frame becomes the uniform vector."""
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    dim = raw.shape[-1]
    uniform = np.full(dim, 1.0 / np.sqrt(dim))
    out = np.where(norms > 1e-12, raw / np.where(norms > 1e-12, norms, 1.0), uniform)
    return out


def _synth_block(spec: GenSpec, channels: np.ndarray, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Raw (un-normalized) features for n instances of one category."""
    T, d = spec.frames, spec.dim
    scene_ch, motion_ch = _scene_motion_split(channels, spec.scene_strength,
                                              spec.motion_strength)
    raw = np.zeros((n, T, d))

    distract = rng.standard_normal((n, d)) * spec.distractor_strength
    mask = np.ones(d, dtype=bool)
    mask[channels] = False
    raw += (distract * mask)[:, None, :]

    if scene_ch.size:
        raw[:, :, scene_ch] += spec.scene_strength

    if motion_ch.size:
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(n, motion_ch.size))
        t = np.arange(T)
        wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * t[None, :, None] / T + phase[:, None, :])
        raw[:, :, motion_ch] += spec.motion_strength * wave

    raw += rng.normal(0.0, spec.noise_sigma, size=(n, T, d)) if spec.noise_sigma > 0 else 0.0
    return raw


def generate(spec: GenSpec) -> Dataset:
    """Noise-free dataset per `spec`; noisy_label == true_label on return."""
    spec.validate()
    K, n = spec.num_categories, spec.instances_per_category
    M = K * n
    features = np.empty((M, spec.frames, spec.dim), dtype=np.float32)
    for k in range(K):
        rng = substream(spec.seed, "gen", k)
        channels = planted_channels(K, spec.dim, spec.planted_channels_per_category, k)
        raw = _synth_block(spec, channels, n, rng)
        features[k * n:(k + 1) * n] = _normalize_frames(raw).astype(np.float32)
    labels = np.repeat(np.arange(K, dtype=np.int32), n)
    return Dataset(features=features, noisy_label=labels.copy(), true_label=labels.copy(),
                   open_set_flag=np.zeros(M, dtype=bool), K=K)


def inject_noise(data: Dataset, noise: NoiseSpec, gen: GenSpec | None = None) -> Dataset:
    """Flip exactly floor(ratio * M_k) labels per category (or replace features
    for the open-set kinds).

    Symmetric flips are uniform over the other K-1 labels; asymmetric flips
    follow `noise.pair_map`. The open-set kinds keep the annotated label but
    swap the instance for a freshly synthesized one from a pseudo-category
    outside the label set (true_label becomes -1); they need the generator
    spec to know the synthesis amplitudes, so `gen` is required there.
    """
    noise.validate(data.K)
    if np.any(data.noisy_label != data.true_label) or np.any(data.open_set_flag):
        raise ConfigurationError("inject_noise expects a noise-free dataset")
    open_set = noise.kind.startswith("open_set")
    if open_set and gen is None:
        raise ConfigurationError("open-set injection requires the generator spec")

    out = data.copy()
    K = data.K
    for k in range(K):
        ids = np.flatnonzero(data.true_label == k)
        n_flip = int(np.floor(noise.ratio * ids.size))
        if n_flip == 0:
            continue
        rng = substream(noise.seed, "flip", k)
        chosen = rng.choice(ids, size=n_flip, replace=False)
        if noise.kind == "symmetric":
            draws = rng.integers(0, K - 1, size=n_flip)
            draws[draws >= k] += 1
            out.noisy_label[chosen] = draws.astype(np.int32)
        elif noise.kind == "asymmetric":
            out.noisy_label[chosen] = noise.pair_map[k]
        else:
            _replace_open_set(out, chosen, k, noise, gen)
    return out


def _replace_open_set(out: Dataset, chosen: np.ndarray, category: int,
                      noise: NoiseSpec, gen: GenSpec) -> None:
    rng = substream(noise.seed, "openset", category)
    if noise.kind == "open_set_symmetric":
        pseudo = rng.integers(0, out.K, size=chosen.size)
    else:
        pseudo = np.full(chosen.size, category)  # non-overlapping fixed pairing
    spec = replace(gen, num_categories=out.K, seed=gen.seed)
    for idx, j in zip(chosen, pseudo):
        channels = _open_set_channels(noise.seed, int(j), spec)
        raw = _synth_block(spec, channels, 1, rng)
        out.features[idx] = _normalize_frames(raw)[0].astype(np.float32)
    out.true_label[chosen] = -1
    out.open_set_flag[chosen] = True


def _open_set_channels(seed: int, pseudo_category: int, spec: GenSpec) -> np.ndarray:
    rng = substream(seed, "openset-channels", pseudo_category)
    return np.sort(rng.choice(spec.dim, size=spec.planted_channels_per_category,
                              replace=False))


def save_dataset(data: Dataset, path) -> None:
    """Write the `neatds v1` binary format (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, data.M, data.T, data.d, data.K))
        fh.write(np.ascontiguousarray(data.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(data.noisy_label, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(data.true_label, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(data.open_set_flag, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    """Read a `neatds v1` file; raises DataFormatError on any mismatch."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:4] != _MAGIC:
        raise DataFormatError(f"{path}: not a neatds file")
    version, M, T, d, K = struct.unpack("<IIIII", blob[4:24])
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported neatds version {version}")
    expected = 24 + M * T * d * 4 + M * 4 * 2 + M
    if len(blob) != expected:
        raise DataFormatError(f"{path}: truncated or oversized neatds payload")
    off = 24
    features = np.frombuffer(blob, dtype="<f4", count=M * T * d, offset=off)
    features = features.reshape(M, T, d).copy()
    off += M * T * d * 4
    noisy = np.frombuffer(blob, dtype="<i4", count=M, offset=off).copy()
    off += M * 4
    true = np.frombuffer(blob, dtype="<i4", count=M, offset=off).copy()
    off += M * 4
    flags = np.frombuffer(blob, dtype=np.uint8, count=M, offset=off).astype(bool)
    return Dataset(features=features, noisy_label=noisy, true_label=true,
                   open_set_flag=flags, K=int(K))
