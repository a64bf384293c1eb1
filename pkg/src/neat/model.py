"""Trainable pipeline and the alternating detect/update training loop.

The network is deliberately small: a per-frame two-layer tanh encoder with
frame normalization, a mean-pool consensus over frames, an affine classifier
head, and an affine+normalize projection head. All gradients are analytic
(no autodiff); the optimizer is SGD with momentum and weight decay.

Each epoch runs two phases: noise detection on the frozen model (warm-up
epochs force an all-clean split), then minibatch updating where the
cross-entropy term sees the estimated-clean instances and the contrastive
term sees everything.
"""

import json
import struct
import time
from dataclasses import dataclass, asdict, field

import numpy as np

from . import contrastive as ncl
from . import truncation as trunc
from .contrastive import ContrastiveConfig, ContrastiveQuery, MemoryBank
from .datagen import Dataset
from .errors import ConfigurationError, DataFormatError, TrainingAborted
from .metrics import EpochMetrics, detection_metrics
from .rng import substream

CT_MODES = ("ct", "ct_all", "ct_oracle", "ct_star", "p_correction")
TRAIN_STRATEGIES = ("NCL", "CL", "SCL", "PL_H", "PL_S", "PL_K", "none")

_CKPT_MAGIC = b"NEAM"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    b: int = 200
    xi: float = 0.5
    tau: float = 0.1
    B: int = 16
    lambda_r: float = 1.0
    score_mode: str = "var"
    strategy: str = "NCL"
    ct_mode: str = "ct"
    seed: int = 0
    encoder: str = "mlp"          # "mlp" | "identity"
    encoder_hidden: int = 64
    encoder_dim: int = 0          # 0 -> same as the input dim
    proj_dim: int = 128
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    kmeans_init: bool = False
    anchors_per_category: int = 10
    slice_mode: str = "top"
    open_set_mode: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 1:
            raise ConfigurationError("epochs, batch_size and warmup_epochs must be >= 1")
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("invalid optimizer settings")
        if self.tau <= 0 or self.B < 1 or self.lambda_r < 0 or not 0 < self.xi:
            raise ConfigurationError("invalid detection/contrastive settings")
        if self.score_mode not in trunc.SCORE_MODES:
            raise ConfigurationError(f"unknown score_mode {self.score_mode!r}")
        if self.strategy not in TRAIN_STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.ct_mode not in CT_MODES:
            raise ConfigurationError(f"unknown ct_mode {self.ct_mode!r}")
        if self.encoder not in ("mlp", "identity"):
            raise ConfigurationError(f"unknown encoder {self.encoder!r}")
        if self.slice_mode not in trunc.SLICE_MODES:
            raise ConfigurationError(f"unknown slice_mode {self.slice_mode!r}")

    def contrastive_config(self) -> ContrastiveConfig | None:
        if self.strategy not in ncl.STRATEGIES:
            return None
        return ContrastiveConfig(temperature=self.tau, neighbors=self.B,
                                 strategy=self.strategy,
                                 open_set_mode=self.open_set_mode,
                                 lambda_r=self.lambda_r)


@dataclass
class ModelState:
    params: dict
    momentum: dict
    encoder_kind: str
    d_in: int
    d_enc: int
    K: int
    d_proj: int

    def param_names(self) -> tuple:
        enc = ("enc_w1", "enc_b1", "enc_w2", "enc_b2") if self.encoder_kind == "mlp" else ()
        return enc + ("cls_w", "cls_b", "proj_w", "proj_b")


def init_state(d_in: int, K: int, cfg: TrainConfig) -> ModelState:
    rng = substream(cfg.seed, "init")
    d_enc = cfg.encoder_dim or d_in
    if cfg.encoder == "identity":
        d_enc = d_in
    params = {}
    if cfg.encoder == "mlp":
        h = cfg.encoder_hidden
        params["enc_w1"] = rng.standard_normal((d_in, h)) / np.sqrt(d_in)
        params["enc_b1"] = np.zeros(h)
        params["enc_w2"] = rng.standard_normal((h, d_enc)) / np.sqrt(h)
        params["enc_b2"] = np.zeros(d_enc)
    params["cls_w"] = rng.standard_normal((d_enc, K)) / np.sqrt(d_enc)
    params["cls_b"] = np.zeros(K)
    params["proj_w"] = rng.standard_normal((d_enc, cfg.proj_dim)) / np.sqrt(d_enc)
    params["proj_b"] = np.zeros(cfg.proj_dim)
    momentum = {name: np.zeros_like(value) for name, value in params.items()}
    return ModelState(params=params, momentum=momentum, encoder_kind=cfg.encoder,
                      d_in=d_in, d_enc=d_enc, K=K, d_proj=cfg.proj_dim)


def _normalize_cached(u: np.ndarray):
    norm = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-30)
    return u / norm, norm


@dataclass
class ForwardResult:
    x: np.ndarray       # (n, d_enc) clip embeddings, unit norm
    logits: np.ndarray  # (n, K)
    z: np.ndarray       # (n, d_proj) projections, unit norm
    cache: dict = field(repr=False, default_factory=dict)


def forward(state: ModelState, frames: np.ndarray) -> ForwardResult:
    """Encode frames, pool to the clip embedding, and apply both heads.

    `frames` is (n, T, d_in) or a single (T, d_in) block.
    """
    f = np.asarray(frames, dtype=np.float64)
    single = f.ndim == 2
    if single:
        f = f[None]
    p = state.params
    cache = {"frames": f}
    if state.encoder_kind == "mlp":
        a1 = f @ p["enc_w1"] + p["enc_b1"]
        h1 = np.tanh(a1)
        u = h1 @ p["enc_w2"] + p["enc_b2"]
        cache["h1"] = h1
    else:
        u = f
    v, u_norm = _normalize_cached(u)
    m = v.mean(axis=1)
    x, m_norm = _normalize_cached(m)
    logits = x @ p["cls_w"] + p["cls_b"]
    pz = x @ p["proj_w"] + p["proj_b"]
    z, p_norm = _normalize_cached(pz)
    if not (np.isfinite(logits).all() and np.isfinite(z).all()):
        raise TrainingAborted("non-finite activation in forward pass")
    cache.update(v=v, u_norm=u_norm, x=x, m_norm=m_norm, z=z, p_norm=p_norm)
    if single:
        return ForwardResult(x[0], logits[0], z[0], cache)
    return ForwardResult(x, logits, z, cache)


def _backward(state: ModelState, cache: dict, dlogits: np.ndarray,
              dz: np.ndarray) -> dict:
    """Analytic gradients of a loss given dL/dlogits and dL/dz (keys constant)."""
    p = state.params
    x, z = cache["x"], cache["z"]
    grads = {}

    dp = (dz - z * (z * dz).sum(axis=-1, keepdims=True)) / cache["p_norm"]
    grads["proj_w"] = x.T @ dp
    grads["proj_b"] = dp.sum(axis=0)
    dx = dp @ p["proj_w"].T

    grads["cls_w"] = x.T @ dlogits
    grads["cls_b"] = dlogits.sum(axis=0)
    dx = dx + dlogits @ p["cls_w"].T

    dm = (dx - x * (x * dx).sum(axis=-1, keepdims=True)) / cache["m_norm"]
    T = cache["v"].shape[1]
    dv = np.repeat(dm[:, None, :], T, axis=1) / T
    v = cache["v"]
    du = (dv - v * (v * dv).sum(axis=-1, keepdims=True)) / cache["u_norm"]

    if state.encoder_kind == "mlp":
        h1, f = cache["h1"], cache["frames"]
        d_enc, h = state.d_enc, h1.shape[-1]
        du_flat = du.reshape(-1, d_enc)
        h1_flat = h1.reshape(-1, h)
        grads["enc_w2"] = h1_flat.T @ du_flat
        grads["enc_b2"] = du_flat.sum(axis=0)
        da1 = (du @ p["enc_w2"].T) * (1.0 - h1 ** 2)
        da1_flat = da1.reshape(-1, h)
        grads["enc_w1"] = f.reshape(-1, state.d_in).T @ da1_flat
        grads["enc_b1"] = da1_flat.sum(axis=0)
    return grads


def cross_entropy(logits: np.ndarray, y: np.ndarray):
    """Stabilized cross entropy; returns (loss, grad wrt logits).

    Accepts a single (K,) pair or batches (n, K); batch outputs are per-row.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    yy = y[None] if single else y
    peak = lg.max(axis=1, keepdims=True)
    log_norm = peak + np.log(np.exp(lg - peak).sum(axis=1, keepdims=True))
    log_softmax = lg - log_norm
    loss = -(yy * log_softmax).sum(axis=1)
    grad = np.exp(log_softmax) - yy
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def one_hot(labels: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((np.asarray(labels).size, K))
    out[np.arange(out.shape[0]), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


def make_views(frames: np.ndarray, rng: np.random.Generator):
    """Two views of one instance: disjoint half-size frame subsets when T >= 4,
    otherwise two independent jitter draws (sigma 0.05, renormalized)."""
    T = frames.shape[0]
    if T >= 4:
        perm = rng.permutation(T)
        half = T // 2
        return frames[np.sort(perm[:half])], frames[np.sort(perm[half:2 * half])]
    views = []
    for _ in range(2):
        jittered = frames + rng.normal(0.0, 0.05, size=frames.shape)
        norms = np.maximum(np.linalg.norm(jittered, axis=-1, keepdims=True), 1e-30)
        views.append(jittered / norms)
    return views[0], views[1]


@dataclass
class BatchResult:
    total_loss: float
    ce_loss: float
    ce_count: int
    ncl_loss: float
    grads: dict


def batch_loss(state: ModelState, instance_ids, view1: np.ndarray,
               targets: np.ndarray, ce_mask: np.ndarray,
               second_view_z: np.ndarray | None, split, bank: MemoryBank | None,
               ccfg: ContrastiveConfig | None, categories,
               update_bank: bool = False) -> BatchResult:
    """Loss and parameter gradients for one minibatch.

    The cross-entropy term averages over rows with `ce_mask` set; the
    contrastive term treats every row as a query against the bank, with
    `second_view_z` passed in as constants. Pure unless `update_bank`.
    """
    fwd = forward(state, view1)
    n = fwd.logits.shape[0]
    dlogits = np.zeros_like(fwd.logits)
    ce_val, ce_count = 0.0, int(np.asarray(ce_mask).sum())
    if ce_count:
        rows = np.flatnonzero(ce_mask)
        losses, grad = cross_entropy(fwd.logits[rows], targets[rows])
        ce_val = float(losses.mean())
        dlogits[rows] = grad / ce_count

    ncl_val = 0.0
    dz = np.zeros_like(fwd.z)
    if ccfg is not None and bank is not None:
        queries = [ContrastiveQuery(instance_id=int(instance_ids[r]),
                                    category=int(categories[r]), z=fwd.z[r],
                                    z_second=None if second_view_z is None
                                    else second_view_z[r])
                   for r in range(n)]
        res = ncl.ncl_batch_loss(queries, split, bank, ccfg, update_bank=update_bank)
        ncl_val = res.loss
        for r in range(n):
            g = res.grads.get(int(instance_ids[r]))
            if g is not None:
                dz[r] = g

    grads = _backward(state, fwd.cache, dlogits, dz)
    return BatchResult(total_loss=ce_val + ncl_val, ce_loss=ce_val,
                       ce_count=ce_count, ncl_loss=ncl_val, grads=grads)


def sgd_step(state: ModelState, grads: dict, lr: float, momentum: float,
             weight_decay: float) -> None:
    for name, grad in grads.items():
        g = grad + weight_decay * state.params[name]
        buf = state.momentum[name]
        buf *= momentum
        buf += g
        state.params[name] -= lr * buf
        if not np.isfinite(state.params[name]).all():
            raise TrainingAborted(f"non-finite parameter {name} after update")


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    decays = sum(1 for e in cfg.lr_decay_epochs if epoch >= int(e))
    return cfg.learning_rate * cfg.lr_decay_factor ** decays


@dataclass
class EpochLosses:
    ce: float
    ncl: float


def train_epoch(data: Dataset, split, state: ModelState, cfg: TrainConfig,
                epoch: int, bank: MemoryBank | None,
                fixed_pseudo_labels: np.ndarray | None = None) -> EpochLosses:
    """One pass of minibatch SGD under the frozen split.

    Cross entropy covers estimated-clean instances (plus pseudo-labeled noisy
    ones under a PL strategy); the contrastive term covers all instances.
    The shuffle and the two views are deterministic in (seed, epoch).
    """
    order = substream(cfg.seed, "shuffle", epoch).permutation(data.M)
    lr = _lr_at(cfg, epoch)
    ccfg = cfg.contrastive_config()
    pl_mode = cfg.strategy if cfg.strategy in ncl.PSEUDO_LABEL_MODES else None

    ce_sum, ce_n, ncl_sum, n_batches = 0.0, 0, 0.0, 0
    for start in range(0, data.M, cfg.batch_size):
        ids = order[start:start + cfg.batch_size]
        view1, view2 = [], []
        for i in ids:
            rng = substream(cfg.seed, "views", epoch, int(i))
            v1, v2 = make_views(np.asarray(data.features[i], dtype=np.float64), rng)
            view1.append(v1)
            view2.append(v2)
        view1 = np.stack(view1)
        view2 = np.stack(view2)
        second_z = forward(state, view2).z if ccfg is not None else None

        clean = split.clean_mask[ids]
        targets = one_hot(data.noisy_label[ids], data.K)
        if pl_mode is not None:
            ce_mask = np.ones(ids.size, dtype=bool)
            noisy_rows = np.flatnonzero(~clean)
            if noisy_rows.size:
                if pl_mode == "PL_K":
                    if fixed_pseudo_labels is None:
                        raise ConfigurationError("PL_K needs per-epoch pseudo labels")
                    targets[noisy_rows] = fixed_pseudo_labels[ids[noisy_rows]]
                else:
                    preds = _softmax(forward(state, view1).logits[noisy_rows])
                    for row, pred in zip(noisy_rows, preds):
                        targets[row] = ncl.pseudo_label(pl_mode, prediction=pred)
        else:
            ce_mask = clean

        out = batch_loss(state, ids, view1, targets, ce_mask, second_z, split,
                         bank, ccfg, categories=data.noisy_label[ids],
                         update_bank=True)
        sgd_step(state, out.grads, lr, cfg.momentum, cfg.weight_decay)
        ce_sum += out.ce_loss * out.ce_count
        ce_n += out.ce_count
        ncl_sum += out.ncl_loss
        n_batches += 1
    return EpochLosses(ce=ce_sum / ce_n if ce_n else 0.0,
                       ncl=ncl_sum / n_batches if n_batches else 0.0)


def _softmax(logits: np.ndarray) -> np.ndarray:
    peak = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - peak)
    return e / e.sum(axis=-1, keepdims=True)


def embed_dataset(data: Dataset, state: ModelState, chunk: int = 512) -> Dataset:
    """Frozen-encoder copy of the dataset: per-frame encoded unit features."""
    if state.encoder_kind == "identity":
        features = np.asarray(data.features, dtype=np.float64)
    else:
        blocks = []
        for start in range(0, data.M, chunk):
            f = np.asarray(data.features[start:start + chunk], dtype=np.float64)
            p = state.params
            u = np.tanh(f @ p["enc_w1"] + p["enc_b1"]) @ p["enc_w2"] + p["enc_b2"]
            blocks.append(_normalize_cached(u)[0])
        features = np.concatenate(blocks, axis=0)
    return Dataset(features=features, noisy_label=data.noisy_label.copy(),
                   true_label=data.true_label.copy(),
                   open_set_flag=data.open_set_flag.copy(), K=data.K)


def accuracy(state: ModelState, data: Dataset, chunk: int = 512) -> float:
    """Classification accuracy against true labels (open-set excluded)."""
    keep = data.true_label >= 0
    if not keep.any():
        return 0.0
    correct = 0
    ids = np.flatnonzero(keep)
    for start in range(0, ids.size, chunk):
        sel = ids[start:start + chunk]
        logits = forward(state, np.asarray(data.features[sel], dtype=np.float64)).logits
        correct += int((np.argmax(logits, axis=1) == data.true_label[sel]).sum())
    return correct / ids.size


def _all_clean_split(M: int, xi: float) -> trunc.SplitEstimate:
    return trunc.SplitEstimate(noise_posterior=np.zeros(M),
                               clean_mask=np.ones(M, dtype=bool), threshold=xi,
                               similarity=np.zeros(M))


def _oracle_selections(embedded: Dataset, truth: np.ndarray, b: int) -> dict:
    out = {}
    for a in range(embedded.K):
        try:
            out[a] = trunc.oracle_score(embedded, truth, a).top(b)
        except Exception:
            continue  # undefined oracle: category falls back to the scored selection
    return out


def detect(data: Dataset, state: ModelState, cfg: TrainConfig,
           omega: trunc.ReferenceSet | None = None) -> trunc.SplitEstimate:
    """One noise-detection round on the frozen model."""
    embedded = embed_dataset(data, state)
    if omega is None:
        omega = trunc.ReferenceSet.full(embedded)
    b = state.d_enc if cfg.ct_mode == "ct_all" else cfg.b
    if b > state.d_enc:
        raise ConfigurationError(f"b={b} exceeds the encoder dimension {state.d_enc}")
    selections = None
    if cfg.ct_mode == "ct_oracle":
        selections = _oracle_selections(embedded, data.true_clean_mask(), b)
    method = "pca" if cfg.ct_mode == "p_correction" else "ct"
    return trunc.split(embedded, omega, b, cfg.score_mode, cfg.xi, method=method,
                       selections=selections, slice_mode=cfg.slice_mode)


@dataclass
class RunResult:
    history: list
    state: ModelState
    split: trunc.SplitEstimate


def run(data: Dataset, cfg: TrainConfig, test_data: Dataset | None = None,
        on_epoch=None) -> RunResult:
    """Full iterative loop: alternating frozen-model detection and updating.

    Warm-up epochs force an all-clean split. The reference set for each
    detection round is the previous round's clean set (the whole dataset on
    the first round, or fixed anchors under ct_star, or the dominant k-means
    cluster when kmeans_init is set). Test accuracy is measured on
    `test_data` when given, else against the training set's true labels.
    """
    cfg.validate()
    state = init_state(data.d, data.K, cfg)
    bank = MemoryBank(16 * data.K)
    truth = data.true_clean_mask()
    eval_data = test_data if test_data is not None else data
    anchors = trunc.ReferenceSet.anchors(data, cfg.anchors_per_category) \
        if cfg.ct_mode == "ct_star" else None

    history: list = []
    split = _all_clean_split(data.M, cfg.xi)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if epoch <= cfg.warmup_epochs:
            split = _all_clean_split(data.M, cfg.xi)
        else:
            if anchors is not None:
                omega = anchors
            elif epoch == cfg.warmup_epochs + 1 and cfg.kmeans_init:
                omega = trunc.ReferenceSet(
                    {a: trunc.kmeans_init_omega(data, a, seed=cfg.seed)
                     for a in range(data.K)})
            else:
                omega = trunc.ReferenceSet.from_clean_mask(data, split.clean_mask)
            split = detect(data, state, cfg, omega)

        fixed_pl = None
        if cfg.strategy == "PL_K" and not split.clean_mask.all():
            fixed_pl = _knn_pseudo_labels(data, state, split, cfg)

        losses = train_epoch(data, split, state, cfg, epoch, bank, fixed_pl)

        p, r, f1 = detection_metrics(split, truth)
        m = EpochMetrics(epoch=epoch, ce_loss=losses.ce, ncl_loss=losses.ncl,
                         detection_precision=p, detection_recall=r, detection_f1=f1,
                         estimated_clean_count=split.clean_count,
                         test_accuracy=accuracy(state, eval_data),
                         wall_time_seconds=time.perf_counter() - t0)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return RunResult(history=history, state=state, split=split)


def _knn_pseudo_labels(data: Dataset, state: ModelState, split, cfg: TrainConfig,
                       k: int = 64) -> np.ndarray:
    """Per-epoch PL_K targets from frozen clip embeddings and the clean set."""
    embedded = embed_dataset(data, state)
    x = trunc.clip_embeddings(embedded.features)
    ref_ids = np.flatnonzero(split.clean_mask)
    if ref_ids.size == 0:
        ref_ids = np.arange(data.M)
    targets = one_hot(data.noisy_label, data.K)
    for i in np.flatnonzero(~split.clean_mask):
        refs = ref_ids[ref_ids != i]
        targets[i] = ncl.pseudo_label("PL_K", query_x=x[i], reference_x=x[refs],
                                      reference_labels=data.noisy_label[refs],
                                      num_categories=data.K, k=k)
    return targets


def save_checkpoint(state: ModelState, cfg: TrainConfig, path) -> None:
    """Binary checkpoint plus a JSON sidecar (<path>.json) with the config."""
    names = state.param_names()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(names)))
        for name in names:
            tensor = np.atleast_2d(np.asarray(state.params[name], dtype="<f4"))
            fh.write(struct.pack("<II", tensor.shape[0], tensor.shape[1]))
            fh.write(np.ascontiguousarray(tensor).tobytes())
    sidecar = {"train_config": asdict(cfg), "encoder_kind": state.encoder_kind,
               "d_in": state.d_in, "d_enc": state.d_enc, "K": state.K,
               "d_proj": state.d_proj}
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple:
    """Returns (ModelState, TrainConfig) from a checkpoint and its sidecar."""
    with open(str(path) + ".json") as fh:
        sidecar = json.load(fh)
    raw_cfg = dict(sidecar["train_config"])
    raw_cfg["lr_decay_epochs"] = tuple(raw_cfg.get("lr_decay_epochs", ()))
    cfg = TrainConfig(**raw_cfg)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise DataFormatError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", blob[4:12])
    if version != _CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    state = ModelState(params={}, momentum={}, encoder_kind=sidecar["encoder_kind"],
                       d_in=sidecar["d_in"], d_enc=sidecar["d_enc"],
                       K=sidecar["K"], d_proj=sidecar["d_proj"])
    names = state.param_names()
    if count != len(names):
        raise DataFormatError(f"{path}: expected {len(names)} tensors, found {count}")
    off = 12
    for name in names:
        rows, cols = struct.unpack("<II", blob[off:off + 8])
        off += 8
        tensor = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        off += rows * cols * 4
        value = tensor.reshape(rows, cols).astype(np.float64)
        if name in ("enc_b1", "enc_b2", "cls_b", "proj_b"):
            value = value[0]
        state.params[name] = value
        state.momentum[name] = np.zeros_like(value)
    if off != len(blob):
        raise DataFormatError(f"{path}: trailing bytes in checkpoint")
    return state, cfg
