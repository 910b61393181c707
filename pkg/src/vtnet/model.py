"""GRU-only, CNN-only and fused VTNet classifiers: training, scoring, checkpoints."""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import Label
from .errors import EmptyTrainingSet, InvalidConfig, ShapeMismatch
from .preprocess import DataItem, grid_shape

log = logging.getLogger(__name__)

VARIANTS = ("gru_only", "cnn_only", "vtnet")
MAGIC = b"VTNET1"
# images scored per CNN chunk when predicting
_PREDICT_CHUNK = 256


@dataclass(frozen=True)
class VtnetConfig:
    variant: str = "vtnet"
    hidden_size: int = 256
    conv_filters: tuple[int, int] = (6, 16)
    kernel_size: int = 5
    head_hidden: int = 256
    n_classes: int = 2
    n_features: int = 8
    image_height: int = 171
    image_width: int = 214
    max_epochs: int = 100
    lr0: float = 1e-3
    batch_size: int = 64
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"

    @property
    def uses_gru(self) -> bool:
        return self.variant in ("gru_only", "vtnet")

    @property
    def uses_cnn(self) -> bool:
        return self.variant in ("cnn_only", "vtnet")

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        counts = (self.hidden_size, self.kernel_size, self.head_hidden, self.n_classes,
                  self.n_features, self.batch_size, self.patience, *self.conv_filters)
        if min(counts) < 1 or len(self.conv_filters) != 2 or self.max_epochs < 0:
            raise InvalidConfig("all counts must be >= 1")
        if not self.lr0 > 0:
            raise InvalidConfig("lr0 must be positive")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig("dtype must be float32 or float64")
        if self.uses_cnn:
            cnn_output_shape(self)

    @classmethod
    def for_screen(cls, screen_width: int, screen_height: int, downsize: int = 6, **kw):
        h, w = grid_shape(screen_width, screen_height, downsize)
        return cls(image_height=h, image_width=w, **kw)


def cnn_output_shape(cfg: VtnetConfig) -> tuple[int, int, int]:
    """Channels, height, width after (conv -> ReLU -> 2x2 pool) twice."""
    h, w = cfg.image_height, cfg.image_width
    k = cfg.kernel_size
    for _ in range(2):
        h, w = h - k + 1, w - k + 1
        if h < 2 or w < 2:
            raise InvalidConfig(f"image {cfg.image_height}x{cfg.image_width} too small for the CNN")
        h, w = h // 2, w // 2
    return cfg.conv_filters[1], h, w


def head_input_width(cfg: VtnetConfig) -> int:
    width = cfg.hidden_size if cfg.uses_gru else 0
    if cfg.uses_cnn:
        c, h, w = cnn_output_shape(cfg)
        width += c * h * w
    return width


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_sensitivity: float
    val_specificity: float
    val_combined: float

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.lr!r}\t{self.train_loss!r}\t{self.val_sensitivity!r}"
                f"\t{self.val_specificity!r}\t{self.val_combined!r}")


@dataclass
class VtnetModel:
    config: VtnetConfig
    params: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def copy(self) -> "VtnetModel":
        return VtnetModel(self.config, {k: v.copy() for k, v in self.params.items()},
                          list(self.history), self.best_epoch)

    def training_log(self) -> str:
        head = "epoch\tlr\ttrain_loss\tval_sensitivity\tval_specificity\tval_combined\n"
        return head + "".join(r.tsv() + "\n" for r in self.history)


@dataclass(frozen=True)
class Prediction:
    item: str
    score: float
    label: int


def init_model(cfg: VtnetConfig) -> VtnetModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    dt = np.dtype(cfg.dtype)
    params: dict[str, np.ndarray] = {}
    if cfg.uses_gru:
        for k, v in nn.init_gru(rng, cfg.n_features, cfg.hidden_size, dt).items():
            params[f"gru.{k}"] = v
    if cfg.uses_cnn:
        f1, f2 = cfg.conv_filters
        k = cfg.kernel_size
        params["conv1.w"] = nn.uniform_init(rng, (f1, 1, k, k), k * k, dt)
        params["conv1.b"] = np.zeros(f1, dt)
        params["conv2.w"] = nn.uniform_init(rng, (f2, f1, k, k), f1 * k * k, dt)
        params["conv2.b"] = np.zeros(f2, dt)
    width = head_input_width(cfg)
    params["fc1.W"] = nn.uniform_init(rng, (cfg.head_hidden, width), width, dt)
    params["fc1.b"] = np.zeros(cfg.head_hidden, dt)
    params["fc2.W"] = nn.uniform_init(rng, (cfg.n_classes, cfg.head_hidden), cfg.head_hidden, dt)
    params["fc2.b"] = np.zeros(cfg.n_classes, dt)
    return VtnetModel(cfg, params)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Stacked model inputs. ``images`` holds each distinct image once;
    ``image_index`` maps items to rows of ``images``."""

    seqs: np.ndarray | None  # (N, T, F)
    mask: np.ndarray | None  # (N, T)
    images: np.ndarray | None  # (M, H, W)
    image_index: np.ndarray | None  # (N,)
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)


class ItemArrays:
    """Items of one split stacked once, so mini-batches are cheap index views."""

    def __init__(self, items: Sequence[DataItem], cfg: VtnetConfig):
        if not items:
            raise EmptyTrainingSet("no items")
        dt = np.dtype(cfg.dtype)
        self.keys = [it.key for it in items]
        self.labels = np.array([int(it.label) for it in items], dtype=np.int64)
        self.seqs = self.mask = self.images = self.image_index = None
        if cfg.uses_gru:
            self.seqs = np.stack([it.sequence.values for it in items]).astype(dt)
            self.mask = np.stack([it.sequence.mask for it in items])
            if self.seqs.shape[2] != cfg.n_features:
                raise ShapeMismatch(f"sequences have {self.seqs.shape[2]} features, "
                                    f"model expects {cfg.n_features}")
        if cfg.uses_cnn:
            slot: dict[int, int] = {}
            pixels = []
            index = np.empty(len(items), dtype=np.int64)
            for n, it in enumerate(items):
                if it.image is None:
                    raise ShapeMismatch(f"item {it.key} has no image")
                ref = id(it.image)
                if ref not in slot:
                    slot[ref] = len(pixels)
                    pixels.append(it.image.pixels)
                index[n] = slot[ref]
            self.images = np.stack(pixels).astype(dt)
            self.image_index = index
            if self.images.shape[1:] != (cfg.image_height, cfg.image_width):
                raise ShapeMismatch(f"images are {self.images.shape[1:]}, model expects "
                                    f"{(cfg.image_height, cfg.image_width)}")

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: np.ndarray) -> Batch:
        seqs = mask = images = image_index = None
        if self.seqs is not None:
            seqs, mask = self.seqs[idx], self.mask[idx]
        if self.images is not None:
            uniq, image_index = np.unique(self.image_index[idx], return_inverse=True)
            images = self.images[uniq]
        return Batch(seqs, mask, images, image_index, self.labels[idx])


def make_batch(items: Sequence[DataItem], cfg: VtnetConfig) -> Batch:
    arrays = ItemArrays(items, cfg)
    return arrays.batch(np.arange(len(arrays)))


# ---------------------------------------------------------------- forward / backward

def _forward(params: dict[str, np.ndarray], cfg: VtnetConfig, batch: Batch, keep_cache: bool):
    parts = []
    cache: dict = {}
    if cfg.uses_gru:
        gru_p = {k[4:]: v for k, v in params.items() if k.startswith("gru.")}
        h, cache["gru"] = nn.gru_forward(batch.seqs, batch.mask, gru_p)
        parts.append(h)
    if cfg.uses_cnn:
        x = batch.images[None]  # (1, M, H, W)
        o1, c1 = nn.conv2d_forward(x, params["conv1.w"], params["conv1.b"])
        r1, m1 = nn.relu_forward(o1)
        p1, pc1 = nn.maxpool2d_forward(r1)
        o2, c2 = nn.conv2d_forward(p1, params["conv2.w"], params["conv2.b"])
        r2, m2 = nn.relu_forward(o2)
        p2, pc2 = nn.maxpool2d_forward(r2)
        feats = p2.transpose(1, 0, 2, 3).reshape(p2.shape[1], -1)
        parts.append(feats[batch.image_index])
        if keep_cache:
            cache["cnn"] = (c1, m1, pc1, c2, m2, pc2, p2.shape)
    z = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
    a1, cache["fc1"] = nn.linear_forward(z, params["fc1.W"], params["fc1.b"])
    h1, cache["relu"] = nn.relu_forward(a1)
    logits, cache["fc2"] = nn.linear_forward(h1, params["fc2.W"], params["fc2.b"])
    return logits, cache


def _backward(dlogits: np.ndarray, cfg: VtnetConfig, batch: Batch, cache) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    dh1, grads["fc2.W"], grads["fc2.b"] = nn.linear_backward(dlogits, cache["fc2"])
    da1 = nn.relu_backward(dh1, cache["relu"])
    dz, grads["fc1.W"], grads["fc1.b"] = nn.linear_backward(da1, cache["fc1"])
    offset = 0
    if cfg.uses_gru:
        H = cfg.hidden_size
        g, _, _ = nn.gru_backward(np.ascontiguousarray(dz[:, :H]), cache["gru"])
        grads.update({f"gru.{k}": v for k, v in g.items()})
        offset = H
    if cfg.uses_cnn:
        c1, m1, pc1, c2, m2, pc2, pshape = cache["cnn"]
        c, m, h, w = pshape
        dfeat = np.zeros((m, c * h * w), dtype=dz.dtype)
        np.add.at(dfeat, batch.image_index, dz[:, offset:])
        dp2 = np.ascontiguousarray(dfeat.reshape(m, c, h, w).transpose(1, 0, 2, 3))
        d = nn.relu_backward(nn.maxpool2d_backward(dp2, pc2), m2)
        dp1, grads["conv2.w"], grads["conv2.b"] = nn.conv2d_backward(d, c2)
        d = nn.relu_backward(nn.maxpool2d_backward(dp1, pc1), m1)
        _, grads["conv1.w"], grads["conv1.b"] = nn.conv2d_backward(d, c1, need_dx=False)
    return grads


def loss_and_grads(params: dict[str, np.ndarray], cfg: VtnetConfig, batch: Batch):
    """Mean NLL of ``batch`` and its gradient for every parameter."""
    logits, cache = _forward(params, cfg, batch, keep_cache=True)
    loss, dlogits = nn.log_softmax_nll(logits, batch.labels)
    return loss, _backward(dlogits, cfg, batch, cache)


def forward_batch(model: VtnetModel, batch: Batch) -> np.ndarray:
    logits, _ = _forward(model.params, model.config, batch, keep_cache=False)
    return nn.log_softmax(logits)


def forward(model: VtnetModel, items: Sequence[DataItem]) -> np.ndarray:
    """(N, 2) log-probabilities for ``items``."""
    return _log_probs(model, ItemArrays(items, model.config))


def _log_probs(model: VtnetModel, arrays: ItemArrays) -> np.ndarray:
    out = []
    for start in range(0, len(arrays), _PREDICT_CHUNK):
        idx = np.arange(start, min(start + _PREDICT_CHUNK, len(arrays)))
        out.append(forward_batch(model, arrays.batch(idx)))
    return np.concatenate(out)


def predict(model: VtnetModel, items: Sequence[DataItem]) -> list[Prediction]:
    arrays = ItemArrays(items, model.config)
    scores = np.exp(_log_probs(model, arrays)[:, int(Label.CONFUSED)])
    return [Prediction(k, float(s), int(y)) for k, s, y in zip(arrays.keys, scores, arrays.labels)]


# ---------------------------------------------------------------- training

def rate_at(pred: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """Sensitivity, specificity and their mean for hard predictions.

    A class absent from ``labels`` is left out of the mean.
    """
    pos, neg = labels == 1, labels == 0
    sens = float(np.mean(pred[pos] == 1)) if pos.any() else float("nan")
    spec = float(np.mean(pred[neg] == 0)) if neg.any() else float("nan")
    vals = [v for v in (sens, spec) if v == v]
    return sens, spec, (sum(vals) / len(vals) if vals else float("nan"))


def lr_schedule(lr0: float, epoch: int, max_epochs: int) -> float:
    return lr0 * (1.0 - epoch / max_epochs)


def fit(model: VtnetModel, train_items: Sequence[DataItem],
        val_items: Sequence[DataItem] | None = None, cfg: VtnetConfig | None = None,
        log_path: str | os.PathLike | None = None) -> VtnetModel:
    """Train with Adam, linear LR decay and early stopping on validation
    combined accuracy at threshold 0.5; returns the best-epoch parameters.

    Without validation items every epoch counts as an improvement, so the
    final parameters are returned.
    """
    cfg = cfg or model.config
    if cfg != model.config:
        model = VtnetModel(cfg, model.params, model.history, model.best_epoch)
    if not train_items:
        raise EmptyTrainingSet("training set is empty")
    trained = model.copy()
    if cfg.max_epochs == 0:
        return trained
    train = ItemArrays(train_items, cfg)
    val = ItemArrays(val_items, cfg) if val_items else None
    rng = np.random.default_rng([cfg.seed, 1])
    state = nn.AdamState()
    params = trained.params
    best = (-np.inf, None, None)
    wait = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_schedule(cfg.lr0, epoch, cfg.max_epochs)
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(params, cfg, train.batch(idx))
            nn.adam_step(params, grads, state, lr)
            total += loss * len(idx)
        train_loss = total / len(order)
        if val is not None:
            pred = (np.exp(_log_probs(trained, val)[:, 1]) >= 0.5).astype(np.int64)
            sens, spec, comb = rate_at(pred, val.labels)
        else:
            sens = spec = comb = float("nan")
        rec = EpochRecord(epoch, lr, train_loss, sens, spec, comb)
        trained.history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.tsv() + "\n")
        log.debug("epoch %d loss %.4f val %.4f", epoch, train_loss, comb)
        score = comb if val is not None else float(epoch)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()})
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best[2] is not None:
        trained.params = best[2]
        trained.best_epoch = best[1]
    return trained


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: VtnetModel, path: str | os.PathLike) -> None:
    """Write ``VTNET1``, the entry count, then per parameter: name, rank,
    dims and little-endian float64 values."""
    chunks = [MAGIC, struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = model.params[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a VTNET1 checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out


def load_checkpoint(path: str | os.PathLike, cfg: VtnetConfig) -> VtnetModel:
    """Rebuild a model of configuration ``cfg`` from a checkpoint."""
    stored = read_checkpoint(path)
    template = init_model(replace(cfg, seed=0))
    if stored.keys() != template.params.keys():
        raise ShapeMismatch("checkpoint parameters do not match the configuration")
    params = {}
    for name, ref in template.params.items():
        if stored[name].shape != ref.shape:
            raise ShapeMismatch(f"{name}: checkpoint {stored[name].shape} vs config {ref.shape}")
        params[name] = stored[name].astype(ref.dtype)
    return VtnetModel(cfg, params)


__all__ = [
    "VARIANTS", "VtnetConfig", "VtnetModel", "Prediction", "EpochRecord", "Batch", "ItemArrays",
    "init_model", "forward", "forward_batch", "loss_and_grads", "fit", "predict",
    "save_checkpoint", "load_checkpoint", "read_checkpoint", "cnn_output_shape",
    "head_input_width", "make_batch", "lr_schedule", "rate_at",
]
