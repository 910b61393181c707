"""Turn task segments into paired (sequence, scan-path image) training items."""
from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import COL, Dataset, Label, TaskRecord, trim_pre_report
from .errors import EmptyAfterTrim, EmptyInput, NoValidGaze, TooFewMinority

log = logging.getLogger(__name__)

FEATURE_COLUMNS = (
    "left_x", "left_y", "left_pupil", "left_dist",
    "right_x", "right_y", "right_pupil", "right_dist",
)
N_FEATURES = len(FEATURE_COLUMNS)
# columns z-scored with training statistics; the rest are screen-scaled
ZSCORE_COLUMNS = [2, 3, 6, 7]
X_COLUMNS = [0, 4]
Y_COLUMNS = [1, 5]
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class PreprocessConfig:
    trim_ms: float = 1000.0
    window_s: float = 5.0
    n_splits: int = 4
    seq_len: int = 150
    downsize: int = 6
    dot_intensity: float = 0.4
    line_intensity: float = 0.2


# ---------------------------------------------------------------- types

@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """A fixed-length (T, 8) feature array; padding is a zero prefix with mask false."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != N_FEATURES:
            raise ValueError(f"values must be (T, {N_FEATURES}), got {self.values.shape}")
        if self.mask.shape != (self.values.shape[0],):
            raise ValueError("mask length must equal sequence length")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def length_valid(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class ScanPathImage:
    pixels: np.ndarray

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class DataItem:
    sequence: FeatureSequence
    image: ScanPathImage | None
    label: Label
    parent_task_id: str
    user_id: str
    split_index: int
    synthetic: bool = False

    @property
    def key(self) -> str:
        tag = "s" if self.synthetic else ""
        return f"{self.parent_task_id}_{self.split_index}{tag}"


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray  # over ZSCORE_COLUMNS
    std: np.ndarray
    screen_width: float
    screen_height: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureStats):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)
                and self.screen_width == other.screen_width
                and self.screen_height == other.screen_height)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "screen_width": self.screen_width, "screen_height": self.screen_height}


# ---------------------------------------------------------------- sequences

def extract_window(task: TaskRecord, window_s: float = 5.0) -> TaskRecord:
    """Keep samples strictly later than ``last_timestamp - window``."""
    ts = task.timestamps
    keep = ts > ts[-1] - window_s * 1000.0
    if keep.all():
        return task
    return task.with_samples(task.samples[keep])


def cyclic_split(samples: Sequence, k: int = 4) -> list:
    """Deal ``samples`` into ``k`` order-preserving subsequences."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return [samples[j::k] for j in range(k)]


def interleave(parts: Sequence[Sequence]) -> list:
    """Inverse of ``cyclic_split``."""
    out = []
    longest = max((len(p) for p in parts), default=0)
    for i in range(longest):
        for p in parts:
            if i < len(p):
                out.append(p[i])
    return out


def raw_features(samples: np.ndarray) -> np.ndarray:
    """(n, 8) per-eye features from a task's sample array.

    An invalid eye borrows the other eye's measurements; a sample with
    neither eye valid repeats the previous row. Rows before the first valid
    sample are NaN and become zeros after ``normalize``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    left = samples[:, [COL["left_x"], COL["left_y"], COL["left_pupil"], COL["left_dist"]]]
    right = samples[:, [COL["right_x"], COL["right_y"], COL["right_pupil"], COL["right_dist"]]]
    lv = samples[:, COL["left_valid"]] > 0
    rv = samples[:, COL["right_valid"]] > 0
    left = np.where(lv[:, None], left, right)
    right = np.where(rv[:, None], right, left)
    feats = np.concatenate([left, right], axis=1)
    any_valid = lv | rv
    feats[~any_valid] = np.nan
    if not any_valid.all():
        # forward fill from the last row with a valid eye
        idx = np.where(any_valid, np.arange(len(feats)), -1)
        np.maximum.accumulate(idx, out=idx)
        filled = feats[np.maximum(idx, 0)]
        filled[idx < 0] = np.nan
        feats = filled
    return feats


def pad_sequence(rows: np.ndarray, seq_len: int = 150) -> FeatureSequence:
    """Zero-prefix-pad to ``seq_len``; longer inputs keep their last ``seq_len`` rows."""
    rows = rows[-seq_len:] if len(rows) > seq_len else rows
    n = len(rows)
    values = np.zeros((seq_len, N_FEATURES), dtype=np.float64)
    mask = np.zeros(seq_len, dtype=bool)
    if n:
        values[seq_len - n:] = rows
        mask[seq_len - n:] = True
    return FeatureSequence(values, mask)


def compute_stats(train: Sequence[FeatureSequence], screen_width: float,
                  screen_height: float) -> FeatureStats:
    """Population mean/std of the pupil and distance columns over unmasked rows."""
    if not train:
        raise EmptyInput("no training sequences")
    rows = np.concatenate([s.values[s.mask][:, ZSCORE_COLUMNS] for s in train])
    if rows.size == 0:
        raise EmptyInput("training sequences contain no unmasked rows")
    return _stats_from_rows(rows, screen_width, screen_height)


def _stats_from_rows(rows: np.ndarray, screen_width, screen_height) -> FeatureStats:
    with warnings.catch_warnings():
        # all-NaN columns fall back to mean 0 / floored std
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(rows, axis=0)
        std = np.nanstd(rows, axis=0)
    mean = np.nan_to_num(mean, nan=0.0)
    std = np.maximum(np.nan_to_num(std, nan=0.0), STD_FLOOR)
    return FeatureStats(mean, std, float(screen_width), float(screen_height))


def normalize_array(values: np.ndarray, mask: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """Vectorised ``normalize`` over (..., T, 8) values with (..., T) masks."""
    out = values.astype(np.float64, copy=True)
    out[..., X_COLUMNS] /= stats.screen_width
    out[..., Y_COLUMNS] /= stats.screen_height
    out[..., ZSCORE_COLUMNS] = (out[..., ZSCORE_COLUMNS] - stats.mean) / stats.std
    out = np.nan_to_num(out, nan=0.0)
    out[~mask] = 0.0
    return out


def normalize(seq: FeatureSequence, stats: FeatureStats) -> FeatureSequence:
    return FeatureSequence(normalize_array(seq.values, seq.mask, stats), seq.mask)


# ---------------------------------------------------------------- scan paths

def grid_shape(screen_width: int, screen_height: int, downsize: int = 6) -> tuple[int, int]:
    """(height, width) of the downsized raster."""
    return math.ceil(screen_height / downsize), math.ceil(screen_width / downsize)


def bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """All-octant integer line from (x0, y0) to (x1, y1), endpoints included."""
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return out
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def line_interiors(x0: np.ndarray, y0: np.ndarray, x1: np.ndarray, y1: np.ndarray):
    """Pixels strictly between the endpoints of many segments at once.

    Produces the same pixels as ``bresenham`` minus its endpoints.
    """
    dx, dy = x1 - x0, y1 - y0
    adx, ady = np.abs(dx), np.abs(dy)
    steps = np.maximum(adx, ady)
    inner = np.maximum(steps - 1, 0)
    total = int(inner.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    seg = np.repeat(np.arange(len(x0)), inner)
    offsets = np.cumsum(inner) - inner
    i = np.arange(total) - np.repeat(offsets, inner) + 1
    n = steps[seg]
    major_x = adx[seg] >= ady[seg]
    # minor axis: rounds i*minor/major to nearest, halves away from the start
    minor = np.where(major_x, ady[seg], adx[seg])
    along_minor = (2 * i * minor + n) // (2 * n)
    sx = np.sign(dx[seg])
    sy = np.sign(dy[seg])
    xs = x0[seg] + sx * np.where(major_x, i, along_minor)
    ys = y0[seg] + sy * np.where(major_x, along_minor, i)
    return xs, ys


def gaze_points(task: TaskRecord) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample gaze (x, y) averaged over valid eyes, plus a validity mask."""
    s = task.samples
    lv = s[:, COL["left_valid"]] > 0
    rv = s[:, COL["right_valid"]] > 0
    nvalid = lv.astype(np.int64) + rv
    ok = nvalid > 0
    lx = np.where(lv, s[:, COL["left_x"]], 0.0)
    rx = np.where(rv, s[:, COL["right_x"]], 0.0)
    ly = np.where(lv, s[:, COL["left_y"]], 0.0)
    ry = np.where(rv, s[:, COL["right_y"]], 0.0)
    denom = np.maximum(nvalid, 1)
    return (lx + rx) / denom, (ly + ry) / denom, ok


def rasterize_scanpath(task: TaskRecord, screen_width: int, screen_height: int,
                       downsize: int = 6, dot: float = 0.4, line: float = 0.2) -> ScanPathImage:
    """Render the gaze path of ``task`` into a downsized grayscale raster.

    Each valid sample adds ``dot`` at its pixel; consecutive valid samples
    add ``line`` along the pixels between them. A sample with no valid eye
    breaks the path. Intensities clamp at 1.
    """
    x, y, ok = gaze_points(task)
    if not ok.any():
        raise NoValidGaze(f"task {task.task_id}: no sample with a valid eye")
    gh, gw = grid_shape(screen_width, screen_height, downsize)
    px = np.clip(np.floor(x / downsize), 0, gw - 1).astype(np.int64)
    py = np.clip(np.floor(y / downsize), 0, gh - 1).astype(np.int64)
    acc = np.bincount(py[ok] * gw + px[ok], minlength=gh * gw) * dot
    joined = ok[:-1] & ok[1:]
    if joined.any():
        a = np.flatnonzero(joined)
        lx, ly = line_interiors(px[a], py[a], px[a + 1], py[a + 1])
        if lx.size:
            acc += np.bincount(ly * gw + lx, minlength=gh * gw) * line
    pixels = np.minimum(acc, 1.0).reshape(gh, gw).astype(np.float32)
    return ScanPathImage(pixels)


def write_pgm(image: ScanPathImage, path: str | os.PathLike) -> None:
    """Binary PGM (P5, maxval 255)."""
    data = np.floor(np.clip(image.pixels.astype(np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode()
    _atomic_bytes(Path(path), header + data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


def _atomic_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- balancing

@dataclass(frozen=True, eq=False)
class SmoteSample:
    sequence: FeatureSequence
    parent: int
    neighbor: int
    lam: float


def smote(minority: Sequence[FeatureSequence], percent: float = 200, k_neighbors: int = 5,
          seed=0) -> list[SmoteSample]:
    """Synthetic minority oversampling on flattened fixed-length sequences.

    Emits ``floor(percent/100 * n)`` samples, each ``x + lam * (nb - x)``
    with ``nb`` one of the k Euclidean nearest minority neighbours of ``x``
    and ``lam ~ U[0, 1)``. The synthetic mask is the union of the parents'.
    """
    n = len(minority)
    if n <= k_neighbors or k_neighbors < 1:
        raise TooFewMinority(f"need more than {k_neighbors} minority items, got {n}")
    X = np.stack([s.values.reshape(-1) for s in minority])
    masks = np.stack([s.mask for s in minority])
    T = minority[0].values.shape[0]
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k_neighbors]

    rng = np.random.default_rng(seed)
    total = int(math.floor(percent / 100.0 * n))
    per = np.full(n, total // n, dtype=np.int64)
    extra = total - int(per.sum())
    if extra:
        per[rng.choice(n, size=extra, replace=False)] += 1
    out = []
    for i in range(n):
        for _ in range(per[i]):
            j = int(nbrs[i, rng.integers(k_neighbors)])
            lam = float(rng.random())
            vec = X[i] + lam * (X[j] - X[i])
            seq = FeatureSequence(vec.reshape(T, N_FEATURES), masks[i] | masks[j])
            out.append(SmoteSample(seq, i, j, lam))
    return out


def downsample_majority(items: Sequence[DataItem], target: int, seed=0,
                        majority: Label = Label.NOT_CONFUSED) -> list[DataItem]:
    """Keep a uniform random ``target``-sized subset of the majority class."""
    if target < 0:
        raise ValueError("target must be >= 0")
    maj = [i for i, it in enumerate(items) if it.label == majority]
    if target >= len(maj):
        return list(items)
    rng = np.random.default_rng(seed)
    keep = set(np.asarray(maj)[rng.choice(len(maj), size=target, replace=False)].tolist())
    return [it for i, it in enumerate(items) if it.label != majority or i in keep]


# ---------------------------------------------------------------- items

def task_items(task: TaskRecord, screen_width: int, screen_height: int,
               cfg: PreprocessConfig) -> list[DataItem]:
    """Items for one (already trimmed) task: one shared image, ``n_splits`` sequences."""
    image = rasterize_scanpath(task, screen_width, screen_height, cfg.downsize,
                               cfg.dot_intensity, cfg.line_intensity)
    window = extract_window(task, cfg.window_s)
    feats = raw_features(window.samples)
    items = []
    for j, part in enumerate(cyclic_split(feats, cfg.n_splits)):
        seq = pad_sequence(part, cfg.seq_len)
        items.append(DataItem(seq, image, task.label, task.task_id, task.user_id, j))
    return items


def build_items(dataset: Dataset, cfg: PreprocessConfig | None = None,
                drops: dict[str, str] | None = None) -> list[DataItem]:
    """Trim, rasterize, window and split every task of ``dataset``.

    Tasks that end up empty after trimming or without any valid gaze are
    skipped; their ids and reasons go into ``drops`` when given.
    """
    cfg = cfg or PreprocessConfig()
    items: list[DataItem] = []
    dropped: dict[str, str] = {}
    for task in dataset.tasks:
        try:
            trimmed = trim_pre_report(task, cfg.trim_ms)
            items.extend(task_items(trimmed, dataset.screen_width, dataset.screen_height, cfg))
        except (EmptyAfterTrim, NoValidGaze) as exc:
            dropped[task.task_id] = type(exc).__name__
    if dropped:
        log.warning("dropped %d task(s) during preprocessing", len(dropped))
    if drops is not None:
        drops.update(dropped)
    return items


def write_items(items: Sequence[DataItem], directory: str | os.PathLike) -> None:
    """Serialise items as ``items/<task>_<split>.tsv``, ``images/<task>.pgm`` and ``index.tsv``."""
    root = Path(directory)
    (root / "items").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    header = "mask\t" + "\t".join(FEATURE_COLUMNS) + "\n"
    index = ["item\tlabel\tuser\tsynthetic\n"]
    written_images = set()
    for it in items:
        lines = [header]
        for m, row in zip(it.sequence.mask.tolist(), it.sequence.values.tolist()):
            lines.append(f"{int(m)}\t" + "\t".join("nan" if v != v else repr(v) for v in row) + "\n")
        _atomic_bytes(root / "items" / f"{it.key}.tsv", "".join(lines).encode())
        if it.image is not None and it.parent_task_id not in written_images:
            write_pgm(it.image, root / "images" / f"{it.parent_task_id}.pgm")
            written_images.add(it.parent_task_id)
        index.append(f"{it.key}\t{it.label.text}\t{it.user_id}\t{int(it.synthetic)}\n")
    _atomic_bytes(root / "index.tsv", "".join(index).encode())


def read_item_sequence(path: str | os.PathLike) -> FeatureSequence:
    rows = Path(path).read_text().splitlines()[1:]
    arr = np.array([[float(v) for v in r.split("\t")] for r in rows], dtype=np.float64)
    return FeatureSequence(arr[:, 1:].copy(), arr[:, 0] > 0)
