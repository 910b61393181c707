"""Eye-tracking task segments: data model, TSV I/O, trimming and synthesis.

Samples of a task are held column-wise in one float64 array (rows =
samples, columns = ``SAMPLE_COLUMNS``) rather than as a list of objects;
``TaskRecord.sample(i)`` materialises a single ``RawSample`` when needed.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyAfterTrim, InvalidConfig, MalformedRow, UnknownTask, UnlabeledTask


SAMPLE_COLUMNS = (
    "timestamp_ms",
    "left_x", "left_y", "right_x", "right_y",
    "left_pupil", "right_pupil", "left_dist", "right_dist",
    "left_valid", "right_valid",
)
COL = {name: i for i, name in enumerate(SAMPLE_COLUMNS)}
SAMPLES_HEADER = ("user_id", "task_id") + SAMPLE_COLUMNS
LABELS_HEADER = ("task_id", "label", "report_time_ms")

DEFAULT_SCREEN = (1280, 1024)
DEFAULT_RATE_HZ = 120.0


class Label(IntEnum):
    NOT_CONFUSED = 0
    CONFUSED = 1

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


@dataclass(frozen=True)
class RawSample:
    timestamp_ms: float
    left_x: float
    left_y: float
    right_x: float
    right_y: float
    left_pupil: float
    right_pupil: float
    left_dist: float
    right_dist: float
    left_valid: bool
    right_valid: bool


def samples_array(samples: Iterable[RawSample]) -> np.ndarray:
    """Stack ``RawSample`` objects into the column layout used by ``TaskRecord``."""
    rows = [[float(getattr(s, c)) for c in SAMPLE_COLUMNS] for s in samples]
    return np.array(rows, dtype=np.float64).reshape(-1, len(SAMPLE_COLUMNS))


@dataclass(frozen=True, eq=False)
class TaskRecord:
    user_id: str
    task_id: str
    samples: np.ndarray
    label: Label
    report_time_ms: float | None = None

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(SAMPLE_COLUMNS):
            raise ValueError(f"task {self.task_id}: samples must be (n, {len(SAMPLE_COLUMNS)})")
        ts = arr[:, 0]
        if np.any(np.diff(ts) < 0):
            raise ValueError(f"task {self.task_id}: samples not sorted by timestamp")
        if ts.size and ts[0] < 0:
            raise ValueError(f"task {self.task_id}: negative timestamp")
        label = Label(self.label)
        if (label == Label.CONFUSED) != (self.report_time_ms is not None):
            raise ValueError(f"task {self.task_id}: report time must be present iff confused")
        if arr is self.samples:
            arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "label", label)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskRecord):
            return NotImplemented
        return (self.user_id == other.user_id and self.task_id == other.task_id
                and self.label == other.label and self.report_time_ms == other.report_time_ms
                and np.array_equal(self.samples, other.samples, equal_nan=True))

    __hash__ = None

    @property
    def timestamps(self) -> np.ndarray:
        return self.samples[:, 0]

    @property
    def confused(self) -> bool:
        return self.label == Label.CONFUSED

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, COL[name]]

    def sample(self, i: int) -> RawSample:
        row = self.samples[i]
        vals = {c: float(v) for c, v in zip(SAMPLE_COLUMNS, row)}
        vals["left_valid"] = bool(vals["left_valid"])
        vals["right_valid"] = bool(vals["right_valid"])
        return RawSample(**vals)

    def with_samples(self, samples: np.ndarray) -> "TaskRecord":
        return TaskRecord(self.user_id, self.task_id, samples, self.label, self.report_time_ms)


@dataclass(frozen=True)
class Dataset:
    screen_width: int
    screen_height: int
    sampling_rate_hz: float
    tasks: tuple[TaskRecord, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids are not unique")
        for t in tasks:
            if len(t) == 0:
                raise ValueError(f"task {t.task_id} has no samples")
        if self.screen_width < 1 or self.screen_height < 1:
            raise ValueError("screen dimensions must be positive")
        object.__setattr__(self, "tasks", tasks)

    @property
    def users(self) -> list[str]:
        return sorted({t.user_id for t in self.tasks})

    @property
    def meta(self) -> dict[str, float]:
        return {"screen_width": self.screen_width, "screen_height": self.screen_height,
                "sampling_rate_hz": self.sampling_rate_hz}

    def n_confused(self) -> int:
        return sum(t.confused for t in self.tasks)


# ---------------------------------------------------------------- files

def read_meta(path: str | os.PathLike) -> dict[str, float]:
    """Parse a ``key = value`` (or ``key value``) text file; ``#`` starts a comment."""
    out: dict[str, float] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.replace("=", " ", 1).partition(" ")
        out[key.strip()] = float(value.strip())
    return out


def write_meta(path: str | os.PathLike, meta: Mapping[str, float]) -> None:
    lines = [f"{k} = {_fmt_num(v)}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _meta_values(meta) -> tuple[int, int, float]:
    if isinstance(meta, (str, os.PathLike)):
        meta = read_meta(meta)
    meta = dict(meta or {})
    w = int(meta.get("screen_width", DEFAULT_SCREEN[0]))
    h = int(meta.get("screen_height", DEFAULT_SCREEN[1]))
    rate = float(meta.get("sampling_rate_hz", DEFAULT_RATE_HZ))
    return w, h, rate


def parse_dataset(samples_path, labels_path, meta=None) -> Dataset:
    """Load ``samples.tsv`` + ``labels.tsv`` into a ``Dataset``.

    ``meta`` is a mapping or a path to a key-value meta file; missing keys
    fall back to 1280×1024 at 120 Hz. Row numbers in errors are 1-based
    file line numbers.
    """
    width, height, rate = _meta_values(meta)
    order: list[str] = []
    rows: dict[str, list[list[float]]] = {}
    owner: dict[str, str] = {}
    ncol = len(SAMPLES_HEADER)
    with open(samples_path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise MalformedRow("empty input: samples file has no header", row=1)
        if tuple(header) != SAMPLES_HEADER:
            raise MalformedRow("unexpected samples header", row=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != ncol:
                raise MalformedRow(f"expected {ncol} columns, got {len(rec)}", row=lineno)
            user, task = rec[0], rec[1]
            try:
                vals = [float(x) for x in rec[2:-2]]
            except ValueError as exc:
                raise MalformedRow(str(exc), row=lineno) from None
            flags = rec[-2:]
            if any(f not in ("0", "1") for f in flags):
                raise MalformedRow(f"valid flags must be 0/1, got {flags}", row=lineno)
            vals.extend(float(f) for f in flags)
            if task not in rows:
                order.append(task)
                rows[task] = []
                owner[task] = user
            elif owner[task] != user:
                raise MalformedRow(f"task {task} appears under two users", row=lineno)
            rows[task].append(vals)
    if not order:
        raise MalformedRow("empty input: samples file has no data rows", row=2)

    labels: dict[str, tuple[Label, float | None]] = {}
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != LABELS_HEADER:
            raise MalformedRow("unexpected or missing labels header", row=1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise MalformedRow(f"expected 3 columns, got {len(rec)}", row=lineno)
            task, label_text, report = rec
            try:
                label = Label.parse(label_text)
                report_ms = float(report) if report.strip() else None
            except ValueError as exc:
                raise MalformedRow(str(exc), row=lineno) from None
            if task not in rows:
                raise UnknownTask(f"label row {lineno} references unknown task {task!r}")
            if task in labels:
                raise MalformedRow(f"duplicate label for task {task}", row=lineno)
            if (label == Label.CONFUSED) != (report_ms is not None):
                raise MalformedRow("report_time_ms must be set iff label is confused", row=lineno)
            labels[task] = (label, report_ms)

    tasks = []
    for task in order:
        if task not in labels:
            raise UnlabeledTask(f"task {task!r} has no label row")
        arr = np.array(rows[task], dtype=np.float64)
        arr = arr[np.argsort(arr[:, 0], kind="stable")]
        label, report = labels[task]
        tasks.append(TaskRecord(owner[task], task, arr, label, report))
    return Dataset(width, height, rate, tuple(tasks))


def _fmt(v: float) -> str:
    return "nan" if v != v else repr(v)


def write_dataset(dataset: Dataset, directory: str | os.PathLike) -> dict[str, Path]:
    """Write ``samples.tsv``, ``labels.tsv`` and ``meta.txt`` into ``directory``.

    Files are written to a temporary name and renamed into place.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"samples": out / "samples.tsv", "labels": out / "labels.tsv", "meta": out / "meta.txt"}

    def _atomic(path: Path, writer):
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)

    def _samples(fh):
        fh.write("\t".join(SAMPLES_HEADER) + "\n")
        for t in dataset.tasks:
            prefix = f"{t.user_id}\t{t.task_id}\t"
            for row in t.samples.tolist():
                meas = "\t".join(_fmt(v) for v in row[:-2])
                fh.write(f"{prefix}{meas}\t{int(row[-2])}\t{int(row[-1])}\n")

    def _labels(fh):
        fh.write("\t".join(LABELS_HEADER) + "\n")
        for t in dataset.tasks:
            report = "" if t.report_time_ms is None else repr(float(t.report_time_ms))
            fh.write(f"{t.task_id}\t{t.label.text}\t{report}\n")

    _atomic(paths["samples"], _samples)
    _atomic(paths["labels"], _labels)
    _atomic(paths["meta"], lambda fh: fh.write(
        "".join(f"{k} = {_fmt_num(v)}\n" for k, v in dataset.meta.items())))
    return paths


def load_dataset_dir(directory: str | os.PathLike) -> Dataset:
    d = Path(directory)
    meta = d / "meta.txt"
    return parse_dataset(d / "samples.tsv", d / "labels.tsv", meta if meta.exists() else None)


# ---------------------------------------------------------------- trimming

def trim_pre_report(task: TaskRecord, trim_ms: float = 1000.0) -> TaskRecord:
    """Drop the final ``trim_ms`` before a confusion report.

    Not-confused tasks are returned unchanged.
    """
    if not task.confused:
        return task
    keep = task.timestamps <= task.report_time_ms - trim_ms
    if not keep.any():
        raise EmptyAfterTrim(f"task {task.task_id}: no samples at or before "
                             f"{task.report_time_ms - trim_ms} ms")
    return task.with_samples(task.samples[keep])


# ---------------------------------------------------------------- synthesis

SIGNAL_MODES = ("temporal_only", "spatial_only", "both", "split", "none")


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``signal_mode='split'`` plants, per confused task, either the temporal
    cue (pupil dynamics only, invisible in the scan path) or the spatial cue
    (confined to samples before the last 5 s, invisible to the sequence
    window), each with probability one half.
    """

    n_users: int = 136
    tasks_per_user: int = 40
    confused_fraction: float = 112 / 5440
    signal_mode: str = "both"
    signal_strength: float = 1.0
    mean_duration_s: float = 13.7
    sd_duration_s: float = 11.3
    min_duration_s: float = 1.0
    seed: int = 0
    screen_width: int = DEFAULT_SCREEN[0]
    screen_height: int = DEFAULT_SCREEN[1]
    sampling_rate_hz: float = DEFAULT_RATE_HZ

    def validate(self) -> None:
        if self.n_users < 1 or self.tasks_per_user < 1:
            raise InvalidConfig("n_users and tasks_per_user must be >= 1")
        if not 0.0 <= self.confused_fraction <= 1.0:
            raise InvalidConfig("confused_fraction must lie in [0, 1]")
        if self.signal_mode not in SIGNAL_MODES:
            raise InvalidConfig(f"signal_mode must be one of {SIGNAL_MODES}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise InvalidConfig("signal_strength must lie in [0, 1]")
        if self.mean_duration_s <= 0 or self.sd_duration_s < 0 or self.min_duration_s <= 0:
            raise InvalidConfig("durations must be positive")
        if self.screen_width < 16 or self.screen_height < 16 or self.sampling_rate_hz <= 0:
            raise InvalidConfig("bad screen geometry or sampling rate")


# Interface layout: a 4x3 grid of areas of interest in the central region,
# plus a help area in the top-right corner that only the spatial cue uses.
_AOI_GRID = [(0.2 + 0.2 * i, 0.22 + 0.28 * j) for j in range(3) for i in range(4)]
_HELP_AREA = (0.9, 0.08)
_BUTTON = (0.94, 0.03)
TEMPORAL_CUE_MS = 2000.0
WINDOW_MS = 5000.0


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Seeded synthetic dataset with a controllable confusion signal."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    label_seq, *user_seqs = root.spawn(cfg.n_users + 1)
    n_total = cfg.n_users * cfg.tasks_per_user
    n_conf = int(round(cfg.confused_fraction * n_total))
    label_rng = np.random.default_rng(label_seq)
    confused = np.zeros(n_total, dtype=bool)
    confused[label_rng.choice(n_total, size=n_conf, replace=False)] = True
    # per confused task: which cue the split mode plants
    temporal_pick = label_rng.random(n_total) < 0.5

    tasks = []
    for u in range(cfg.n_users):
        user_rng = np.random.default_rng(user_seqs[u])
        profile = _user_profile(user_rng, cfg)
        for k, task_seq in enumerate(user_seqs[u].spawn(cfg.tasks_per_user)):
            idx = u * cfg.tasks_per_user + k
            rng = np.random.default_rng(task_seq)
            cues = _cues_for(cfg, bool(confused[idx]), bool(temporal_pick[idx]))
            samples, report = _synth_task(rng, cfg, profile, bool(confused[idx]), cues)
            label = Label.CONFUSED if confused[idx] else Label.NOT_CONFUSED
            tasks.append(TaskRecord(f"u{u:03d}", f"u{u:03d}t{k:02d}", samples, label, report))
    return Dataset(cfg.screen_width, cfg.screen_height, cfg.sampling_rate_hz, tuple(tasks))


@dataclass(frozen=True)
class _Cues:
    temporal: bool = False
    revisits: bool = False
    spatial: bool = False
    spatial_before_window: bool = False


def _cues_for(cfg: SynthConfig, confused: bool, temporal_pick: bool) -> _Cues:
    if not confused or cfg.signal_mode == "none" or cfg.signal_strength == 0:
        return _Cues()
    mode = cfg.signal_mode
    if mode == "split":
        if temporal_pick:
            return _Cues(temporal=True)
        return _Cues(spatial=True, spatial_before_window=True)
    return _Cues(temporal=mode in ("temporal_only", "both"),
                 revisits=mode in ("temporal_only", "both"),
                 spatial=mode in ("spatial_only", "both"))


def _user_profile(rng: np.random.Generator, cfg: SynthConfig) -> dict[str, float]:
    return {
        "pupil": rng.normal(3.4, 0.3),
        "pupil_lr": rng.normal(0.0, 0.05),
        "dist": rng.normal(620.0, 35.0),
        "dist_lr": rng.normal(0.0, 8.0),
        "offset_x": rng.normal(0.0, 6.0),
        "offset_y": rng.normal(0.0, 6.0),
        "fix_ms": rng.uniform(200.0, 300.0),
    }


def _segment_duration_ms(rng: np.random.Generator, cfg: SynthConfig) -> float:
    m, s = cfg.mean_duration_s, cfg.sd_duration_s
    if s > 0:
        shape = (m / s) ** 2
        d = rng.gamma(shape, m / shape)
    else:
        d = m
    return 1000.0 * max(cfg.min_duration_s, d)


def _smooth_noise(rng: np.random.Generator, n: int, scale: float, span: int) -> np.ndarray:
    """Low-frequency noise: a random walk on a coarse grid, linearly interpolated."""
    knots = max(2, n // span + 2)
    walk = np.cumsum(rng.normal(0.0, scale, size=knots))
    walk -= walk.mean()
    return np.interp(np.linspace(0, knots - 1, n), np.arange(knots), walk)


def _synth_task(rng: np.random.Generator, cfg: SynthConfig, prof: dict[str, float],
                confused: bool, cues: _Cues):
    W, H = cfg.screen_width, cfg.screen_height
    step = 1000.0 / cfg.sampling_rate_hz
    seg_ms = _segment_duration_ms(rng, cfg)
    # a confused segment runs on to the report; its final second is trimmed downstream
    total_ms = seg_ms + (1000.0 if confused else 0.0)
    n = int(math.floor(total_ms / step)) + 1
    t = np.arange(n) * step
    seg_end = seg_ms

    # fixation schedule covering the whole recording
    starts, targets = [], []
    clock = 0.0
    aoi = int(rng.integers(len(_AOI_GRID)))
    rapid_from = seg_end - TEMPORAL_CUE_MS * cfg.signal_strength
    spatial_until = seg_end - WINDOW_MS - 500.0 if cues.spatial_before_window else seg_end
    help_p = 0.35 * cfg.signal_strength
    rapid_pair = None
    while clock < total_ms:
        starts.append(clock)
        if confused and clock >= seg_end:
            # glance at the "I am confused" button before clicking it
            targets.append((_BUTTON[0] * W, _BUTTON[1] * H))
            clock += 1000.0
            continue
        if cues.revisits and clock >= rapid_from:
            if rapid_pair is None:
                rapid_pair = (aoi, (aoi + 1 + int(rng.integers(len(_AOI_GRID) - 1))) % len(_AOI_GRID))
            aoi = rapid_pair[1] if aoi == rapid_pair[0] else rapid_pair[0]
            cx, cy = _AOI_GRID[aoi]
            targets.append((cx * W + rng.normal(0, 12), cy * H + rng.normal(0, 12)))
            clock += rng.uniform(90.0, 130.0)
            continue
        if cues.spatial and clock < spatial_until and rng.random() < help_p:
            cx, cy = _HELP_AREA
            targets.append((cx * W + rng.normal(0, 15), cy * H + rng.normal(0, 15)))
        else:
            nxt = int(rng.integers(len(_AOI_GRID) - 1))
            aoi = nxt if nxt < aoi else nxt + 1
            cx, cy = _AOI_GRID[aoi]
            targets.append((cx * W + rng.normal(0, 25), cy * H + rng.normal(0, 25)))
        clock += max(80.0, rng.gamma(6.0, prof["fix_ms"] / 6.0))
    starts = np.asarray(starts)
    targets = np.asarray(targets)

    which = np.searchsorted(starts, t, side="right") - 1
    prev = np.maximum(which - 1, 0)
    # ~35 ms saccade from the previous target
    blend = np.clip((t - starts[which]) / 35.0, 0.0, 1.0)
    blend[which == 0] = 1.0
    gx = targets[prev, 0] + blend * (targets[which, 0] - targets[prev, 0])
    gy = targets[prev, 1] + blend * (targets[which, 1] - targets[prev, 1])
    gx = gx + prof["offset_x"] + _smooth_noise(rng, n, 1.5, 60) + rng.normal(0, 3.0, n)
    gy = gy + prof["offset_y"] + _smooth_noise(rng, n, 1.5, 60) + rng.normal(0, 3.0, n)

    pupil = prof["pupil"] + _smooth_noise(rng, n, 0.03, 120) + rng.normal(0, 0.02, n)
    dist = prof["dist"] + _smooth_noise(rng, n, 1.5, 120) + rng.normal(0, 0.5, n)
    if cues.temporal:
        ramp = np.clip((t - (seg_end - TEMPORAL_CUE_MS)) / TEMPORAL_CUE_MS, 0.0, 1.0)
        ramp[t > seg_end] = 1.0
        pupil = pupil + 0.8 * cfg.signal_strength * ramp

    eps = 1e-2
    lx = np.clip(gx + rng.normal(0, 2.0, n), 0.0, W - eps)
    ly = np.clip(gy + rng.normal(0, 2.0, n), 0.0, H - eps)
    rx = np.clip(gx + rng.normal(0, 2.0, n), 0.0, W - eps)
    ry = np.clip(gy + rng.normal(0, 2.0, n), 0.0, H - eps)
    lp = pupil + prof["pupil_lr"] / 2
    rp = pupil - prof["pupil_lr"] / 2
    ld = dist + prof["dist_lr"] / 2
    rd = dist - prof["dist_lr"] / 2

    lvalid = np.ones(n, dtype=bool)
    rvalid = np.ones(n, dtype=bool)
    for _ in range(rng.poisson(0.25 * total_ms / 1000.0)):
        b0 = rng.uniform(0, total_ms)
        blink = (t >= b0) & (t < b0 + rng.uniform(80.0, 150.0))
        lvalid &= ~blink
        rvalid &= ~blink
    lvalid &= rng.random(n) >= 0.01
    rvalid &= rng.random(n) >= 0.01

    out = np.empty((n, len(SAMPLE_COLUMNS)))
    out[:, COL["timestamp_ms"]] = np.round(t, 3)
    out[:, COL["left_x"]] = np.round(lx, 2)
    out[:, COL["left_y"]] = np.round(ly, 2)
    out[:, COL["right_x"]] = np.round(rx, 2)
    out[:, COL["right_y"]] = np.round(ry, 2)
    out[:, COL["left_pupil"]] = np.round(lp, 3)
    out[:, COL["right_pupil"]] = np.round(rp, 3)
    out[:, COL["left_dist"]] = np.round(ld, 2)
    out[:, COL["right_dist"]] = np.round(rd, 2)
    out[:, COL["left_valid"]] = lvalid
    out[:, COL["right_valid"]] = rvalid
    for eye, valid in (("left", lvalid), ("right", rvalid)):
        for m in ("x", "y", "pupil", "dist"):
            out[~valid, COL[f"{eye}_{m}"]] = np.nan
    # rounding can push a coordinate onto the screen edge
    for c, lim in (("left_x", W), ("right_x", W), ("left_y", H), ("right_y", H)):
        col = out[:, COL[c]]
        col[col >= lim] = lim - eps
    report = round(seg_end + 1000.0, 3) if confused else None
    return out, report
