"""Repeated user-grouped stratified cross-validation of the three classifiers."""
from __future__ import annotations

import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, Label
from .errors import EmptyInput, InvalidConfig, OneClassOnly, TooFewUsers, VtnetError
from .model import VARIANTS, VtnetConfig, fit, init_model, predict
from .preprocess import (
    DataItem, FeatureSequence, FeatureStats, PreprocessConfig, build_items, compute_stats,
    downsample_majority, grid_shape, normalize_array, smote,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldPlan:
    run: int
    fold: int
    train_users: tuple[str, ...]  # fitting users, validation excluded
    val_users: tuple[str, ...]
    test_users: tuple[str, ...]


def user_counts(source) -> dict[str, tuple[int, int]]:
    """user -> (confused count, total count) from a ``Dataset`` (tasks) or items."""
    counts: dict[str, list[int]] = {}
    units = source.tasks if isinstance(source, Dataset) else source
    for u in units:
        c = counts.setdefault(u.user_id, [0, 0])
        c[0] += int(u.label == Label.CONFUSED)
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in counts.items()}


def assign_folds(counts: Mapping[str, tuple[int, int]], n_folds: int = 10,
                 seed=0) -> list[list[str]]:
    """Partition users into ``n_folds`` groups balancing confused and total counts.

    Users go in descending order of confused count (ties shuffled by
    ``seed``) to the fold that currently holds the fewest confused items,
    then the fewest items, then the fewest users.
    """
    users = sorted(counts)
    if len(users) < n_folds:
        raise TooFewUsers(f"{len(users)} users cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    users = [users[i] for i in rng.permutation(len(users))]
    users.sort(key=lambda u: -counts[u][0])
    groups: list[list[str]] = [[] for _ in range(n_folds)]
    load = [[0, 0, 0] for _ in range(n_folds)]
    for u in users:
        f = min(range(n_folds), key=lambda i: (load[i][0], load[i][1], load[i][2], i))
        groups[f].append(u)
        load[f][0] += counts[u][0]
        load[f][1] += counts[u][1]
        load[f][2] += 1
    return groups


def split_validation(train_users: Sequence[str], counts: Mapping[str, tuple[int, int]],
                     frac: float = 0.2, seed=0) -> tuple[list[str], list[str]]:
    """Hold out a random group of users carrying at least ``frac`` of the items.

    Users are shuffled and taken in order until the held-out items reach
    ``frac`` of the total. If none of them has confused items, the first
    remaining user who does joins the holdout, so thresholds can be chosen.
    """
    if not 0.0 < frac < 1.0:
        raise InvalidConfig("validation fraction must lie in (0, 1)")
    users = sorted(train_users)
    if len(users) < 2:
        raise TooFewUsers("need at least two users to hold out validation data")
    rng = np.random.default_rng(seed)
    users = [users[i] for i in rng.permutation(len(users))]
    total = sum(counts[u][1] for u in users)
    val, items = [], 0
    for u in users:
        if items >= frac * total:
            break
        val.append(u)
        items += counts[u][1]
    if not any(counts[u][0] for u in val):
        extra = [u for u in users[len(val):] if counts[u][0]]
        val += extra[:1]
    if len(val) == len(users):
        # keep at least one user for fitting, preferably one without confused items
        calm = [u for u in val if not counts[u][0]]
        val.remove(calm[-1] if calm else val[-1])
    held = set(val)
    return sorted(u for u in users if u not in held), sorted(val)


def make_folds(source, n_folds: int = 10, run_seed=0, run: int = 0,
               val_frac: float = 0.2) -> list[FoldPlan]:
    """Fold plans for one CV run over a ``Dataset``, items, or a counts mapping."""
    counts = source if isinstance(source, Mapping) else user_counts(source)
    groups = assign_folds(counts, n_folds, seed=run_seed)
    plans = []
    for f, test in enumerate(groups):
        rest = [u for g in groups[:f] + groups[f + 1:] for u in g]
        fit_users, val = split_validation(rest, counts, val_frac, seed=[run_seed, f])
        plans.append(FoldPlan(run, f, tuple(fit_users), tuple(val), tuple(sorted(test))))
    return plans


# ---------------------------------------------------------------- ROC

def _class_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    return s, y


def threshold_candidates(scores) -> np.ndarray:
    """0, 1 and the midpoints between adjacent distinct scores, ascending."""
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def select_threshold(scores, labels) -> float:
    """Candidate threshold whose ROC point lies closest to (0, 1).

    Ties go to the smaller threshold. Distances are compared exactly via
    integer arithmetic.
    """
    s, y = _class_arrays(scores, labels)
    pos, neg = np.sort(s[y == 1]), np.sort(s[y == 0])
    P, N = len(pos), len(neg)
    if P == 0 or N == 0:
        raise OneClassOnly("threshold selection needs both classes")
    cand = threshold_candidates(s)
    fn = np.searchsorted(pos, cand, side="left").astype(object)  # positives below t
    fp = (N - np.searchsorted(neg, cand, side="left")).astype(object)
    # FPR^2 + FNR^2 scaled by (P*N)^2
    dist = [int(a) * int(a) * P * P + int(b) * int(b) * N * N for a, b in zip(fp, fn)]
    return float(cand[int(np.argmin(dist))])


def auc_score(scores, labels) -> float:
    """P(score of a random confused item > that of a random other item), ties count half."""
    s, y = _class_arrays(scores, labels)
    P = int((y == 1).sum())
    N = len(y) - P
    if P == 0 or N == 0:
        raise OneClassOnly("AUC needs both classes")
    ranks = rankdata(s)  # midranks for ties
    return float((ranks[y == 1].sum() - P * (P + 1) / 2.0) / (P * N))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every candidate threshold, ordered by decreasing threshold."""
    s, y = _class_arrays(scores, labels)
    cand = threshold_candidates(s)[::-1]
    pos, neg = s[y == 1], s[y == 0]
    tpr = np.array([(pos >= t).mean() if len(pos) else np.nan for t in cand])
    fpr = np.array([(neg >= t).mean() if len(neg) else np.nan for t in cand])
    return fpr, tpr


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    sensitivity: float
    specificity: float
    combined: float
    auc: float | None
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int


def compute_metrics(scores, labels, threshold: float) -> Metrics:
    """Confusion counts at ``score >= threshold`` plus AUC (None for one class)."""
    s, y = _class_arrays(scores, labels)
    if s.size == 0:
        raise EmptyInput("no predictions to score")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    sens = tp / (tp + fn) if tp + fn else math.nan
    spec = tn / (tn + fp) if tn + fp else math.nan
    try:
        auc = auc_score(s, y)
    except OneClassOnly:
        auc = None
    return Metrics(sens, spec, (sens + spec) / 2, auc, float(threshold), tp, fp, tn, fn)


# ---------------------------------------------------------------- protocol

@dataclass(frozen=True)
class CvConfig:
    n_runs: int = 10
    n_folds: int = 10
    val_frac: float = 0.2
    smote_percent: float = 200.0
    k_neighbors: int = 5
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: VtnetConfig = field(default_factory=VtnetConfig)
    jobs: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["conv_filters"] = list(self.model.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CvConfig":
        d = dict(d)
        pre = PreprocessConfig(**d.pop("preprocess", {}))
        m = dict(d.pop("model", {}))
        if "conv_filters" in m:
            m["conv_filters"] = tuple(m["conv_filters"])
        return cls(preprocess=pre, model=VtnetConfig(**m), **d)


@dataclass
class FoldResult:
    run: int
    fold: int
    variant: str
    metrics: Metrics
    task_metrics: Metrics | None
    seed: int
    n_train: dict[str, int]
    n_val: int
    n_test: int
    n_synthetic_scored: int
    best_epoch: int | None
    epochs_run: int
    stats: dict
    fit_users: list[str]
    val_users: list[str]
    test_users: list[str]

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldResult":
        d = dict(d)
        d["metrics"] = Metrics(**d["metrics"])
        if d.get("task_metrics") is not None:
            d["task_metrics"] = Metrics(**d["task_metrics"])
        return cls(**d)


@dataclass
class EvalReport:
    config: dict
    base_seed: int
    variants: list[str]
    entries: list[FoldResult]
    dropped_tasks: dict[str, str] = field(default_factory=dict)

    def by_variant(self, variant: str) -> list[FoldResult]:
        return [e for e in self.entries if e.variant == variant]

    def aggregate(self) -> dict[str, dict]:
        """Per variant: means over all folds; sd of the per-run means."""
        out = {}
        for v in self.variants:
            rows = self.by_variant(v)
            block = {"n": len(rows)}
            for name in ("sensitivity", "specificity", "combined", "auc"):
                vals = np.array([_num(getattr(r.metrics, name)) for r in rows], dtype=float)
                runs = sorted({r.run for r in rows})
                per_run = np.array([_finite_mean([_num(getattr(r.metrics, name)) for r in rows
                                                  if r.run == k]) for k in runs])
                block[name] = _clean(_finite_mean(vals)) if np.isfinite(vals).any() else None
                block[f"{name}_sd"] = (_clean(float(np.nanstd(per_run, ddof=1)))
                                       if np.isfinite(per_run).sum() > 1 else None)
            out[v] = block
        return out

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "base_seed": self.base_seed,
            "variants": list(self.variants),
            "entries": [e.to_dict() for e in self.entries],
            "aggregate": self.aggregate(),
            "dropped_tasks": dict(self.dropped_tasks),
        }
        return json.dumps(_clean(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["config"], d["base_seed"], d["variants"],
                   [FoldResult.from_dict(e) for e in d["entries"]], d.get("dropped_tasks", {}))


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if v.size else float("nan")


def _num(v) -> float:
    return math.nan if v is None else float(v)


def _clean(obj):
    """JSON-safe copy: NaN/inf -> None, tuples -> lists, numpy scalars -> Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def job_seed(base_seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base_seed, *parts]).generate_state(1)[0])


def _retag(items: Sequence[DataItem], values: np.ndarray) -> list[DataItem]:
    return [replace(it, sequence=FeatureSequence(v, it.sequence.mask))
            for it, v in zip(items, values)]


def normalize_items(items: Sequence[DataItem], stats: FeatureStats) -> list[DataItem]:
    if not items:
        return []
    vals = np.stack([it.sequence.values for it in items])
    mask = np.stack([it.sequence.mask for it in items])
    return _retag(items, normalize_array(vals, mask, stats))


def balance_training(items: Sequence[DataItem], variant: str, cfg: CvConfig, seed: int):
    """Class-balanced training list for ``variant``.

    The GRU-only model gets SMOTE-augmented confused items and a majority
    class reduced to match; the image-consuming models only downsample.
    """
    confused = [it for it in items if it.label == Label.CONFUSED]
    synthetic: list[DataItem] = []
    if variant == "gru_only" and confused and cfg.smote_percent > 0:
        k = min(cfg.k_neighbors, len(confused) - 1)
        if k < cfg.k_neighbors:
            log.warning("only %d confused items; SMOTE uses k=%d", len(confused), k)
        if k >= 1:
            for s in smote([it.sequence for it in confused], cfg.smote_percent, k, seed):
                parent = confused[s.parent]
                synthetic.append(DataItem(s.sequence, None, Label.CONFUSED, parent.parent_task_id,
                                          parent.user_id, parent.split_index, synthetic=True))
    target = len(confused) + len(synthetic)
    balanced = downsample_majority(list(items), target, seed=seed + 1)
    return balanced + synthetic


def task_level_metrics(items: Sequence[DataItem], scores: np.ndarray,
                       threshold: float) -> Metrics:
    """Metrics after averaging item scores per parent task."""
    by_task: dict[str, list] = {}
    for it, s in zip(items, scores):
        by_task.setdefault(it.parent_task_id, [int(it.label), []])[1].append(s)
    labels = [v[0] for v in by_task.values()]
    means = [float(np.mean(v[1])) for v in by_task.values()]
    return compute_metrics(means, labels, threshold)


def run_fold(items: Sequence[DataItem], plan: FoldPlan, variants: Sequence[str], cfg: CvConfig,
             base_seed: int, screen: tuple[int, int]) -> list[FoldResult]:
    """Train and score every variant on one fold plan."""
    fit_set, val_set, test_set = set(plan.train_users), set(plan.val_users), set(plan.test_users)
    fit_raw = [it for it in items if it.user_id in fit_set]
    val_raw = [it for it in items if it.user_id in val_set]
    test_raw = [it for it in items if it.user_id in test_set]
    stats = compute_stats([it.sequence for it in fit_raw], *screen)
    fit_items = normalize_items(fit_raw, stats)
    val_items = normalize_items(val_raw, stats)
    test_items = normalize_items(test_raw, stats)

    results = []
    for v in variants:
        vi = VARIANTS.index(v)
        seed = job_seed(base_seed, plan.run, plan.fold, vi)
        try:
            train = balance_training(fit_items, v, cfg, seed)
            mcfg = replace(cfg.model, variant=v, seed=seed)
            model = fit(init_model(mcfg), train, val_items)
            val_pred = predict(model, val_items)
            try:
                thr = select_threshold([p.score for p in val_pred], [p.label for p in val_pred])
            except OneClassOnly:
                log.warning("run %d fold %d %s: one-class validation set, threshold 0.5",
                            plan.run, plan.fold, v)
                thr = 0.5
            test_pred = predict(model, test_items)
        except VtnetError as exc:
            raise type(exc)(f"run {plan.run} fold {plan.fold} variant {v}: {exc}") from exc
        scores = np.array([p.score for p in test_pred])
        labels = np.array([p.label for p in test_pred])
        metrics = compute_metrics(scores, labels, thr)
        results.append(FoldResult(
            run=plan.run, fold=plan.fold, variant=v, metrics=metrics,
            task_metrics=task_level_metrics(test_items, scores, thr), seed=seed,
            n_train={"confused": sum(it.label == Label.CONFUSED for it in train),
                     "not_confused": sum(it.label == Label.NOT_CONFUSED for it in train),
                     "synthetic": sum(it.synthetic for it in train)},
            n_val=len(val_items), n_test=len(test_items),
            n_synthetic_scored=sum(it.synthetic for it in val_items + test_items),
            best_epoch=model.best_epoch, epochs_run=len(model.history), stats=stats.to_dict(),
            fit_users=list(plan.train_users), val_users=list(plan.val_users),
            test_users=list(plan.test_users)))
        log.info("run %d fold %d %-8s sens %.3f spec %.3f comb %.3f (epochs %d)", plan.run,
                 plan.fold, v, metrics.sensitivity, metrics.specificity, metrics.combined,
                 len(model.history))
    return results


_WORKER_STATE: dict = {}


def _worker(plan: FoldPlan) -> list[FoldResult]:
    st = _WORKER_STATE
    return run_fold(st["items"], plan, st["variants"], st["cfg"], st["seed"], st["screen"])


def all_fold_plans(items: Sequence[DataItem], cfg: CvConfig, base_seed: int) -> list[FoldPlan]:
    counts = user_counts(items)
    plans = []
    for r in range(cfg.n_runs):
        plans.extend(make_folds(counts, cfg.n_folds, run_seed=base_seed + r, run=r,
                                val_frac=cfg.val_frac))
    return plans


def run_cv(dataset: Dataset, variants: Iterable[str] = VARIANTS, cfg: CvConfig | None = None,
           base_seed: int = 0) -> EvalReport:
    """``n_runs`` × ``n_folds`` user-grouped CV for each variant."""
    cfg = cfg or CvConfig()
    variants = list(variants)
    for v in variants:
        if v not in VARIANTS:
            raise InvalidConfig(f"unknown variant {v!r}")
    h, w = grid_shape(dataset.screen_width, dataset.screen_height, cfg.preprocess.downsize)
    cfg = replace(cfg, model=replace(cfg.model, image_height=h, image_width=w))
    drops: dict[str, str] = {}
    items = build_items(dataset, cfg.preprocess, drops)
    plans = all_fold_plans(items, cfg, base_seed)
    screen = (dataset.screen_width, dataset.screen_height)
    entries: list[FoldResult] = []
    if cfg.jobs > 1:
        _WORKER_STATE.update(items=items, variants=variants, cfg=cfg, seed=base_seed,
                             screen=screen)
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(cfg.jobs, mp_context=ctx) as pool:
            for res in pool.map(_worker, plans):
                entries.extend(res)
        _WORKER_STATE.clear()
    else:
        for plan in plans:
            entries.extend(run_fold(items, plan, variants, cfg, base_seed, screen))
    entries.sort(key=lambda e: (e.run, e.fold, VARIANTS.index(e.variant)))
    return EvalReport(cfg.to_dict(), base_seed, variants, entries, drops)
