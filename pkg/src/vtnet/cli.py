"""Command-line entry point: ``vtnet <verb> [options]``.

Numeric settings may come from a plain ``key = value`` file given with
``--config``; an explicit flag wins over the file, the file wins over the
built-in default.  ``VTNET_SEED`` supplies the seed when neither sets it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from . import evaluation as ev
from .data import SIGNAL_MODES, Dataset, SynthConfig, load_dataset_dir, synth_generate, \
    trim_pre_report, write_dataset
from .errors import InvalidConfig, VtnetError
from .gradcheck import DEFAULT_SEEDS, TOLERANCE, run_suite
from .model import VARIANTS, VtnetConfig, fit, init_model, save_checkpoint
from .preprocess import PreprocessConfig, build_items, compute_stats, grid_shape, \
    rasterize_scanpath, write_items, write_pgm

log = logging.getLogger(__name__)

DISPLAY_NAMES = {"gru_only": "GRU", "cnn_only": "CNN", "vtnet": "VTNet"}
TABLE_COLUMNS = ("Sens.", "Spec.", "Combined", "AUC", "σ Sens.", "σ Spec.", "σ Comb.", "σ AUC")
_TABLE_KEYS = ("sensitivity", "specificity", "combined", "auc",
               "sensitivity_sd", "specificity_sd", "combined_sd", "auc_sd")

# config-file keys understood per dataclass; flags use the same names with dashes
_MODEL_KEYS = ("hidden_size", "head_hidden", "max_epochs", "lr0", "batch_size", "patience",
               "dtype")
_PRE_KEYS = ("trim_ms", "window_s", "seq_len", "downsize")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def atomic_write(path: str | os.PathLike, data: str | bytes) -> None:
    """Write ``data`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class Settings:
    """Resolve a setting by precedence: flag, then config file, then default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = read_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, default, kind=None):
        kind = kind or type(default)
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file:
            try:
                return kind(self.file[key])
            except ValueError as exc:
                raise InvalidConfig(f"config key {key}: {exc}") from None
        return default

    def seed(self) -> int:
        env = os.environ.get("VTNET_SEED")
        try:
            fallback = int(env) if env not in (None, "") else 0
        except ValueError:
            raise InvalidConfig(f"VTNET_SEED must be an integer, got {env!r}") from None
        return self.get("seed", fallback, int)

    def preprocess(self) -> PreprocessConfig:
        base = PreprocessConfig()
        return replace(base, **{k: self.get(k, getattr(base, k)) for k in _PRE_KEYS})

    def model(self, **kw) -> VtnetConfig:
        base = VtnetConfig()
        return replace(base, **{k: self.get(k, getattr(base, k)) for k in _MODEL_KEYS}, **kw)


def _variants(values: list[str] | None) -> list[str]:
    if not values:
        return list(VARIANTS)
    out = []
    for v in values:
        for name in v.split(","):
            name = name.strip()
            if name not in VARIANTS:
                raise UsageError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
            if name not in out:
                out.append(name)
    return out


def _round2(x) -> str:
    if x is None or (isinstance(x, float) and x != x):
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def emit_report(report: ev.EvalReport, fmt: str = "table") -> str:
    """Render ``report`` as canonical JSON or as a variant-by-metric table."""
    if fmt == "json":
        return report.to_json()
    if fmt != "table":
        raise InvalidConfig(f"unknown report format {fmt!r}")
    agg = report.aggregate()
    rows = [("Model",) + TABLE_COLUMNS]
    for v in report.variants:
        block = agg[v]
        rows.append((DISPLAY_NAMES.get(v, v),) + tuple(_round2(block[k]) for k in _TABLE_KEYS))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [" ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- verbs

def cmd_synth(args, st: Settings) -> int:
    base = SynthConfig()
    cfg = SynthConfig(
        n_users=st.get("users", base.n_users),
        tasks_per_user=st.get("tasks_per_user", base.tasks_per_user),
        confused_fraction=st.get("confused_fraction", base.confused_fraction),
        signal_mode=st.get("signal_mode", base.signal_mode),
        signal_strength=st.get("signal_strength", base.signal_strength),
        mean_duration_s=st.get("mean_duration_s", base.mean_duration_s),
        sd_duration_s=st.get("sd_duration_s", base.sd_duration_s),
        min_duration_s=st.get("min_duration_s", base.min_duration_s),
        seed=st.seed(),
        screen_width=st.get("screen_width", base.screen_width),
        screen_height=st.get("screen_height", base.screen_height),
    )
    ds = synth_generate(cfg)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds.tasks)} tasks ({ds.n_confused()} confused) from "
          f"{len(ds.users)} users to {args.out}")
    return 0


def cmd_preprocess(args, st: Settings) -> int:
    ds = load_dataset_dir(args.data)
    drops: dict[str, str] = {}
    items = build_items(ds, st.preprocess(), drops)
    write_items(items, args.out)
    if drops:
        atomic_write(Path(args.out) / "dropped.tsv",
                     "task_id\treason\n" + "".join(f"{k}\t{v}\n" for k, v in sorted(drops.items())))
    print(f"wrote {len(items)} items to {args.out} ({len(drops)} tasks dropped)")
    return 0


def cmd_render(args, st: Settings) -> int:
    ds = load_dataset_dir(args.data)
    pre = st.preprocess()
    wanted = set(args.task or [])
    tasks = [t for t in ds.tasks if not wanted or t.task_id in wanted]
    missing = wanted - {t.task_id for t in tasks}
    if missing:
        raise InvalidConfig(f"unknown task id(s): {', '.join(sorted(missing))}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        trimmed = trim_pre_report(t, pre.trim_ms)
        image = rasterize_scanpath(trimmed, ds.screen_width, ds.screen_height, pre.downsize,
                                   pre.dot_intensity, pre.line_intensity)
        write_pgm(image, out / f"{t.task_id}.pgm")
    print(f"rendered {len(tasks)} scan path(s) to {out}")
    return 0


def _cv_config(st: Settings, ds: Dataset) -> ev.CvConfig:
    pre = st.preprocess()
    h, w = grid_shape(ds.screen_width, ds.screen_height, pre.downsize)
    base = ev.CvConfig()
    return ev.CvConfig(
        n_runs=st.get("runs", base.n_runs), n_folds=st.get("folds", base.n_folds),
        val_frac=st.get("val_frac", base.val_frac),
        smote_percent=st.get("smote_percent", base.smote_percent),
        k_neighbors=st.get("k_neighbors", base.k_neighbors),
        preprocess=pre, model=st.model(image_height=h, image_width=w),
        jobs=st.get("jobs", base.jobs))


def cmd_train(args, st: Settings) -> int:
    ds = load_dataset_dir(args.data)
    cfg = _cv_config(st, ds)
    seed = st.seed()
    variant = _variants([args.variant])[0]
    items = build_items(ds, cfg.preprocess)
    counts = ev.user_counts(items)
    fit_users, val_users = ev.split_validation(sorted(counts), counts, cfg.val_frac, seed)
    fit_set, val_set = set(fit_users), set(val_users)
    stats = compute_stats([it.sequence for it in items if it.user_id in fit_set],
                          ds.screen_width, ds.screen_height)
    fit_items = ev.normalize_items([it for it in items if it.user_id in fit_set], stats)
    val_items = ev.normalize_items([it for it in items if it.user_id in val_set], stats)
    train = ev.balance_training(fit_items, variant, cfg, seed)
    mcfg = replace(cfg.model, variant=variant, seed=seed)
    model = fit(init_model(mcfg), train, val_items)
    save_checkpoint(model, args.out)
    atomic_write(str(args.out) + ".log.tsv", model.training_log())
    atomic_write(str(args.out) + ".stats.json",
                 json.dumps(stats.to_dict(), sort_keys=True, indent=2) + "\n")
    print(f"trained {variant} for {len(model.history)} epochs (best {model.best_epoch}); "
          f"checkpoint {args.out}")
    return 0


def cmd_cv(args, st: Settings) -> int:
    variants = _variants(args.variant)
    ds = load_dataset_dir(args.data)
    cfg = _cv_config(st, ds)
    report = ev.run_cv(ds, variants, cfg, st.seed())
    atomic_write(args.out, report.to_json())
    if args.table:
        atomic_write(args.table, emit_report(report, "table"))
    sys.stdout.write(emit_report(report, "table"))
    return 0


def cmd_gradcheck(args, st: Settings) -> int:
    n = args.seeds if args.seeds is not None else len(DEFAULT_SEEDS)
    worst = run_suite(range(n))
    failed = False
    for name, err in worst.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name:<24} {err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"max relative error {max(worst.values()):.3e} over {n} seeds (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def cmd_report(args, st: Settings) -> int:
    report = ev.EvalReport.from_json(Path(args.input).read_text())
    text = emit_report(report, args.format)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model / preprocessing overrides")
    g.add_argument("--hidden-size", dest="hidden_size", type=int)
    g.add_argument("--head-hidden", dest="head_hidden", type=int)
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--lr0", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--dtype", choices=("float32", "float64"))
    g.add_argument("--val-frac", dest="val_frac", type=float)
    g.add_argument("--smote-percent", dest="smote_percent", type=float)
    g.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    _add_pre_flags(p)


def _add_pre_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trim-ms", dest="trim_ms", type=float)
    p.add_argument("--window-s", dest="window_s", type=float)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    p.add_argument("--downsize", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtnet", description="Confusion detection from raw "
                                     "eye-tracking data with a GRU + CNN fusion network.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", metavar="verb", required=True)

    def verb(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value settings file (flags override it)")
        return p

    p = verb("synth", "generate a synthetic eye-tracking dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--users", type=int)
    p.add_argument("--tasks-per-user", dest="tasks_per_user", type=int)
    p.add_argument("--confused-fraction", dest="confused_fraction", type=float)
    p.add_argument("--signal-mode", dest="signal_mode", choices=SIGNAL_MODES)
    p.add_argument("--signal-strength", dest="signal_strength", type=float)
    p.add_argument("--mean-duration-s", dest="mean_duration_s", type=float)
    p.add_argument("--sd-duration-s", dest="sd_duration_s", type=float)
    p.add_argument("--min-duration-s", dest="min_duration_s", type=float)
    p.add_argument("--screen-width", dest="screen_width", type=int)
    p.add_argument("--screen-height", dest="screen_height", type=int)
    p.set_defaults(func=cmd_synth)

    p = verb("preprocess", "turn a dataset into item sequences and scan-path images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_pre_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = verb("render", "rasterize scan paths to PGM images")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", action="append", help="task id (repeatable; default all)")
    _add_pre_flags(p)
    p.set_defaults(func=cmd_render)

    p = verb("train", "train one model with a user-grouped validation holdout")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--variant", default="vtnet", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = verb("cv", "run repeated user-grouped cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--table", help="also write the table view here")
    p.add_argument("--variant", action="append",
                   help="variant or comma list (repeatable; default all three)")
    p.add_argument("--runs", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_cv)

    p = verb("gradcheck", "finite-difference check of every layer and the full loss")
    p.add_argument("--seeds", type=int, help=f"number of seeds (default {len(DEFAULT_SEEDS)})")
    p.set_defaults(func=cmd_gradcheck)

    p = verb("report", "render a saved report")
    p.add_argument("--in", dest="input", required=True, help="report JSON")
    p.add_argument("--format", choices=("json", "table"), default="table")
    p.add_argument("--out", help="output file (default stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, Settings(args))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vtnet: error: {exc}", file=sys.stderr)
        return 2
    except (VtnetError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"vtnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
