import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtnet.data import (COL, SAMPLES_HEADER, Dataset, Label, RawSample, SynthConfig, TaskRecord,
                        load_dataset_dir, parse_dataset, read_meta, samples_array, synth_generate,
                        trim_pre_report, write_dataset)
from vtnet.errors import EmptyAfterTrim, InvalidConfig, MalformedRow, UnknownTask, UnlabeledTask


def row(t, x=100.0, y=200.0, valid=(1, 1)):
    # timestamp, lx, ly, rx, ry, lpupil, rpupil, ldist, rdist, lvalid, rvalid
    return [t, x, y, x + 2, y + 1, 3.1, 3.2, 600.0, 605.0, *valid]


def task(tid="t1", user="u1", n=5, label=Label.NOT_CONFUSED, report=None, step=10.0):
    return TaskRecord(user, tid, np.array([row(i * step) for i in range(n)]), label, report)


def write_tsv(path, header, rows):
    path.write_text("\t".join(header) + "\n" + "".join("\t".join(map(str, r)) + "\n" for r in rows))


def sample_rows(user, tid, n):
    out = []
    for i in range(n):
        r = row(i * 8.0)
        out.append([user, tid] + r[:-2] + [int(r[-2]), int(r[-1])])
    return out


# ---------------------------------------------------------------- types

def test_task_record_invariants():
    with pytest.raises(ValueError):
        TaskRecord("u", "t", np.array([row(10), row(5)]), Label.NOT_CONFUSED)
    with pytest.raises(ValueError):
        TaskRecord("u", "t", np.array([row(-1)]), Label.NOT_CONFUSED)
    with pytest.raises(ValueError):
        TaskRecord("u", "t", np.array([row(0)]), Label.CONFUSED)
    with pytest.raises(ValueError):
        TaskRecord("u", "t", np.array([row(0)]), Label.NOT_CONFUSED, 100.0)


def test_task_samples_are_read_only_copies():
    arr = np.array([row(0), row(8)])
    t = TaskRecord("u", "t", arr, Label.NOT_CONFUSED)
    arr[0, 1] = -5
    assert t.samples[0, 1] == 100.0
    with pytest.raises(ValueError):
        t.samples[0, 0] = 3


def test_raw_sample_round_trip():
    t = task(n=3)
    s = t.sample(1)
    assert isinstance(s, RawSample) and s.left_valid is True and s.timestamp_ms == 10.0
    np.testing.assert_array_equal(samples_array([t.sample(i) for i in range(3)]), t.samples)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(1280, 1024, 120, (task("a"), task("a")))
    with pytest.raises(ValueError):
        Dataset(1280, 1024, 120, (TaskRecord("u", "t", np.empty((0, 11)), Label.NOT_CONFUSED),))


def test_label_parse():
    assert Label.parse("confused") is Label.CONFUSED
    assert Label.parse(" not_confused ") is Label.NOT_CONFUSED
    assert Label.CONFUSED.text == "confused"
    with pytest.raises(ValueError):
        Label.parse("maybe")


# ---------------------------------------------------------------- parse / write

def test_parse_two_tasks(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    write_tsv(s, SAMPLES_HEADER, sample_rows("u1", "t1", 3) + sample_rows("u2", "t2", 3))
    write_tsv(l, ("task_id", "label", "report_time_ms"),
              [("t1", "not_confused", ""), ("t2", "confused", "5000")])
    ds = parse_dataset(s, l)
    assert [t.task_id for t in ds.tasks] == ["t1", "t2"]
    assert [len(t) for t in ds.tasks] == [3, 3]
    assert ds.tasks[1].report_time_ms == 5000.0 and ds.tasks[1].confused
    assert (ds.screen_width, ds.screen_height, ds.sampling_rate_hz) == (1280, 1024, 120.0)


def test_parse_sorts_and_keeps_duplicate_timestamps_stable(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    rows = [["u", "t"] + row(20.0, x=1)[:-2] + [1, 1],
            ["u", "t"] + row(10.0, x=2)[:-2] + [1, 1],
            ["u", "t"] + row(10.0, x=3)[:-2] + [1, 1]]
    write_tsv(s, SAMPLES_HEADER, rows)
    write_tsv(l, ("task_id", "label", "report_time_ms"), [("t", "not_confused", "")])
    t = parse_dataset(s, l).tasks[0]
    assert t.column("left_x").tolist() == [2.0, 3.0, 1.0]


def test_parse_empty_samples(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    s.write_text("")
    write_tsv(l, ("task_id", "label", "report_time_ms"), [])
    with pytest.raises(MalformedRow):
        parse_dataset(s, l)
    s.write_text("\t".join(SAMPLES_HEADER) + "\n")
    with pytest.raises(MalformedRow):
        parse_dataset(s, l)


def test_parse_unknown_task(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    write_tsv(s, SAMPLES_HEADER, sample_rows("u1", "t1", 2))
    write_tsv(l, ("task_id", "label", "report_time_ms"),
              [("t1", "not_confused", ""), ("t99", "confused", "5000")])
    with pytest.raises(UnknownTask):
        parse_dataset(s, l)


def test_parse_unlabeled_task(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    write_tsv(s, SAMPLES_HEADER, sample_rows("u1", "t1", 2) + sample_rows("u1", "t2", 2))
    write_tsv(l, ("task_id", "label", "report_time_ms"), [("t1", "not_confused", "")])
    with pytest.raises(UnlabeledTask):
        parse_dataset(s, l)


@pytest.mark.parametrize("bad, line", [
    (lambda r: r[:-1], 3),                        # column count
    (lambda r: r[:3] + ["abc"] + r[4:], 3),        # non-numeric
    (lambda r: r[:-1] + ["2"], 3),                 # bad flag
])
def test_parse_malformed_row_reports_line(tmp_path, bad, line):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    rows = [[str(v) for v in r] for r in sample_rows("u1", "t1", 3)]
    rows[1] = bad(rows[1])
    write_tsv(s, SAMPLES_HEADER, rows)
    write_tsv(l, ("task_id", "label", "report_time_ms"), [("t1", "not_confused", "")])
    with pytest.raises(MalformedRow) as info:
        parse_dataset(s, l)
    assert info.value.row == line and f"row {line}" in str(info.value)


def test_parse_label_protocol(tmp_path):
    s, l = tmp_path / "samples.tsv", tmp_path / "labels.tsv"
    write_tsv(s, SAMPLES_HEADER, sample_rows("u1", "t1", 2))
    write_tsv(l, ("task_id", "label", "report_time_ms"), [("t1", "confused", "")])
    with pytest.raises(MalformedRow):
        parse_dataset(s, l)
    write_tsv(l, ("task_id", "label", "report_time_ms"),
              [("t1", "not_confused", ""), ("t1", "not_confused", "")])
    with pytest.raises(MalformedRow):
        parse_dataset(s, l)


def test_meta_file(tmp_path):
    (tmp_path / "meta.txt").write_text("# geometry\nscreen_width = 800\nscreen_height 600\n"
                                       "sampling_rate_hz = 60\n")
    assert read_meta(tmp_path / "meta.txt") == {"screen_width": 800, "screen_height": 600,
                                                "sampling_rate_hz": 60}


def test_write_parse_round_trip_with_nan(tmp_path):
    arr = np.array([row(0.0), row(8.333), row(16.667, valid=(0, 1))])
    arr[2, [COL["left_x"], COL["left_y"], COL["left_pupil"], COL["left_dist"]]] = np.nan
    ds = Dataset(800, 600, 60.0, (
        TaskRecord("a", "a1", arr, Label.CONFUSED, 1234.5),
        TaskRecord("b", "b1", arr[:2], Label.NOT_CONFUSED),
    ))
    write_dataset(ds, tmp_path)
    assert not list(tmp_path.glob("*.tmp"))
    assert load_dataset_dir(tmp_path) == ds


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_synth_round_trip_property(tmp_path_factory, seed):
    ds = synth_generate(SynthConfig(n_users=2, tasks_per_user=2, confused_fraction=0.5,
                                    mean_duration_s=1.5, sd_duration_s=0.5, seed=seed,
                                    screen_width=320, screen_height=256))
    d = tmp_path_factory.mktemp("rt")
    write_dataset(ds, d)
    assert load_dataset_dir(d) == ds


# ---------------------------------------------------------------- trimming

def test_trim_last_second():
    samples = np.array([row(float(t)) for t in range(10000)])
    t = TaskRecord("u", "t", samples, Label.CONFUSED, 10000.0)
    out = trim_pre_report(t)
    assert out.timestamps[0] == 0 and out.timestamps[-1] == 9000 and len(out) == 9001
    assert out.label == t.label and out.task_id == t.task_id


def test_trim_passes_not_confused():
    t = task(n=50)
    assert trim_pre_report(t) is t


def test_trim_empty():
    t = TaskRecord("u", "t", np.array([row(600.0), row(700.0)]), Label.CONFUSED, 500.0)
    with pytest.raises(EmptyAfterTrim):
        trim_pre_report(t)


@given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=1, max_size=40),
       st.floats(100, 6000, allow_nan=False))
def test_trim_never_reorders(times, report):
    ts = sorted(times)
    t = TaskRecord("u", "t", np.array([row(v, x=i) for i, v in enumerate(ts)]),
                   Label.CONFUSED, report)
    try:
        out = trim_pre_report(t)
    except EmptyAfterTrim:
        assert min(ts) > report - 1000
        return
    kept = [v for v in ts if v <= report - 1000]
    assert out.timestamps.tolist() == kept
    assert np.array_equal(out.samples, t.samples[:len(kept)])


# ---------------------------------------------------------------- synthesis

def test_synth_invalid_configs():
    for bad in (dict(n_users=0), dict(confused_fraction=1.5), dict(signal_mode="loud"),
                dict(signal_strength=2.0), dict(mean_duration_s=0)):
        with pytest.raises(InvalidConfig):
            synth_generate(SynthConfig(**bad))


def test_synth_deterministic():
    cfg = SynthConfig(n_users=3, tasks_per_user=3, confused_fraction=0.3, seed=5,
                      screen_width=320, screen_height=256)
    assert synth_generate(cfg) == synth_generate(cfg)
    other = synth_generate(SynthConfig(n_users=3, tasks_per_user=3, confused_fraction=0.3,
                                       seed=6, screen_width=320, screen_height=256))
    assert other != synth_generate(cfg)


def test_synth_text_reproducible(tmp_path):
    cfg = SynthConfig(n_users=2, tasks_per_user=2, confused_fraction=0.5, seed=9,
                      screen_width=320, screen_height=256)
    write_dataset(synth_generate(cfg), tmp_path / "a")
    write_dataset(synth_generate(cfg), tmp_path / "b")
    for name in ("samples.tsv", "labels.tsv", "meta.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_paper_shaped_bookkeeping():
    cfg = SynthConfig(mean_duration_s=1.2, sd_duration_s=0.2, seed=0)
    ds = synth_generate(cfg)
    assert len(ds.tasks) == 5440 and len(ds.users) == 136
    assert ds.n_confused() == 112


def test_synth_sample_invariants_and_durations():
    cfg = SynthConfig(n_users=6, tasks_per_user=20, confused_fraction=0.2, seed=2,
                      screen_width=640, screen_height=512)
    ds = synth_generate(cfg)
    durations = []
    for t in ds.tasks:
        s = t.samples
        assert np.all(np.diff(t.timestamps) >= 0) and t.timestamps[0] >= 0
        for eye in ("left", "right"):
            valid = t.column(f"{eye}_valid") > 0
            x, y = t.column(f"{eye}_x")[valid], t.column(f"{eye}_y")[valid]
            assert np.all((x >= 0) & (x < 640) & (y >= 0) & (y < 512))
            assert np.all(np.isnan(s[~valid, COL[f"{eye}_pupil"]]))
        end = trim_pre_report(t).timestamps[-1] if t.confused else t.timestamps[-1]
        durations.append(end / 1000.0)
        if t.confused:
            assert t.report_time_ms >= t.timestamps[-1]
    # gamma draws with mean 13.7 s, sd 11.3 s; 120 draws leave a wide margin
    assert 9.0 < np.mean(durations) < 19.0
    assert 6.0 < np.std(durations) < 17.0
    assert ds.n_confused() == 24


def _both_eyes(s, metric):
    """Per-row mean of the two eyes, ignoring a missing eye; NaN when both are missing."""
    pair = s[:, [COL[f"left_{metric}"], COL[f"right_{metric}"]]]
    n = np.sum(~np.isnan(pair), axis=1)
    return np.where(n > 0, np.nansum(pair, axis=1) / np.maximum(n, 1), np.nan)


def _last2s(t):
    end = t.report_time_ms - 1000.0
    return t.samples[(t.timestamps > end - 2000.0) & (t.timestamps <= end)]


def _pupil_slope(s):
    p = _both_eyes(s, "pupil")
    ok = ~np.isnan(p)
    return np.polyfit(s[ok, 0], p[ok], 1)[0] * 1000.0  # mm per second


def test_synth_temporal_cue_is_order_dependent():
    cfg = SynthConfig(n_users=4, tasks_per_user=10, confused_fraction=0.5, seed=4,
                      signal_mode="temporal_only", mean_duration_s=8, sd_duration_s=1,
                      screen_width=640, screen_height=512)
    ds = synth_generate(cfg)
    conf = [t for t in ds.tasks if t.confused]
    slopes = [_pupil_slope(_last2s(t)) for t in conf]
    assert np.mean(slopes) > 0.2  # dilation ramp in the last 2 s
    rng = np.random.default_rng(0)
    shuffled = []
    for t in conf:
        s = _last2s(t).copy()
        s[:, 1:] = s[rng.permutation(len(s)), 1:]
        shuffled.append(_pupil_slope(s))
    assert abs(np.mean(shuffled)) < 0.5 * np.mean(slopes)


def _help_visits(t, cfg):
    """Fraction of samples within 40 px of the help area at (0.9 W, 0.08 H)."""
    x = _both_eyes(t.samples, "x")
    y = _both_eyes(t.samples, "y")
    return np.mean(np.hypot(x - 0.9 * cfg.screen_width, y - 0.08 * cfg.screen_height) < 40.0)


@pytest.mark.parametrize("mode, expect_cue", [("spatial_only", True), ("both", True),
                                              ("none", False), ("temporal_only", False)])
def test_synth_spatial_cue(mode, expect_cue):
    cfg = SynthConfig(n_users=4, tasks_per_user=10, confused_fraction=0.5, seed=4,
                      signal_mode=mode, mean_duration_s=8, sd_duration_s=1,
                      screen_width=640, screen_height=512)
    ds = synth_generate(cfg)
    conf = [_help_visits(trim_pre_report(t), cfg) for t in ds.tasks if t.confused]
    calm = [_help_visits(t, cfg) for t in ds.tasks if not t.confused]
    assert np.mean(calm) < 0.01
    if expect_cue:
        assert np.mean(conf) > 0.1
    else:
        assert np.mean(conf) < 0.01


def test_synth_signal_strength_scales_cue():
    def mean_visits(strength):
        cfg = SynthConfig(n_users=4, tasks_per_user=10, confused_fraction=0.5, seed=4,
                          signal_mode="spatial_only", signal_strength=strength,
                          mean_duration_s=8, sd_duration_s=1, screen_width=640, screen_height=512)
        return np.mean([_help_visits(trim_pre_report(t), cfg)
                        for t in synth_generate(cfg).tasks if t.confused])
    assert mean_visits(0.0) == 0.0
    assert mean_visits(0.3) < mean_visits(1.0)


def test_synth_split_mode_separates_cues():
    cfg = SynthConfig(n_users=6, tasks_per_user=10, confused_fraction=0.5, seed=3,
                      signal_mode="split", mean_duration_s=12, sd_duration_s=2,
                      min_duration_s=8, screen_width=640, screen_height=512)
    ds = synth_generate(cfg)
    spatial = 0
    for t in (t for t in ds.tasks if t.confused):
        tr = trim_pre_report(t)
        window = tr.samples[tr.timestamps > tr.timestamps[-1] - 5000]
        win_task = tr.with_samples(window)
        assert _help_visits(win_task, cfg) < 0.01  # at most a saccade passing through
        spatial += _help_visits(tr, cfg) > 0
    n_conf = ds.n_confused()
    assert 0.2 * n_conf < spatial < 0.8 * n_conf


def test_synth_none_mode_matches_class_distributions():
    cfg = SynthConfig(n_users=8, tasks_per_user=10, confused_fraction=0.5, seed=11,
                      signal_mode="none", screen_width=640, screen_height=512)
    ds = synth_generate(cfg)

    def summary(t):
        tr = trim_pre_report(t)
        return (np.nanmean(tr.column("left_pupil")), np.nanstd(tr.column("left_x")),
                tr.timestamps[-1])

    conf = np.array([summary(t) for t in ds.tasks if t.confused])
    calm = np.array([summary(t) for t in ds.tasks if not t.confused])
    from scipy.stats import ks_2samp
    for j in range(conf.shape[1]):
        assert ks_2samp(conf[:, j], calm[:, j]).pvalue > 0.01
    assert math.isclose(len(conf) / len(ds.tasks), 0.5)
