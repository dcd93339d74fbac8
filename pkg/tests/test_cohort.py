import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from convkr import cohort as ch
from convkr.errors import ConfigurationError, ParseError, ValidationError, WindowError


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def small_cohort():
    cfg = ch.SynthConfig(n_patients=60, seed=3)
    return cfg, *ch.synth_generate(cfg)


# ---------------------------------------------------------------- ingestion

def test_ingest_averages_duplicates(tmp_path):
    obs = write(tmp_path / "o.csv", "person_id,lab_code,month,value\np1,GLU,5,4\np1,GLU,5,6\np1,GLU,2,1.5\n")
    dx = write(tmp_path / "d.csv", "person_id,disease_code,month\n")
    [p] = ch.ingest(obs, dx)
    assert p.labs == {"GLU": [(2, 1.5), (5, 5.0)]}
    assert p.diagnoses == {}


def test_ingest_errors_carry_line_numbers(tmp_path):
    dx = write(tmp_path / "d.csv", "person_id,disease_code,month\n")
    bad = write(tmp_path / "o.csv", "person_id,lab_code,month,value\np1,GLU,5,4\np1,GLU,x,6\n")
    with pytest.raises(ParseError, match="line 3"):
        ch.ingest(bad, dx)
    neg = write(tmp_path / "n.csv", "person_id,lab_code,month,value\np1,GLU,-1,4\n")
    with pytest.raises(ValidationError, match="negative month"):
        ch.ingest(neg, dx)
    short = write(tmp_path / "s.csv", "person_id,lab_code,month,value\np1,GLU,1\n")
    with pytest.raises(ParseError, match="line 2"):
        ch.ingest(short, dx)


def test_ingest_sorts_and_dedups_diagnoses(tmp_path):
    obs = write(tmp_path / "o.csv", "person_id,lab_code,month,value\nb,GLU,1,1\na,GLU,1,2\n")
    dx = write(tmp_path / "d.csv", "person_id,disease_code,month\nb,X,9\nb,X,3\nb,X,9\n")
    pats = ch.ingest(obs, dx)
    assert [p.person_id for p in pats] == ["a", "b"]
    assert pats[1].diagnoses == {"X": [3, 9]}


def test_round_trip(tmp_path, small_cohort):
    _, pats, _ = small_cohort
    ch.write_observations(pats, tmp_path / "o.csv")
    ch.write_diagnoses(pats, tmp_path / "d.csv")
    back = ch.ingest(tmp_path / "o.csv", tmp_path / "d.csv")
    assert [(p.person_id, p.labs, p.diagnoses) for p in back] == \
        [(p.person_id, p.labs, p.diagnoses) for p in pats if p.labs or p.diagnoses]


# ---------------------------------------------------------------- normalization

def test_normalization_example():
    p = ch.PatientRecord("p", {"A": [(0, 1.0), (1, 2.0), (2, 3.0)]})
    stats = ch.fit_normalization([p])
    assert stats.mean["A"] == 2.0 and stats.std["A"] == 1.0
    [q] = ch.apply_normalization([p], stats)
    assert [v for _, v in q.labs["A"]] == [-1.0, 0.0, 1.0]
    with pytest.raises(ValidationError, match="already normalized"):
        ch.apply_normalization([q], stats)


def test_zero_variance_lab_rejected():
    p = ch.PatientRecord("p", {"FLAT": [(0, 5.0), (1, 5.0)]})
    with pytest.raises(ValidationError, match="FLAT"):
        ch.fit_normalization([p])


def test_normalization_moments(small_cohort, tmp_path):
    _, pats, _ = small_cohort
    stats = ch.fit_normalization(pats)
    normed = ch.apply_normalization(pats, stats)
    for lab in stats.mean:
        vals = np.array([v for p in normed for _, v in p.labs.get(lab, ())])
        assert abs(vals.mean()) < 1e-9
        assert abs(vals.std(ddof=1) - 1) < 1e-9
    stats.save(tmp_path / "s.csv")
    again = ch.NormalizationStats.load(tmp_path / "s.csv")
    assert again == stats


# ---------------------------------------------------------------- windows

def test_build_window_examples():
    t = 40
    p = ch.PatientRecord("p", {"A": [(t - 1, 2.0), (t, 9.0)], "B": [(t - 36, 1.0), (t - 37, 4.0)]})
    g = ch.build_window(p, t, ["A", "B"])
    assert g.values.shape == (2, 36) and g.start_month == t - 36
    assert g.mask[0].sum() == 1 and g.mask[0, -1] == 1 and g.values[0, -1] == 2.0
    assert g.mask[1].sum() == 1 and g.mask[1, 0] == 1
    with pytest.raises(WindowError):
        ch.build_window(p, 35, ["A"])


def test_build_window_mask_counts(small_cohort):
    cfg, pats, _ = small_cohort
    for p in pats[:10]:
        for t in (36, 50, 80):
            g = ch.build_window(p, t, cfg.lab_codes)
            for d, lab in enumerate(cfg.lab_codes):
                expect = sum(1 for m, _ in p.labs.get(lab, ()) if t - 36 <= m < t)
                assert g.mask[d].sum() == expect
            assert np.all(g.values[g.mask == 0] == 0)


# ---------------------------------------------------------------- labels

def rec(months):
    return ch.PatientRecord("p", {}, {"X": sorted(months)})


@pytest.mark.parametrize("offsets, expected", [
    ([4, 7], ch.Label.POSITIVE),
    ([1, 10, 12], ch.Label.EXCLUDED),
    ([5], ch.Label.NEGATIVE),
])
def test_label_examples(offsets, expected):
    t = 50
    assert ch.label_window(rec([t + o for o in offsets]), t, "X") is expected


def test_label_monotonicity():
    rng = np.random.default_rng(0)
    t = 40
    for _ in range(500):
        base = set(rng.integers(t - 10, t + 40, size=rng.integers(0, 5)).tolist())
        before = ch.label_window(rec(base), t, "X")
        more = base | {int(rng.integers(t - 10, t + 40))}
        after = ch.label_window(rec(more), t, "X")
        if before is ch.Label.POSITIVE:
            assert after is not ch.Label.NEGATIVE
        early = base | {int(rng.integers(0, t + 3))}
        assert ch.label_window(rec(early), t, "X") is ch.Label.EXCLUDED


# ---------------------------------------------------------------- samples

def test_emit_samples_anchor_ranges():
    p63 = ch.PatientRecord("a", {"A": [(62, 1.0)]})
    assert [s.t for s in ch.emit_samples([p63], ["A"], ["X"])] == [36]
    p99 = ch.PatientRecord("b", {"A": [(98, 1.0)]})
    assert [s.t for s in ch.emit_samples([p99], ["A"], ["X"], stride=12)] == [36, 48, 60, 72]
    with pytest.raises(ConfigurationError):
        ch.emit_samples([p99], ["A"], ["X"], stride=0)


def test_emit_samples_invariants(small_cohort):
    cfg, pats, _ = small_cohort
    samples = ch.emit_samples(pats, cfg.lab_codes, cfg.disease_codes, stride=3)
    assert samples
    by_id = {p.person_id: p for p in pats}
    for s in samples:
        pairs = set(zip(s.labels.tolist(), s.eligible.tolist()))
        assert pairs <= {(0, 0), (0, 1), (1, 1)}
        assert s.grid.start_month + s.grid.T == s.t
        p = by_id[s.person_id]
        for d, lab in enumerate(cfg.lab_codes):
            in_window = [m for m, _ in p.labs.get(lab, ()) if s.t - 36 <= m < s.t]
            assert s.grid.mask[d].sum() == len(in_window)
    keys = [(s.person_id, s.t) for s in samples]
    assert keys == sorted(keys)


# ---------------------------------------------------------------- split

def test_split_examples(small_cohort):
    pats = [ch.PatientRecord(f"p{i:03d}") for i in range(100)]
    parts = ch.split_population(pats, (0.5, 0.25, 0.25), seed=1)
    assert [len(parts[k]) for k in ("train", "validation", "test")] == [50, 25, 25]
    again = ch.split_population(list(reversed(pats)), (0.5, 0.25, 0.25), seed=1)
    assert all([p.person_id for p in parts[k]] == [p.person_id for p in again[k]] for k in parts)
    with pytest.raises(ConfigurationError):
        ch.split_population(pats, (0.5, 0.5, 0.5))


@given(st.integers(0, 200), st.integers(0, 2**32))
@settings(max_examples=30, deadline=None)
def test_split_is_partition(n, seed):
    pats = [ch.PatientRecord(f"p{i}") for i in range(n)]
    parts = ch.split_population(pats, seed=seed)
    ids = [p.person_id for k in parts for p in parts[k]]
    assert sorted(ids) == sorted(p.person_id for p in pats)
    assert len(set(ids)) == len(ids)


# ---------------------------------------------------------------- synthetic generator

def test_synth_is_bit_reproducible():
    cfg = ch.SynthConfig(n_patients=20, seed=11)
    a, ta = ch.synth_generate(cfg)
    b, tb = ch.synth_generate(cfg)
    assert [(p.labs, p.diagnoses) for p in a] == [(p.labs, p.diagnoses) for p in b]
    np.testing.assert_array_equal(ta.latents, tb.latents)


def test_synth_noise_free_identical_labs():
    cfg = ch.SynthConfig(n_patients=10, latent_dim=1, mixing=np.ones((6, 1)), noise_std=0.0,
                         baseline_std=0.0, base_rate=0.5)
    pats, _ = ch.synth_generate(cfg)
    for p in pats:
        by_month = {}
        for lab, obs in p.labs.items():
            for m, v in obs:
                by_month.setdefault(m, []).append(v)
        for vals in by_month.values():
            assert max(vals) == min(vals)


def test_synth_infinite_threshold_no_positives():
    cfg = ch.SynthConfig(n_patients=40, n_diseases=2, thresholds=(float("inf"), 1.5))
    pats, truth = ch.synth_generate(cfg)
    samples = ch.stack_samples(ch.emit_samples(pats, cfg.lab_codes, cfg.disease_codes))
    assert samples.labels[:, 0].sum() == 0
    assert np.all(truth.trigger[:, 0] == -1)
    assert samples.labels[:, 1].sum() > 0


def test_synth_rejects_small_gap():
    with pytest.raises(ConfigurationError):
        ch.SynthConfig(gap_range=(3, 10))


def test_uncoupled_utilization_is_independent_of_labels():
    cfg = ch.SynthConfig(n_patients=2000, utilization_coupling=0.0, seed=5)
    pats, truth = ch.synth_generate(cfg)
    counts = np.array([sum(len(o) for o in p.labs.values()) for p in pats])
    ever = (truth.trigger >= 0).any(axis=1)
    bins = np.digitize(counts, np.quantile(counts, [1 / 3, 2 / 3]))
    table = np.array([[np.sum((bins == b) & (ever == e)) for b in range(3)] for e in (False, True)])
    assert chi2_contingency(table).pvalue > 0.01


def test_coupled_utilization_tracks_labels():
    cfg = ch.SynthConfig(n_patients=2000, utilization_coupling=3.0, seed=5)
    pats, truth = ch.synth_generate(cfg)
    counts = np.array([sum(len(o) for o in p.labs.values()) for p in pats])
    ever = (truth.trigger >= 0).any(axis=1)
    assert counts[ever].mean() > counts[~ever].mean()
