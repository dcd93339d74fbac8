"""Patient records, file ingestion, normalization, window/label construction
and a synthetic cohort generator with known ground truth."""

from __future__ import annotations

import csv
import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError, WindowError

WINDOW = 36
GAP = 3
HORIZON = 24
MIN_POSITIVE_RECORDS = 2


@dataclass
class PatientRecord:
    person_id: str
    labs: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    diagnoses: dict[str, list[int]] = field(default_factory=dict)
    normalized: bool = False

    @property
    def n_months(self) -> int:
        """Length of the recorded history: one past the last month seen anywhere."""
        last = -1
        for obs in self.labs.values():
            if obs:
                last = max(last, obs[-1][0])
        for months in self.diagnoses.values():
            if months:
                last = max(last, months[-1])
        return last + 1

    def copy(self) -> "PatientRecord":
        return PatientRecord(
            self.person_id,
            {k: list(v) for k, v in self.labs.items()},
            {k: list(v) for k, v in self.diagnoses.items()},
            self.normalized,
        )


@dataclass
class ObservationGrid:
    values: np.ndarray  # D x T
    mask: np.ndarray  # D x T, 0/1 floats
    lab_order: list[str]
    start_month: int = 0

    def __post_init__(self):
        if self.values.shape != self.mask.shape or self.values.shape[0] != len(self.lab_order):
            raise ValidationError(
                f"grid shapes disagree: values {self.values.shape}, mask {self.mask.shape}, "
                f"{len(self.lab_order)} labs")

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowSample:
    person_id: str
    t: int
    grid: ObservationGrid
    labels: np.ndarray  # M, int8
    eligible: np.ndarray  # M, int8


class Label(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    EXCLUDED = "excluded"


# ---------------------------------------------------------------- file I/O

OBS_HEADER = ["person_id", "lab_code", "month", "value"]
DIAG_HEADER = ["person_id", "disease_code", "month"]
STATS_HEADER = ["lab_code", "mean", "std"]


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [c.strip() for c in first] != header:
            raise ParseError(f"{path}: line 1: expected header {','.join(header)}, got {','.join(first)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def _parse_month(path, lineno, text):
    try:
        month = int(text)
    except ValueError:
        raise ParseError(f"{path}: line {lineno}: month {text!r} is not an integer") from None
    if month < 0:
        raise ValidationError(f"{path}: line {lineno}: negative month {month}")
    return month


def ingest(observations_file, diagnoses_file) -> list[PatientRecord]:
    """Read the two CSV files into records sorted by person_id.

    Repeated (person, lab, month) values are averaged.
    """
    sums: dict[str, dict[str, dict[int, list[float]]]] = defaultdict(lambda: defaultdict(dict))
    for lineno, (pid, lab, month, value) in _read_rows(observations_file, OBS_HEADER):
        month = _parse_month(observations_file, lineno, month)
        try:
            v = float(value)
        except ValueError:
            raise ParseError(f"{observations_file}: line {lineno}: value {value!r} is not a number") from None
        if not math.isfinite(v):
            raise ParseError(f"{observations_file}: line {lineno}: non-finite value {value!r}")
        sums[pid][lab].setdefault(month, []).append(v)

    diags: dict[str, dict[str, set[int]]] = defaultdict(lambda: defaultdict(set))
    for lineno, (pid, code, month) in _read_rows(diagnoses_file, DIAG_HEADER):
        diags[pid][code].add(_parse_month(diagnoses_file, lineno, month))

    patients = []
    for pid in sorted(set(sums) | set(diags)):
        labs = {
            lab: [(m, sum(vs) / len(vs)) for m, vs in sorted(by_month.items())]
            for lab, by_month in sorted(sums.get(pid, {}).items())
        }
        dx = {code: sorted(months) for code, months in sorted(diags.get(pid, {}).items())}
        patients.append(PatientRecord(pid, labs, dx))
    return patients


def write_observations(patients: Iterable[PatientRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for p in patients:
            for lab in sorted(p.labs):
                for month, value in p.labs[lab]:
                    w.writerow([p.person_id, lab, month, repr(float(value))])


def write_diagnoses(patients: Iterable[PatientRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        for p in patients:
            for code in sorted(p.diagnoses):
                for month in p.diagnoses[code]:
                    w.writerow([p.person_id, code, month])


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    mean: dict[str, float]
    std: dict[str, float]

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STATS_HEADER)
            for lab in sorted(self.mean):
                w.writerow([lab, repr(self.mean[lab]), repr(self.std[lab])])

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        mean, std = {}, {}
        for lineno, (lab, m, s) in _read_rows(path, STATS_HEADER):
            try:
                mean[lab], std[lab] = float(m), float(s)
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: malformed statistics row") from None
            if not std[lab] > 0:
                raise ValidationError(f"{path}: line {lineno}: std for {lab} must be positive")
        return cls(mean, std)


def fit_normalization(patients: Iterable[PatientRecord]) -> NormalizationStats:
    """Per-lab mean and sample standard deviation over every observation."""
    pooled: dict[str, list[float]] = defaultdict(list)
    for p in patients:
        for lab, obs in p.labs.items():
            pooled[lab].extend(v for _, v in obs)
    mean, std = {}, {}
    for lab in sorted(pooled):
        vals = np.asarray(pooled[lab])
        if vals.size < 2:
            raise ValidationError(f"lab {lab} has fewer than 2 observations")
        s = float(vals.std(ddof=1))
        if not s > 0:
            raise ValidationError(f"lab {lab} has zero variance")
        mean[lab], std[lab] = float(vals.mean()), s
    return NormalizationStats(mean, std)


def apply_normalization(patients: Iterable[PatientRecord], stats: NormalizationStats) -> list[PatientRecord]:
    out = []
    for p in patients:
        if p.normalized:
            raise ValidationError(f"patient {p.person_id} is already normalized")
        labs = {}
        for lab, obs in p.labs.items():
            if lab not in stats.mean:
                raise ValidationError(f"no normalization statistics for lab {lab}")
            m, s = stats.mean[lab], stats.std[lab]
            labs[lab] = [(t, (v - m) / s) for t, v in obs]
        out.append(PatientRecord(p.person_id, labs, {k: list(v) for k, v in p.diagnoses.items()}, True))
    return out


# ---------------------------------------------------------------- windows and labels


def patient_grid(patient: PatientRecord, lab_order: Sequence[str], start: int, stop: int) -> ObservationGrid:
    """Dense grid over months ``[start, stop)``; cells outside carry no observation."""
    D, T = len(lab_order), stop - start
    values = np.zeros((D, T))
    mask = np.zeros((D, T))
    for d, lab in enumerate(lab_order):
        for month, value in patient.labs.get(lab, ()):
            if start <= month < stop:
                values[d, month - start] = value
                mask[d, month - start] = 1.0
    return ObservationGrid(values, mask, list(lab_order), start)


def build_window(patient: PatientRecord, t: int, lab_order: Sequence[str],
                 stats: NormalizationStats | None = None, window: int = WINDOW) -> ObservationGrid:
    """Backward window covering months ``t - window .. t - 1``.

    When ``stats`` is given and the record is still in raw units, values are
    normalized on the way in.
    """
    if t < window:
        raise WindowError(f"anchor month {t} leaves less than {window} months of history")
    if stats is not None and not patient.normalized:
        patient = apply_normalization([patient], stats)[0]
    return patient_grid(patient, lab_order, t - window, t)


def label_window(patient: PatientRecord, t: int, disease: str) -> Label:
    """Classify one (patient, anchor, disease) triple.

    Excluded when any record precedes ``t + 3``; positive when at least two
    distinct record months fall in ``[t + 3, t + 27)``; negative otherwise.
    """
    months = patient.diagnoses.get(disease, ())
    lo, hi = t + GAP, t + GAP + HORIZON
    if any(m < lo for m in months):
        return Label.EXCLUDED
    if len({m for m in months if lo <= m < hi}) >= MIN_POSITIVE_RECORDS:
        return Label.POSITIVE
    return Label.NEGATIVE


def anchor_months(n_months: int, stride: int, window: int = WINDOW) -> range:
    """Anchors whose full outcome horizon lies inside the recorded history."""
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    return range(window, n_months - GAP - HORIZON + 1, stride)


def emit_samples(patients: Iterable[PatientRecord], lab_order: Sequence[str], diseases: Sequence[str],
                 stride: int = 6, stats: NormalizationStats | None = None,
                 window: int = WINDOW) -> list[WindowSample]:
    samples = []
    for p in sorted(patients, key=lambda r: r.person_id):
        if stats is not None and not p.normalized:
            p = apply_normalization([p], stats)[0]
        for t in anchor_months(p.n_months, stride, window):
            labels = np.zeros(len(diseases), dtype=np.int8)
            eligible = np.zeros(len(diseases), dtype=np.int8)
            for m, code in enumerate(diseases):
                lab = label_window(p, t, code)
                eligible[m] = lab is not Label.EXCLUDED
                labels[m] = lab is Label.POSITIVE
            samples.append(WindowSample(p.person_id, t, build_window(p, t, lab_order, window=window),
                                        labels, eligible))
    return samples


@dataclass
class SampleArrays:
    """Column-stacked view of a list of window samples."""

    values: np.ndarray  # N x D x W
    mask: np.ndarray  # N x D x W
    labels: np.ndarray  # N x M
    eligible: np.ndarray  # N x M
    person_ids: list[str]
    anchors: np.ndarray

    def __len__(self):
        return len(self.person_ids)

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx)
        return SampleArrays(self.values[idx], self.mask[idx], self.labels[idx], self.eligible[idx],
                            [self.person_ids[i] for i in idx], self.anchors[idx])


def stack_samples(samples: Sequence[WindowSample], n_labs: int | None = None,
                  n_diseases: int | None = None, window: int = WINDOW) -> SampleArrays:
    if not samples:
        return SampleArrays(np.zeros((0, n_labs or 0, window)), np.zeros((0, n_labs or 0, window)),
                            np.zeros((0, n_diseases or 0), np.int8), np.zeros((0, n_diseases or 0), np.int8),
                            [], np.zeros(0, np.int64))
    return SampleArrays(
        np.stack([s.grid.values for s in samples]),
        np.stack([s.grid.mask for s in samples]),
        np.stack([s.labels for s in samples]),
        np.stack([s.eligible for s in samples]),
        [s.person_id for s in samples],
        np.array([s.t for s in samples]),
    )


# ---------------------------------------------------------------- splitting


def split_population(patients: Sequence[PatientRecord], fractions=(0.34, 0.33, 0.33),
                     seed: int = 0) -> dict[str, list[PatientRecord]]:
    """Partition patients by person into train/validation/test."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    ordered = sorted(patients, key=lambda p: p.person_id)
    ids = [p.person_id for p in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate person_id in population")
    n = len(ordered)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    parts = {"train": perm[:n_train], "validation": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}
    return {k: [ordered[i] for i in sorted(v)] for k, v in parts.items()}


# ---------------------------------------------------------------- synthetic cohort


@dataclass
class SynthConfig:
    n_patients: int = 6000
    n_labs: int = 6
    n_diseases: int = 8
    horizon: int = 120
    latent_dim: int = 3
    alpha: float = 0.9
    mixing_seed: int = 7
    base_rate: float = 0.2
    noise_std: float = 0.1
    thresholds: tuple[float, ...] = (3.5,)
    gap_range: tuple[int, int] = (12, 24)
    repeat_range: tuple[int, int] = (2, 4)
    utilization_coupling: float = 0.0
    baseline_std: float = 1.0
    slope_span: int = 6
    seed: int = 0
    mixing: np.ndarray | None = None  # explicit D x K loadings override the seeded draw
    # optional ramp episodes: per patient and latent, with this probability the latent
    # climbs ramp_slope per month for a duration drawn from ramp_months, then plateaus
    ramp_prob: float = 0.3
    ramp_slope: float = 0.6
    ramp_months: tuple[int, int] = (12, 24)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.gap_range[0] < 4 or self.gap_range[1] < self.gap_range[0]:
            raise ConfigurationError("diagnosis gap range must satisfy 4 <= lo <= hi")
        if self.repeat_range[0] < 1 or self.repeat_range[1] < self.repeat_range[0]:
            raise ConfigurationError("repeat-record range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.base_rate <= 1.0:
            raise ConfigurationError("base_rate must lie in [0, 1]")
        if self.utilization_coupling < 0 or self.noise_std < 0 or self.baseline_std < 0:
            raise ConfigurationError("coupling and noise levels must be non-negative")
        if len(self.thresholds) not in (1, self.n_diseases):
            raise ConfigurationError("thresholds must hold one value or one per disease")
        if not 0.0 <= self.ramp_prob <= 1.0:
            raise ConfigurationError("ramp_prob must lie in [0, 1]")
        if self.ramp_months[0] < 1 or self.ramp_months[1] < self.ramp_months[0]:
            raise ConfigurationError("ramp duration range must satisfy 1 <= lo <= hi")
        if self.mixing is not None:
            self.mixing = np.asarray(self.mixing, dtype=np.float64)
            if self.mixing.shape != (self.n_labs, self.latent_dim):
                raise ConfigurationError(f"mixing must be {self.n_labs} x {self.latent_dim}")

    @property
    def lab_codes(self) -> list[str]:
        return [f"L{d}" for d in range(self.n_labs)]

    @property
    def disease_codes(self) -> list[str]:
        return [f"D{m}" for m in range(self.n_diseases)]

    def threshold(self, m: int) -> float:
        return self.thresholds[0] if len(self.thresholds) == 1 else self.thresholds[m]

    def mixing_matrix(self) -> np.ndarray:
        if self.mixing is not None:
            return self.mixing.copy()
        A = np.random.default_rng(self.mixing_seed).normal(size=(self.n_labs, self.latent_dim))
        return A / np.linalg.norm(A, axis=1, keepdims=True)


@dataclass
class GroundTruth:
    mixing: np.ndarray  # D x K
    latents: np.ndarray  # N x K x T
    trigger: np.ndarray  # N x M, -1 when never triggered
    first_diagnosis: np.ndarray  # N x M, -1 when never diagnosed inside the horizon
    designated_latent: np.ndarray  # M
    person_ids: list[str]

    def save(self, path, disease_codes: Sequence[str]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["person_id", "disease_code", "trigger_month", "first_diagnosis_month"])
            for i, pid in enumerate(self.person_ids):
                for m, code in enumerate(disease_codes):
                    w.writerow([pid, code, int(self.trigger[i, m]), int(self.first_diagnosis[i, m])])


def synth_generate(cfg: SynthConfig) -> tuple[list[PatientRecord], GroundTruth]:
    """Generate a cohort driven by AR(1) latent factors, optionally with ramp episodes.

    Each lab is a fixed linear mix of the latents plus a per-patient baseline
    and measurement noise.  Disease ``m`` is triggered the first month the
    ``slope_span``-month rise of its designated latent exceeds its threshold;
    it is first recorded a uniform gap later and then in a few more months.
    """
    rng = np.random.default_rng(cfg.seed)
    ramp_rng = np.random.default_rng([cfg.seed, 1])  # separate stream keeps ramp-free cohorts unchanged
    A = cfg.mixing_matrix()
    N, D, M, T, K = cfg.n_patients, cfg.n_labs, cfg.n_diseases, cfg.horizon, cfg.latent_dim
    innov = math.sqrt(1.0 - cfg.alpha ** 2)
    designated = np.arange(M) % K
    labs, diseases = cfg.lab_codes, cfg.disease_codes
    width = max(5, len(str(N - 1)))

    latents = np.zeros((N, K, T))
    trigger = np.full((N, M), -1, dtype=np.int64)
    first_dx = np.full((N, M), -1, dtype=np.int64)
    patients = []
    for i in range(N):
        z = np.empty((K, T))
        z[:, 0] = rng.normal(size=K)
        eta = rng.normal(size=(K, T))
        for t in range(1, T):
            z[:, t] = cfg.alpha * z[:, t - 1] + innov * eta[:, t]
        if cfg.ramp_prob > 0:
            has = ramp_rng.random(K) < cfg.ramp_prob
            start = ramp_rng.integers(0, T, size=K)
            dur = ramp_rng.integers(cfg.ramp_months[0], cfg.ramp_months[1] + 1, size=K)
            months = np.arange(T)
            for k in np.flatnonzero(has):
                z[k] += cfg.ramp_slope * np.clip(months - start[k], 0, dur[k])
        latents[i] = z
        baseline = rng.normal(scale=cfg.baseline_std, size=D) if cfg.baseline_std > 0 else np.zeros(D)
        noise = rng.normal(scale=cfg.noise_std, size=(D, T)) if cfg.noise_std > 0 else np.zeros((D, T))
        values = A @ z + baseline[:, None] + noise

        slope = np.full((K, T), -np.inf)
        slope[:, cfg.slope_span:] = z[:, cfg.slope_span:] - z[:, :-cfg.slope_span]
        dx: dict[str, list[int]] = {}
        for m in range(M):
            hits = np.flatnonzero(slope[designated[m]] > cfg.threshold(m))
            gap = rng.integers(cfg.gap_range[0], cfg.gap_range[1] + 1)
            n_rec = rng.integers(cfg.repeat_range[0], cfg.repeat_range[1] + 1)
            extra = rng.choice(np.arange(1, 13), size=n_rec - 1, replace=False)
            if hits.size == 0:
                continue
            s = int(hits[0])
            trigger[i, m] = s
            months = sorted({s + gap} | {s + gap + int(e) for e in extra})
            months = [mo for mo in months if mo < T]
            if months:
                first_dx[i, m] = months[0]
                dx[diseases[m]] = months

        risk = np.zeros(T)
        for m in range(M):
            if trigger[i, m] >= 0:
                risk[trigger[i, m]:] += 1.0 / M
        rate = np.clip(cfg.base_rate * (1.0 + cfg.utilization_coupling * risk), 0.0, 1.0)
        observed = rng.random((D, T)) < rate[None, :]
        lab_obs = {}
        for d in range(D):
            months = np.flatnonzero(observed[d])
            if months.size:
                lab_obs[labs[d]] = [(int(t), float(values[d, t])) for t in months]
        patients.append(PatientRecord(f"P{i:0{width}d}", lab_obs, dx))

    truth = GroundTruth(A, latents, trigger, first_dx, designated, [p.person_id for p in patients])
    return patients, truth
