"""Classic univariate imputation baselines: parametric-kernel regression and GP regression.

A series is a pair ``(months, values)`` of equal-length 1D arrays.  Both
baselines are scored by leave-one-out over each series, with undefined
estimates counted at the fallback value so every method is scored on the
same held-out points.
"""

from __future__ import annotations

import csv
import itertools
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigurationError, NumericalError

FAMILIES = ("gaussian", "laplace", "triangular")
KR_UNDEFINED_BELOW = 1e-12


@dataclass(frozen=True)
class ParametricKernel:
    family: str
    bandwidth: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if not self.bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")

    def __call__(self, dt):
        return kernel_eval(self, dt)

    def sampled(self, M: int) -> np.ndarray:
        """Weights at integer offsets ``-M..M``."""
        return np.asarray(kernel_eval(self, np.arange(-M, M + 1)), dtype=np.float64)


def kernel_eval(k: ParametricKernel, dt):
    if not k.bandwidth > 0:
        raise ConfigurationError(f"bandwidth must be positive, got {k.bandwidth}")
    dt = np.abs(np.asarray(dt, dtype=np.float64))
    h = k.bandwidth
    if k.family == "gaussian":
        out = np.exp(-dt ** 2 / (2 * h * h))
    elif k.family == "laplace":
        out = np.exp(-dt / h)
    else:
        out = np.maximum(0.0, 1.0 - dt / h)
    return float(out) if out.ndim == 0 else out


def _as_arrays(observations):
    if isinstance(observations, tuple) and len(observations) == 2 and np.ndim(observations[0]) == 1:
        t, y = observations
    else:
        obs = list(observations)
        t = [o[0] for o in obs]
        y = [o[1] for o in obs]
    return np.asarray(t, dtype=np.float64), np.asarray(y, dtype=np.float64)


def kr_predict(observations, k: ParametricKernel, t_query: float) -> float | None:
    """Nadaraya-Watson estimate with parametric weights; None when the weight sum is below 1e-12."""
    t, y = _as_arrays(observations)
    w = np.atleast_1d(kernel_eval(k, t - t_query))
    den = float(w.sum())
    if den < KR_UNDEFINED_BELOW:
        return None
    return float(w @ y) / den


@dataclass(frozen=True)
class GpConfig:
    kernel: ParametricKernel
    noise_var: float = 0.0
    jitter: float = 1e-9

    def __post_init__(self):
        if self.noise_var < 0:
            raise ConfigurationError("noise_var must be non-negative")
        if not self.jitter > 0:
            raise ConfigurationError("jitter must be positive")


def _gp_factor(t, cfg: GpConfig):
    cov = np.atleast_2d(kernel_eval(cfg.kernel, t[:, None] - t[None, :]))
    cov = cov + (cfg.noise_var + cfg.jitter) * np.eye(len(t))
    try:
        return cho_factor(cov, lower=True), cov
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"covariance factorization failed (condition estimate {np.linalg.cond(cov):.3e})") from exc


def gp_posterior_mean(observations, cfg: GpConfig, t_query) -> float | np.ndarray:
    """Zero-mean GP posterior mean at one or many query months."""
    t, y = _as_arrays(observations)
    if t.size == 0:
        raise ConfigurationError("GP regression needs at least one observation")
    factor, _ = _gp_factor(t, cfg)
    alpha = cho_solve(factor, y)
    tq = np.asarray(t_query, dtype=np.float64)
    k_star = kernel_eval(cfg.kernel, np.atleast_1d(tq)[:, None] - t[None, :])
    out = np.atleast_2d(k_star) @ alpha
    return float(out[0]) if tq.ndim == 0 else out


# ---------------------------------------------------------------- leave-one-out scoring


def kr_loo(months, values, k: ParametricKernel):
    """LOO predictions for one series; returns ``(pred, defined)``."""
    t, y = _as_arrays((np.asarray(months), np.asarray(values)))
    w = np.atleast_2d(kernel_eval(k, t[:, None] - t[None, :]))
    np.fill_diagonal(w, 0.0)
    den = w.sum(axis=1)
    ok = den >= KR_UNDEFINED_BELOW
    pred = np.zeros_like(y)
    pred[ok] = (w @ y)[ok] / den[ok]
    return pred, ok


def gp_loo(months, values, cfg: GpConfig):
    """LOO posterior means for one series via the inverse-covariance identity.

    For ``A = K + s I`` the mean at ``t_i`` given all other points is
    ``y_i - [A^-1 y]_i / [A^-1]_ii``.
    """
    t, y = _as_arrays((np.asarray(months), np.asarray(values)))
    factor, _ = _gp_factor(t, cfg)
    a_inv = cho_solve(factor, np.eye(len(t)))
    pred = y - (a_inv @ y) / np.diag(a_inv)
    return pred, np.ones(len(t), dtype=bool)


@dataclass
class LooScore:
    predictions: np.ndarray
    targets: np.ndarray
    defined: np.ndarray

    def rmse(self, fallback: float = 0.0) -> float:
        if self.targets.size == 0:
            return math.nan
        pred = np.where(self.defined, self.predictions, fallback)
        return float(np.sqrt(np.mean((pred - self.targets) ** 2)))


def loo_score(series: Mapping[str, tuple] | Sequence[tuple], config) -> LooScore:
    """LOO over every series with at least two observations, in id order."""
    items = [series[k] for k in sorted(series)] if isinstance(series, Mapping) else list(series)
    preds, targets, defined = [], [], []
    for months, values in items:
        if len(months) < 2:
            continue
        if isinstance(config, GpConfig):
            p, ok = gp_loo(months, values, config)
        else:
            p, ok = kr_loo(months, values, config)
        preds.append(p)
        targets.append(np.asarray(values, dtype=np.float64))
        defined.append(ok)
    if not preds:
        return LooScore(np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
    return LooScore(np.concatenate(preds), np.concatenate(targets), np.concatenate(defined))


# ---------------------------------------------------------------- cross-validation


@dataclass
class CvGrid:
    families: tuple[str, ...] = FAMILIES
    bandwidths: tuple[float, ...] = (1, 2, 3, 6, 12)
    noise_vars: tuple[float, ...] = (1e-4, 1e-2, 1e-1, 1.0)
    folds: int = 5

    def __post_init__(self):
        if not self.families or not self.bandwidths or not self.noise_vars:
            raise ConfigurationError("cross-validation grid is empty")
        if self.folds < 1:
            raise ConfigurationError("folds must be positive")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigurationError(f"unknown kernel family {f!r}")

    def configs(self, method: str) -> list:
        fam_rank = {f: i for i, f in enumerate(FAMILIES)}
        fams = sorted(self.families, key=fam_rank.__getitem__)
        if method == "kr":
            return [ParametricKernel(f, float(h)) for f, h in itertools.product(fams, sorted(self.bandwidths))]
        if method == "gp":
            return [GpConfig(ParametricKernel(f, float(h)), float(s))
                    for f, h, s in itertools.product(fams, sorted(self.bandwidths), sorted(self.noise_vars))]
        raise ConfigurationError(f"unknown method {method!r}")


@dataclass
class CvRow:
    method: str
    family: str
    bandwidth: float
    noise_var: float | None
    rmse: float


@dataclass
class CvResult:
    best: object  # ParametricKernel or GpConfig
    best_rmse: float
    table: list[CvRow] = field(default_factory=list)

    def write_table(self, path: str | Path) -> None:
        write_cv_table(self.table, path)


def write_cv_table(rows: Sequence[CvRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "family", "bandwidth", "noise_var", "rmse"])
        for r in rows:
            w.writerow([r.method, r.family, repr(float(r.bandwidth)),
                        "" if r.noise_var is None else repr(float(r.noise_var)), repr(float(r.rmse))])


def fold_of(series_id: str, folds: int, seed: int) -> int:
    """Fold index from a hash of the series id, so input order never matters."""
    return zlib.crc32(f"{seed}:{series_id}".encode()) % folds


def _sort_key(cfg):
    k = cfg.kernel if isinstance(cfg, GpConfig) else cfg
    noise = cfg.noise_var if isinstance(cfg, GpConfig) else 0.0
    return (k.bandwidth, FAMILIES.index(k.family), noise)


def cross_validate(series: Mapping[str, tuple], grid: CvGrid | None = None, method: str = "kr",
                   seed: int = 0, fallback: float = 0.0) -> CvResult:
    """Pick the config with the lowest mean held-out-fold LOO RMSE.

    ``series`` maps an id to ``(months, values)``.  Neither baseline has fitted
    parameters, so each fold's score is the LOO RMSE on that fold's series.
    Ties go to the smaller bandwidth, then gaussian < laplace < triangular.
    """
    grid = grid or CvGrid()
    configs = grid.configs(method)
    if len(series) < grid.folds:
        raise ConfigurationError(f"need at least {grid.folds} series for {grid.folds}-fold CV, got {len(series)}")
    fold_ids: dict[int, dict] = {}
    for sid in sorted(series):
        fold_ids.setdefault(fold_of(sid, grid.folds, seed), {})[sid] = series[sid]
    table, scored = [], []
    for cfg in configs:
        per_fold = [loo_score(part, cfg).rmse(fallback) for _, part in sorted(fold_ids.items())]
        per_fold = [r for r in per_fold if not math.isnan(r)]
        rmse = float(np.mean(per_fold)) if per_fold else math.inf
        k = cfg.kernel if isinstance(cfg, GpConfig) else cfg
        table.append(CvRow(method, k.family, k.bandwidth, cfg.noise_var if isinstance(cfg, GpConfig) else None, rmse))
        scored.append((rmse, _sort_key(cfg), cfg))
    rmse, _, best = min(scored, key=lambda s: (s[0], s[1]))
    return CvResult(best, rmse, table)


def series_from_patients(patients, lab: str, T: int | None = None) -> dict[str, tuple]:
    """``{person_id: (months, values)}`` for one lab; patients without it are omitted."""
    out = {}
    for p in patients:
        obs = [(m, v) for m, v in p.labs.get(lab, ()) if T is None or m < T]
        if obs:
            out[p.person_id] = (np.array([m for m, _ in obs], dtype=np.int64),
                                np.array([v for _, v in obs], dtype=np.float64))
    return out
