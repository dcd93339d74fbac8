"""Learnable Nadaraya-Watson kernel regression in normalized-convolution form.

A kernel weight at offset ``k`` multiplies observations made ``k`` months
after the query month, so ``weights[k + M]`` is the weight of an observation
at ``t_query + k``.  Imputation at month ``t`` is

    sum_d sum_k W[d, k] * x_d(t + k) * m_d(t + k)  /  sum_d sum_k W[d, k] * m_d(t + k)

with zero padding outside the series.  Univariate regression is the one-row case.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffcore as dc
from .cohort import ObservationGrid, PatientRecord
from .errors import ConfigurationError, ParseError, TrainingError

log = logging.getLogger(__name__)

DEFAULT_HALF_WIDTH = 12
# estimates whose kernel weights cancel below this fraction of their absolute mass are undefined
CANCEL_FLOOR = 0.05
MAX_JITTER_ATTEMPTS = 8


def _bump(M: int) -> np.ndarray:
    tau = np.arange(-M, M + 1)
    return np.exp(-tau ** 2 / 18.0)


@dataclass
class LearnableKernel1D:
    half_width: int
    weights: np.ndarray
    lab: str | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.half_width < 0 or self.weights.shape != (2 * self.half_width + 1,):
            raise ConfigurationError(
                f"kernel with half-width {self.half_width} needs {2 * self.half_width + 1} weights, "
                f"got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("kernel weights must be finite")

    @classmethod
    def initial(cls, M: int = DEFAULT_HALF_WIDTH, rng: np.random.Generator | None = None, lab=None):
        """Gaussian bump ``exp(-tau^2 / 18)`` plus uniform noise in +-0.01."""
        rng = rng or np.random.default_rng(0)
        return cls(M, _bump(M) + rng.uniform(-0.01, 0.01, size=2 * M + 1), lab)

    def at(self, offset: int) -> float:
        return float(self.weights[offset + self.half_width]) if abs(offset) <= self.half_width else 0.0

    def as_2d(self) -> "LearnableKernel2D":
        lab = self.lab or "x"
        return LearnableKernel2D(lab, self.half_width, self.weights[None, :].copy(), [lab])


@dataclass
class LearnableKernel2D:
    target_lab: str
    half_width: int
    weights: np.ndarray  # D x (2M + 1)
    lab_order: list[str]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        expect = (len(self.lab_order), 2 * self.half_width + 1)
        if self.weights.shape != expect:
            raise ConfigurationError(f"2D kernel weights must have shape {expect}, got {self.weights.shape}")
        if self.target_lab not in self.lab_order:
            raise ConfigurationError(f"target lab {self.target_lab} missing from lab order")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("kernel weights must be finite")

    @property
    def target_row(self) -> int:
        return self.lab_order.index(self.target_lab)

    @classmethod
    def initial(cls, target_lab: str, lab_order: Sequence[str], M: int = DEFAULT_HALF_WIDTH,
                rng: np.random.Generator | None = None):
        """Gaussian bump on the target row, a fifth of it elsewhere, plus noise in +-0.01.

        Starting the other rows near zero lets early steps push the
        denominator through zero; a small positive bump keeps it away.
        """
        rng = rng or np.random.default_rng(0)
        lab_order = list(lab_order)
        if target_lab not in lab_order:
            raise ConfigurationError(f"target lab {target_lab} not in lab order")
        w = np.tile(0.2 * _bump(M), (len(lab_order), 1))
        w[lab_order.index(target_lab)] = _bump(M)
        w += rng.uniform(-0.01, 0.01, size=w.shape)
        return cls(target_lab, M, w, lab_order)

    def row(self, lab: str) -> np.ndarray:
        return self.weights[self.lab_order.index(lab)]


# ---------------------------------------------------------------- persistence


def save_kernel(kernel, path) -> None:
    """Write a kernel as text; one ``<lab> <offset> <weight>`` line per tap."""
    k2 = kernel.as_2d() if isinstance(kernel, LearnableKernel1D) else kernel
    M = k2.half_width
    lines = [f"target={k2.target_lab} M={M} labs={','.join(k2.lab_order)}"]
    for d, lab in enumerate(k2.lab_order):
        for k in range(-M, M + 1):
            lines.append(f"{lab} {k} {k2.weights[d, k + M]:.16e}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path):
    """Inverse of :func:`save_kernel`; single-lab files load as 1D kernels."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError(f"{path}: empty kernel file")
    try:
        head = dict(part.split("=", 1) for part in text[0].split())
        target, M, labs = head["target"], int(head["M"]), head["labs"].split(",")
    except (ValueError, KeyError):
        raise ParseError(f"{path}: line 1: malformed kernel header {text[0]!r}") from None
    w = np.full((len(labs), 2 * M + 1), np.nan)
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            lab, k, v = parts[0], int(parts[1]), float(parts[2])
            w[labs.index(lab), k + M] = v
        except (ValueError, IndexError):
            raise ParseError(f"{path}: line {lineno}: malformed kernel entry {line!r}") from None
    if np.isnan(w).any():
        raise ParseError(f"{path}: kernel file is missing taps")
    if labs == [target]:
        return LearnableKernel1D(M, w[0], target)
    return LearnableKernel2D(target, M, w, labs)


# ---------------------------------------------------------------- direct reference


def nw_oracle(observations, kernel: LearnableKernel1D, t_query: int, eps: float = 1e-8,
              cancel_floor: float = CANCEL_FLOOR):
    """Direct-sum Nadaraya-Watson estimate at ``t_query``; None when undefined.

    Undefined means ``|den| < eps`` or ``|den| < cancel_floor * sum(|w|)``
    over the contributing observations (the weights nearly cancel).
    """
    num = den = mass = 0.0
    for t_i, x_i in observations:
        k = t_i - t_query
        if abs(k) <= kernel.half_width:
            w = kernel.weights[k + kernel.half_width]
            num += x_i * w
            den += w
            mass += abs(w)
    if abs(den) < max(eps, cancel_floor * mass):
        return None
    return num / den


# ---------------------------------------------------------------- convolution form


def _ratio(num, den, mass, eps, cancel_floor, fallback):
    ok = np.abs(den) >= np.maximum(eps, cancel_floor * mass)
    out = np.full(np.shape(num), float(fallback))
    np.divide(num, den, out=out, where=ok)
    return out, ok


def impute_univariate(values, mask, kernel: LearnableKernel1D, eps: float = 1e-8, fallback: float = 0.0,
                      cancel_floor: float = CANCEL_FLOOR):
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    num = dc.conv1d_same_centered(values * mask, kernel.weights)
    den = dc.conv1d_same_centered(mask, kernel.weights)
    mass = dc.conv1d_same_centered(mask, np.abs(kernel.weights))
    return _ratio(num, den, mass, eps, cancel_floor, fallback)[0]


def impute_univariate_backward(grad_out, values, mask, kernel: LearnableKernel1D, eps: float = 1e-8,
                               cancel_floor: float = CANCEL_FLOOR):
    """Gradient of ``sum(grad_out * impute_univariate(...))`` w.r.t. the kernel weights."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    xm = values * mask
    num = dc.conv1d_same_centered(xm, kernel.weights)
    den = dc.conv1d_same_centered(mask, kernel.weights)
    mass = dc.conv1d_same_centered(mask, np.abs(kernel.weights))
    pred, ok = _ratio(num, den, mass, eps, cancel_floor, 0.0)
    g = np.where(ok, grad_out, 0.0)
    safe = np.where(ok, den, 1.0)
    _, d_num = dc.conv1d_same_centered_backward(g / safe, xm, kernel.weights)
    _, d_den = dc.conv1d_same_centered_backward(-g * pred / safe, mask, kernel.weights)
    return d_num + d_den


def _check_order(grid_labs, kernel: LearnableKernel2D):
    if list(grid_labs) != list(kernel.lab_order):
        raise ConfigurationError(
            f"grid lab order {list(grid_labs)} does not match kernel lab order {kernel.lab_order}")


def _nd_windows(arr, M):
    """``(..., D, T)`` -> ``(..., D, T, 2M + 1)`` zero-padded centered windows."""
    pad = [(0, 0)] * (arr.ndim - 1) + [(M, M)]
    return sliding_window_view(np.pad(arr, pad), 2 * M + 1, axis=-1)


def multivariate_num_den(values, mask, weights):
    """Numerator, denominator and absolute-mass maps for ``(..., D, T)`` values/mask
    and ``(D, 2M+1)`` weights."""
    M = weights.shape[1] // 2
    num = np.einsum("...dtk,dk->...t", _nd_windows(values * mask, M), weights, optimize=True)
    win_m = _nd_windows(mask, M)
    den = np.einsum("...dtk,dk->...t", win_m, weights, optimize=True)
    mass = np.einsum("...dtk,dk->...t", win_m, np.abs(weights), optimize=True)
    return num, den, mass


def impute_multivariate(grid: ObservationGrid, kernel: LearnableKernel2D, eps: float = 1e-8,
                        fallback: float = 0.0, cancel_floor: float = CANCEL_FLOOR) -> np.ndarray:
    _check_order(grid.lab_order, kernel)
    num, den, mass = multivariate_num_den(grid.values, grid.mask, kernel.weights)
    return _ratio(num, den, mass, eps, cancel_floor, fallback)[0]


# ---------------------------------------------------------------- sparse panels


@dataclass
class Panel:
    """Sparse observations of D series over months ``[0, T)``.

    ``months[d]`` and ``values[d]`` are index-aligned; after augmentation the
    months of a row need not be sorted, but they stay unique.
    """

    months: list[np.ndarray]
    values: list[np.ndarray]
    T: int

    @property
    def D(self) -> int:
        return len(self.months)

    def count(self, d: int = 0) -> int:
        return len(self.months[d])

    @classmethod
    def from_grid(cls, grid: ObservationGrid) -> "Panel":
        months = [np.flatnonzero(grid.mask[d]) for d in range(grid.values.shape[0])]
        return cls(months, [grid.values[d, m].copy() for d, m in enumerate(months)], grid.T)

    @classmethod
    def from_series(cls, months, values, T: int) -> "Panel":
        return cls([np.asarray(months, dtype=np.int64)], [np.asarray(values, dtype=np.float64)], T)

    @classmethod
    def from_patient(cls, patient: PatientRecord, lab_order: Sequence[str], T: int | None = None) -> "Panel":
        T = patient.n_months if T is None else T
        months, values = [], []
        for lab in lab_order:
            obs = [(m, v) for m, v in patient.labs.get(lab, ()) if m < T]
            months.append(np.array([m for m, _ in obs], dtype=np.int64))
            values.append(np.array([v for _, v in obs], dtype=np.float64))
        return cls(months, values, max(T, 1))

    def to_grid(self, lab_order: Sequence[str] | None = None) -> ObservationGrid:
        values = np.zeros((self.D, self.T))
        mask = np.zeros((self.D, self.T))
        for d in range(self.D):
            values[d, self.months[d]] = self.values[d]
            mask[d, self.months[d]] = 1.0
        return ObservationGrid(values, mask, list(lab_order or [f"s{d}" for d in range(self.D)]), 0)

    def rows(self, idx: Sequence[int]) -> "Panel":
        return Panel([self.months[i] for i in idx], [self.values[i] for i in idx], self.T)


@dataclass
class AugmentConfig:
    value_noise_std: float = 0.01
    time_jitter_std: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.value_noise_std < 0 or self.time_jitter_std < 0:
            raise ConfigurationError("augmentation standard deviations must be non-negative")

    @property
    def active(self) -> bool:
        return self.value_noise_std > 0 or self.time_jitter_std > 0


def _jitter_row(months: np.ndarray, T: int, std: float, rng: np.random.Generator) -> np.ndarray:
    out = months.copy()
    if std == 0 or len(months) == 0:
        return out
    occupied = set(months.tolist())
    for i, t in enumerate(months.tolist()):
        occupied.discard(t)
        new = t
        for _ in range(MAX_JITTER_ATTEMPTS):
            cand = t + math.floor(rng.normal(0.0, std))
            if 0 <= cand < T and cand not in occupied:
                new = cand
                break
        occupied.add(new)
        out[i] = new
    return out


def augment(data, cfg: AugmentConfig, rng: np.random.Generator):
    """Perturbed copy of a :class:`Panel` or :class:`ObservationGrid`.

    Every value gets gaussian noise and every month an integer shift
    ``floor(N(0, time_jitter_std))``.  A shift that leaves the series or lands
    on an occupied month is redrawn up to 8 times, then dropped.  Observation
    order and count are preserved.
    """
    panel = Panel.from_grid(data) if isinstance(data, ObservationGrid) else data
    months, values = [], []
    for m, v in zip(panel.months, panel.values):
        months.append(_jitter_row(m, panel.T, cfg.time_jitter_std, rng))
        values.append(v + rng.normal(0.0, cfg.value_noise_std, size=v.shape) if cfg.value_noise_std > 0 else v.copy())
    out = Panel(months, values, panel.T)
    if isinstance(data, ObservationGrid):
        return out.to_grid(data.lab_order)
    return out


# ---------------------------------------------------------------- leave-one-out losses


@dataclass
class LooResult:
    loss: float
    grad: np.ndarray  # same shape as the weights
    n_terms: int
    predictions: np.ndarray
    targets: np.ndarray
    defined: np.ndarray | None = None  # False where the estimate fell back

    def rmse(self, fallback: float = 0.0) -> float:
        """RMSE over every target, scoring undefined estimates as ``fallback``."""
        if self.targets.size == 0:
            return math.nan
        pred = self.predictions if self.defined is None else np.where(self.defined, self.predictions, fallback)
        return float(np.sqrt(np.mean((pred - self.targets) ** 2)))


def _loo(contexts: Sequence[Panel], references: Sequence[Panel], target_row: int, weights: np.ndarray,
         eps: float, whole_month: bool, cancel_floor: float = CANCEL_FLOOR) -> LooResult:
    """Leave-one-out predictions and MSE gradient, vectorized over a batch.

    Targets are the observations of ``references[i]`` row ``target_row``.  The
    context is ``contexts[i]`` (index-aligned with the reference, possibly
    augmented) with the held-out observation removed; with ``whole_month``
    every context observation whose reference month equals the target month
    is removed across all rows.  Panels are laid end to end on one timeline
    separated by ``M`` empty months so the kernel never spans two panels.
    """
    D, K = weights.shape
    M = K // 2
    offsets, total = [], 0
    for c in contexts:
        if c.D != D:
            raise ConfigurationError(f"panel has {c.D} rows, kernel has {D}")
        offsets.append(total)
        total += c.T + M
    V = np.zeros((D, total))
    Mk = np.zeros((D, total))
    tgt_pos, tgt_val, tgt_panel = [], [], []
    for p, (c, r, o) in enumerate(zip(contexts, references, offsets)):
        for d in range(D):
            if len(c.months[d]):
                V[d, c.months[d] + o] = c.values[d]
                Mk[d, c.months[d] + o] = 1.0
        tm = r.months[target_row]
        keep = np.ones(len(tm), dtype=bool) if r.count(target_row) >= 2 else np.zeros(len(tm), dtype=bool)
        if not keep.any() and len(tm):
            log.debug("skipping panel %d: fewer than 2 target observations", p)
        tgt_pos.append(tm[keep] + o)
        tgt_val.append(r.values[target_row][keep])
        tgt_panel.append(np.full(int(keep.sum()), p))
    tgt_pos = np.concatenate(tgt_pos) if tgt_pos else np.zeros(0, np.int64)
    tgt_val = np.concatenate(tgt_val) if tgt_val else np.zeros(0)
    n = len(tgt_pos)
    if n == 0:
        return LooResult(0.0, np.zeros_like(weights), 0, np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))

    Vp = np.pad(V, ((0, 0), (M, M)))
    Mp = np.pad(Mk, ((0, 0), (M, M)))
    idx = tgt_pos[:, None] + np.arange(K)[None, :]  # n x K into padded arrays
    win_v = Vp[:, idx].transpose(1, 0, 2).copy()  # n x D x K
    win_m = Mp[:, idx].transpose(1, 0, 2).copy()

    # remove held-out contributions
    rows = range(D) if whole_month else [target_row]
    for d in rows:
        ref_m = np.concatenate([r.months[d] + o for r, o in zip(references, offsets)]) if references else np.zeros(0, np.int64)
        ctx_m = np.concatenate([c.months[d] + o for c, o in zip(contexts, offsets)]) if contexts else np.zeros(0, np.int64)
        ctx_v = np.concatenate([c.values[d] for c in contexts]) if contexts else np.zeros(0)
        if len(ref_m) == 0:
            continue
        order = np.argsort(ref_m, kind="stable")
        ref_sorted = ref_m[order]
        loc = np.searchsorted(ref_sorted, tgt_pos)
        loc_c = np.minimum(loc, len(ref_sorted) - 1)
        hit = ref_sorted[loc_c] == tgt_pos
        j = order[loc_c[hit]]
        shift = ctx_m[j] - tgt_pos[hit]
        inside = np.abs(shift) <= M
        ii = np.flatnonzero(hit)[inside]
        kk = shift[inside] + M
        win_v[ii, d, kk] -= ctx_v[j[inside]]
        win_m[ii, d, kk] -= 1.0

    num = np.einsum("ndk,dk->n", win_v, weights)
    den = np.einsum("ndk,dk->n", win_m, weights)
    mass = np.einsum("ndk,dk->n", win_m, np.abs(weights))
    ok = np.abs(den) >= np.maximum(eps, cancel_floor * mass)
    m = int(ok.sum())
    pred = np.zeros(n)
    pred[ok] = num[ok] / den[ok]
    if m == 0:
        return LooResult(0.0, np.zeros_like(weights), 0, pred, tgt_val, ok)
    resid = pred[ok] - tgt_val[ok]
    loss = float(np.mean(resid ** 2))
    coef = 2.0 * resid / (m * den[ok])
    grad = np.einsum("n,ndk->dk", coef, win_v[ok] - pred[ok, None, None] * win_m[ok])
    return LooResult(loss, grad, m, pred, tgt_val, ok)


def _as_panels(data) -> list[Panel]:
    if isinstance(data, ObservationGrid):
        return [Panel.from_grid(data)]
    if isinstance(data, Panel):
        return [data]
    return list(data)


def loo_univariate(series, kernel: LearnableKernel1D, eps: float = 1e-8, reference=None,
                   cancel_floor: float = CANCEL_FLOOR) -> LooResult:
    """LOO MSE and its gradient for one or many single-row panels."""
    ctx = _as_panels(series)
    ref = ctx if reference is None else _as_panels(reference)
    return _loo(ctx, ref, 0, kernel.weights[None, :], eps, False, cancel_floor)


def loo_loss_univariate(series, kernel: LearnableKernel1D, eps: float = 1e-8, reference=None) -> float:
    return loo_univariate(series, kernel, eps, reference).loss


def loo_multivariate(data, kernel: LearnableKernel2D, eps: float = 1e-8, reference=None,
                     cancel_floor: float = CANCEL_FLOOR) -> LooResult:
    """Whole-month LOO MSE and gradient for the kernel's target lab."""
    if isinstance(data, ObservationGrid):
        _check_order(data.lab_order, kernel)
    ctx = _as_panels(data)
    ref = ctx if reference is None else _as_panels(reference)
    return _loo(ctx, ref, kernel.target_row, kernel.weights, eps, True, cancel_floor)


def loo_loss_multivariate(data, kernel: LearnableKernel2D, eps: float = 1e-8, reference=None) -> float:
    return loo_multivariate(data, kernel, eps, reference).loss


# ---------------------------------------------------------------- training


@dataclass
class ImputeTrainConfig:
    sgd: dc.SgdConfig = field(default_factory=lambda: dc.SgdConfig(
        learning_rate=0.3, decay_per_epoch=0.95, batch_size=32, epochs=20, seed=0))
    epsilon_denominator: float = 1e-8
    cancel_floor: float = CANCEL_FLOOR
    fallback_value: float = 0.0
    validation_fraction: float = 0.2
    clip_norm: float | None = 0.1
    renormalize: bool = True

    def __post_init__(self):
        if not self.epsilon_denominator > 0:
            raise ConfigurationError("epsilon_denominator must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _fit(panels: Sequence[Panel], weights: np.ndarray, target_row: int, whole_month: bool,
         aug: AugmentConfig | None, cfg: ImputeTrainConfig) -> tuple[np.ndarray, TrainLog]:
    panels = list(panels)
    if not panels:
        raise TrainingError("no series to train on")
    sgd = cfg.sgd
    rng = np.random.default_rng(sgd.seed)
    aug_rng = np.random.default_rng([sgd.seed, 0 if aug is None else aug.seed])
    order = rng.permutation(len(panels))
    n_val = int(round(cfg.validation_fraction * len(panels)))
    if len(panels) - n_val < 1:
        n_val = 0
    val = [panels[i] for i in sorted(order[:n_val])]
    train = [panels[i] for i in sorted(order[n_val:])]
    if not val:
        val = train

    param = dc.Param("kernel", weights.copy())
    eps = cfg.epsilon_denominator
    best, best_loss = param.value.copy(), math.inf
    trace = TrainLog()
    for epoch in range(sgd.epochs):
        perm = rng.permutation(len(train))
        total, count = 0.0, 0
        for b in range(0, len(train), sgd.batch_size):
            batch = [train[i] for i in perm[b:b + sgd.batch_size]]
            ctx = [augment(p, aug, aug_rng) for p in batch] if aug is not None and aug.active else batch
            res = _loo(ctx, batch, target_row, param.value, eps, whole_month, cfg.cancel_floor)
            if not math.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
                raise TrainingError(f"kernel training diverged at epoch {epoch}")
            if res.n_terms == 0:
                continue
            grad = res.grad
            if cfg.clip_norm is not None:
                norm = float(np.linalg.norm(grad))
                if norm > cfg.clip_norm:
                    grad = grad * (cfg.clip_norm / norm)
            param.grad = grad
            dc.sgd_step([param], epoch, sgd)
            if cfg.renormalize:
                param.value /= np.abs(param.value).max()
            total += res.loss * res.n_terms
            count += res.n_terms
        val_res = _loo(val, val, target_row, param.value, eps, whole_month, cfg.cancel_floor)
        if not math.isfinite(val_res.loss):
            raise TrainingError(f"kernel training diverged at epoch {epoch}")
        trace.train_loss.append(total / max(count, 1))
        trace.val_loss.append(val_res.loss)
        if val_res.loss < best_loss:
            best_loss, best = val_res.loss, param.value.copy()
            trace.best_epoch = epoch
        log.debug("epoch %d train %.5f val %.5f", epoch, trace.train_loss[-1], val_res.loss)
    return best, trace


def train_kernel_univariate(series: Sequence[Panel], M: int = DEFAULT_HALF_WIDTH,
                            augment_cfg: AugmentConfig | None = None,
                            train_cfg: ImputeTrainConfig | None = None,
                            init: LearnableKernel1D | None = None, lab: str | None = None):
    """Fit a 1D kernel by SGD on the augmented leave-one-out MSE.

    Returns ``(kernel, log)``; the kernel is the one from the epoch with the
    lowest LOO MSE on a held-out subset of the series.
    """
    augment_cfg = AugmentConfig() if augment_cfg is None else augment_cfg
    train_cfg = train_cfg or ImputeTrainConfig()
    if init is None:
        init = LearnableKernel1D.initial(M, np.random.default_rng([train_cfg.sgd.seed, 1]), lab)
    series = [s if s.D == 1 else s.rows([0]) for s in _as_panels(series)]
    w, trace = _fit(series, init.weights[None, :], 0, False, augment_cfg, train_cfg)
    return LearnableKernel1D(init.half_width, w[0], lab if lab is not None else init.lab), trace


def train_kernel_multivariate(panels: Sequence[Panel], target_lab: str, lab_order: Sequence[str],
                              M: int = DEFAULT_HALF_WIDTH, augment_cfg: AugmentConfig | None = None,
                              train_cfg: ImputeTrainConfig | None = None,
                              init: LearnableKernel2D | None = None):
    """Fit one ``D x (2M+1)`` kernel for ``target_lab`` with whole-month masking."""
    augment_cfg = AugmentConfig() if augment_cfg is None else augment_cfg
    train_cfg = train_cfg or ImputeTrainConfig()
    lab_order = list(lab_order)
    if init is None:
        init = LearnableKernel2D.initial(target_lab, lab_order, M, np.random.default_rng([train_cfg.sgd.seed, 2]))
    _check_order(lab_order, init)
    w, trace = _fit(_as_panels(panels), init.weights, init.target_row, True, augment_cfg, train_cfg)
    return LearnableKernel2D(target_lab, init.half_width, w, lab_order), trace


# ---------------------------------------------------------------- cohort imputation


def impute_cohort(values: np.ndarray, mask: np.ndarray, kernels: dict, lab_order: Sequence[str],
                  eps: float = 1e-8, fallback: float = 0.0, cancel_floor: float = CANCEL_FLOOR) -> np.ndarray:
    """Impute every lab of a stack of windows.

    ``values`` and ``mask`` are ``(N, D, W)`` arrays already truncated to
    each backward window, so no observation outside a window can reach its
    imputation.  ``kernels`` maps each lab to a 2D kernel (or a 1D kernel,
    applied to that lab's own row).  Returns the dense ``(N, D, W)`` grid.
    """
    lab_order = list(lab_order)
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    out = np.empty_like(values)
    for d, lab in enumerate(lab_order):
        if lab not in kernels:
            raise ConfigurationError(f"no imputation kernel for lab {lab}")
        k = kernels[lab]
        if isinstance(k, LearnableKernel1D):
            w = np.zeros((len(lab_order), k.weights.size))
            w[d] = k.weights
        else:
            _check_order(lab_order, k)
            w = k.weights
        num, den, mass = multivariate_num_den(values, mask, w)
        out[:, d, :] = _ratio(num, den, mass, eps, cancel_floor, fallback)[0]
    return out
