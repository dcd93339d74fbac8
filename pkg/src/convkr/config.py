"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import diffcore as dc
from .baselines import CvGrid
from .cohort import SynthConfig
from .errors import ConfigurationError, ParseError
from .imputer import AugmentConfig, ImputeTrainConfig
from .predictor import INPUT_MODES, PredictorConfig

MODELS = ("convnet", "mlp", "logit")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = ""  # empty: generate a synthetic cohort
    # synthetic cohort
    n_patients: int = 6000
    n_labs: int = 6
    n_diseases: int = 8
    horizon: int = 120
    latent_dim: int = 3
    alpha: float = 0.9
    mixing_seed: int = 7
    base_rate: float = 0.2
    noise_std: float = 0.1
    baseline_std: float = 1.0
    thresholds: str = "3.5"
    gap_lo: int = 12
    gap_hi: int = 24
    repeat_lo: int = 2
    repeat_hi: int = 4
    utilization_coupling: float = 0.0
    slope_span: int = 6
    ramp_prob: float = 0.3
    ramp_slope: float = 0.6
    ramp_lo: int = 12
    ramp_hi: int = 24
    # population split and windows
    train_fraction: float = 1 / 3
    validation_fraction: float = 1 / 3
    stride: int = 6
    # imputer
    half_width: int = 12
    imputer_learning_rate: float = 0.3
    imputer_decay: float = 0.95
    imputer_batch_size: int = 32
    imputer_epochs: int = 20
    imputer_clip_norm: float = 0.1
    imputer_renormalize: bool = True
    imputer_validation_fraction: float = 0.2
    epsilon_denominator: float = 1e-8
    cancel_floor: float = 0.05
    fallback_value: float = 0.0
    augment_value_std: float = 0.01
    augment_time_std: float = 2.0
    # classic baselines
    cv_families: str = "gaussian,laplace,triangular"
    cv_bandwidths: str = "1,2,3,6,12"
    cv_noise_vars: str = "0.0001,0.01,0.1,1"
    cv_folds: int = 5
    # predictor
    filters: int = 8
    filter_length: int = 3
    pool: int = 3
    hidden: str = "100,100"
    dropout: float = 0.5
    head_batchnorm: bool = True
    learning_rate: float = 0.01
    decay: float = 0.95
    batch_size: int = 256
    epochs: int = 30
    logit_learning_rate: float = 0.1
    modes: str = "raw,imputed,two_channel"
    models: str = "convnet,mlp,logit"

    def __post_init__(self):
        for m in _split(self.modes):
            if m not in INPUT_MODES:
                raise ConfigurationError(f"unknown input mode {m!r}")
        for m in _split(self.models):
            if m not in MODELS:
                raise ConfigurationError(f"unknown model {m!r}")
        if self.stride < 1:
            raise ConfigurationError("stride must be positive")

    # ------------------------------------------------------------ text form

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{source} line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigurationError(f"{source} line {lineno}: unknown key {key!r}")
            values[key] = _coerce(known[key].type, value, f"{source} line {lineno}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self))

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # ------------------------------------------------------------ typed views

    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_patients=self.n_patients, n_labs=self.n_labs, n_diseases=self.n_diseases, horizon=self.horizon,
            latent_dim=self.latent_dim, alpha=self.alpha, mixing_seed=self.mixing_seed, base_rate=self.base_rate,
            noise_std=self.noise_std, baseline_std=self.baseline_std,
            thresholds=tuple(float(t) for t in _split(self.thresholds)),
            gap_range=(self.gap_lo, self.gap_hi), repeat_range=(self.repeat_lo, self.repeat_hi),
            utilization_coupling=self.utilization_coupling, slope_span=self.slope_span, seed=self.seed,
            ramp_prob=self.ramp_prob, ramp_slope=self.ramp_slope, ramp_months=(self.ramp_lo, self.ramp_hi))

    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.validation_fraction, 1.0 - self.train_fraction - self.validation_fraction)

    def imputer_train(self) -> ImputeTrainConfig:
        return ImputeTrainConfig(
            sgd=dc.SgdConfig(self.imputer_learning_rate, self.imputer_decay, self.imputer_batch_size,
                             self.imputer_epochs, self.seed),
            epsilon_denominator=self.epsilon_denominator, cancel_floor=self.cancel_floor,
            fallback_value=self.fallback_value, validation_fraction=self.imputer_validation_fraction,
            clip_norm=self.imputer_clip_norm if self.imputer_clip_norm > 0 else None,
            renormalize=self.imputer_renormalize)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.augment_value_std, self.augment_time_std, self.seed)

    def cv_grid(self) -> CvGrid:
        return CvGrid(tuple(_split(self.cv_families)), tuple(float(b) for b in _split(self.cv_bandwidths)),
                      tuple(float(s) for s in _split(self.cv_noise_vars)), self.cv_folds)

    def predictor(self, mode: str, n_labs: int, n_diseases: int) -> PredictorConfig:
        return PredictorConfig(
            n_labs=n_labs, n_diseases=n_diseases, J=self.filters, L=self.filter_length, p=self.pool,
            hidden=tuple(int(h) for h in _split(self.hidden)), dropout=self.dropout, input_mode=mode,
            head_bn=self.head_batchnorm, init_seed=self.seed,
            sgd=dc.SgdConfig(self.learning_rate, self.decay, self.batch_size, self.epochs, self.seed))

    def mode_list(self) -> list[str]:
        return _split(self.modes)

    def model_list(self) -> list[str]:
        return _split(self.models)


def _split(s: str) -> list[str]:
    return [x.strip() for x in str(s).split(",") if x.strip()]


def _coerce(typ, value: str, where: str):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError:
        raise ParseError(f"{where}: cannot read {value!r} as {name}") from None


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
