"""Staged experiment runner with hash-keyed checkpoints, and report emission.

Every stage writes its outputs under ``<out>/checkpoints/<config hash>/<stage>``
and marks completion with a ``DONE`` file.  Downstream stages always read
their inputs back from disk, so a resumed run sees exactly the bytes a fresh
run would.
"""

from __future__ import annotations

import csv
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import baselines as bl
from . import cohort as ch
from . import diffcore as dc
from . import imputer as im
from . import predictor as pr
from .config import RunConfig
from .errors import ConfigurationError, StageError
from .metrics import support_mask

log = logging.getLogger(__name__)

DEPENDS = {
    "cohort": (),
    "split": ("cohort",),
    "baselines": ("split",),
    "imputer": ("split",),
    "windows": ("imputer",),
    "predictors": ("windows",),
    "evaluate": ("predictors",),
    "report": ("baselines", "evaluate"),
}
STAGES = tuple(DEPENDS)
IMPUTATION_METHODS = ("gp", "kr_univar", "convkr_univar", "convkr_multivar")
SPLITS = ("train", "validation", "test")
# cheap or internally checkpointed stages that are re-entered on every run
ALWAYS_RERUN = ("predictors", "evaluate", "report")


class Interrupted(Exception):
    """Raised when a run is stopped on purpose after a stage (used to exercise resume)."""


@dataclass
class MetricsReport:
    labs: list[str]
    diseases: list[str]
    imputation: dict[str, dict[str, float]]  # lab -> method -> rmse
    prediction: dict[str, dict[str, list[float | None]]]  # mode -> model -> per-disease auc
    metadata: dict[str, str] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def best_of_modes(self) -> dict[str, list[float | None]]:
        models = sorted({m for per in self.prediction.values() for m in per}, key=_model_rank)
        out = {}
        for model in models:
            col = []
            for d in range(len(self.diseases)):
                vals = [per[model][d] for per in self.prediction.values() if model in per and per[model][d] is not None]
                col.append(max(vals) if vals else None)
            out[model] = col
        return out


def _model_rank(m):
    order = ("convnet", "mlp", "logit")
    return order.index(m) if m in order else len(order)


# ---------------------------------------------------------------- small io helpers


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _parse(s: str):
    return None if s == "NA" else float(s)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save_arrays(path: Path, s: ch.SampleArrays, **extra) -> None:
    np.savez(path, values=s.values, mask=s.mask, labels=s.labels, eligible=s.eligible,
             person_ids=np.array(s.person_ids, dtype=str), anchors=s.anchors, **extra)


def _load_arrays(path: Path):
    with np.load(path) as z:
        arrays = ch.SampleArrays(z["values"], z["mask"], z["labels"], z["eligible"],
                                 [str(p) for p in z["person_ids"]], z["anchors"])
        extra = {k: z[k] for k in z.files if k not in ("values", "mask", "labels", "eligible", "person_ids", "anchors")}
    return arrays, extra


# ---------------------------------------------------------------- runner


class Pipeline:
    def __init__(self, cfg: RunConfig, out: str | Path, modes: list[str] | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.root = self.out / "checkpoints" / cfg.hash()[:16]
        self.modes = modes or cfg.mode_list()
        self.wall_clock: dict[str, float] = {}

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def done(self, stage: str) -> bool:
        return (self.dir(stage) / "DONE").exists()

    def run(self, target: str = "report", stop_after: str | None = None) -> None:
        """Run ``target`` and its prerequisites, skipping stages already checkpointed."""
        if target not in DEPENDS:
            raise ConfigurationError(f"unknown stage {target!r}")
        order = []

        def visit(s):
            for d in DEPENDS[s]:
                visit(d)
            if s not in order:
                order.append(s)

        visit(target)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.txt").write_text(self.cfg.dumps())
        for stage in order:
            if stage in ALWAYS_RERUN or not self.done(stage):
                t0 = time.perf_counter()
                d = self.dir(stage)
                d.mkdir(parents=True, exist_ok=True)
                try:
                    getattr(self, f"_stage_{stage}")(d)
                except (StageError, Interrupted):
                    raise
                except Exception as exc:
                    log.error("stage %s failed: %s", stage, exc)
                    raise StageError(stage, str(exc)) from exc
                (d / "DONE").write_text("")
                self.wall_clock[stage] = time.perf_counter() - t0
                log.info("stage %s done in %.1fs", stage, self.wall_clock[stage])
            if stage == stop_after:
                raise Interrupted(f"stopped after {stage}")

    # ------------------------------------------------------------ loaders

    def codes(self) -> tuple[list[str], list[str]]:
        lines = (self.dir("cohort") / "codes.txt").read_text().splitlines()
        return lines[0].split(",")[1:], [c for c in lines[1].split(",")[1:] if c]

    def patients(self) -> list[ch.PatientRecord]:
        d = self.dir("cohort")
        return ch.ingest(d / "observations.csv", d / "diagnoses.csv")

    def split(self) -> dict[str, list[ch.PatientRecord]]:
        """Normalized patients per split."""
        stats = ch.NormalizationStats.load(self.dir("split") / "normalization.csv")
        part = dict(_read_rows(self.dir("split") / "split.csv")[1])
        out = {k: [] for k in SPLITS}
        for p in self.patients():
            out[part[p.person_id]].append(p)
        return {k: ch.apply_normalization(v, stats) for k, v in out.items()}

    def horizon(self) -> int:
        return int((self.dir("cohort") / "horizon.txt").read_text())

    def kernels(self, kind: str) -> dict:
        labs, _ = self.codes()
        d = self.dir("imputer")
        return {lab: im.load_kernel(d / f"{kind}_{lab}.txt") for lab in labs}

    def chosen_kernels(self) -> dict:
        """Per lab, whichever trained kernel had the lower held-out RMSE (ties keep the multivariate one)."""
        score = {}
        for lab, method, rmse in _read_rows(self.dir("imputer") / "heldout_rmse.csv")[1]:
            v = _parse(rmse)
            score[lab, method] = math.inf if v is None or math.isnan(v) else v
        uni, multi = self.kernels("univariate"), self.kernels("multivariate")
        return {lab: uni[lab] if score[lab, "convkr_univar"] < score[lab, "convkr_multivar"] else multi[lab]
                for lab in multi}

    def windows(self, split: str):
        return _load_arrays(self.dir("windows") / f"{split}.npz")

    # ------------------------------------------------------------ stages

    def _stage_cohort(self, d: Path) -> None:
        cfg = self.cfg
        if cfg.data_dir:
            src = Path(cfg.data_dir)
            patients = ch.ingest(src / "observations.csv", src / "diagnoses.csv")
            labs = sorted({lab for p in patients for lab in p.labs})
            diseases = sorted({c for p in patients for c in p.diagnoses})
            horizon = max((p.n_months for p in patients), default=0)
        else:
            scfg = cfg.synth()
            patients, truth = ch.synth_generate(scfg)
            labs, diseases, horizon = scfg.lab_codes, scfg.disease_codes, scfg.horizon
            truth.save(d / "truth.csv", diseases)
        if not labs:
            raise ConfigurationError("cohort has no lab observations")
        ch.write_observations(patients, d / "observations.csv")
        ch.write_diagnoses(patients, d / "diagnoses.csv")
        (d / "codes.txt").write_text("labs," + ",".join(labs) + "\ndiseases," + ",".join(diseases) + "\n")
        (d / "horizon.txt").write_text(f"{horizon}\n")

    def _stage_split(self, d: Path) -> None:
        parts = ch.split_population(self.patients(), self.cfg.fractions(), self.cfg.seed)
        rows = sorted((p.person_id, k) for k, ps in parts.items() for p in ps)
        _write_rows(d / "split.csv", ["person_id", "split"], rows)
        ch.fit_normalization(parts["train"]).save(d / "normalization.csv")

    def _series(self, patients, lab):
        return bl.series_from_patients(patients, lab, self.horizon())

    def _stage_baselines(self, d: Path) -> None:
        labs, _ = self.codes()
        parts = self.split()
        grid = self.cfg.cv_grid()
        rows = []
        for lab in labs:
            train, held = self._series(parts["train"], lab), self._series(parts["validation"], lab)
            for method, name in (("gp", "gp"), ("kr", "kr_univar")):
                res = bl.cross_validate(train, grid, method, self.cfg.seed, self.cfg.fallback_value)
                res.write_table(d / f"cv_{method}_{lab}.csv")
                score = bl.loo_score(held, res.best)
                keep = np.concatenate([support_mask(held[k][0], self.cfg.half_width)
                                       for k in sorted(held) if len(held[k][0]) >= 2] or [np.zeros(0, bool)])
                rmse = _restricted_rmse(score.predictions, score.targets, score.defined, keep, self.cfg.fallback_value)
                k = res.best.kernel if isinstance(res.best, bl.GpConfig) else res.best
                noise = res.best.noise_var if isinstance(res.best, bl.GpConfig) else None
                rows.append([lab, name, k.family, repr(k.bandwidth), _fmt(noise), _fmt(rmse)])
        _write_rows(d / "heldout_rmse.csv", ["lab", "method", "family", "bandwidth", "noise_var", "rmse"], rows)

    def _stage_imputer(self, d: Path) -> None:
        labs, _ = self.codes()
        parts = self.split()
        T = self.horizon()
        cfg = self.cfg
        tcfg, aug, M = cfg.imputer_train(), cfg.augment(), cfg.half_width
        train = [im.Panel.from_patient(p, labs, T) for p in parts["train"]]
        held = [im.Panel.from_patient(p, labs, T) for p in parts["validation"]]
        rows, log_rows = [], []
        for r, lab in enumerate(labs):
            uni, ulog = im.train_kernel_univariate([p.rows([r]) for p in train], M, aug, tcfg, lab=lab)
            im.save_kernel(uni, d / f"univariate_{lab}.txt")
            multi, mlog = im.train_kernel_multivariate(train, lab, labs, M, aug, tcfg)
            im.save_kernel(multi, d / f"multivariate_{lab}.txt")
            keep = np.concatenate([support_mask(p.months[r], M) for p in held if p.count(r) >= 2] or [np.zeros(0, bool)])
            eps, floor = cfg.epsilon_denominator, cfg.cancel_floor
            for name, res in (("convkr_univar", im.loo_univariate([p.rows([r]) for p in held], uni, eps, None, floor)),
                              ("convkr_multivar", im.loo_multivariate(held, multi, eps, None, floor))):
                rmse = _restricted_rmse(res.predictions, res.targets, res.defined, keep, cfg.fallback_value)
                rows.append([lab, name, _fmt(rmse)])
            for kind, tl in (("univariate", ulog), ("multivariate", mlog)):
                for e, (a, b) in enumerate(zip(tl.train_loss, tl.val_loss)):
                    log_rows.append([lab, kind, e, _fmt(a), _fmt(b), int(e == tl.best_epoch)])
        _write_rows(d / "heldout_rmse.csv", ["lab", "method", "rmse"], rows)
        _write_rows(d / "training_log.csv", ["lab", "kernel", "epoch", "train_mse", "val_mse", "best"], log_rows)

    def _stage_windows(self, d: Path) -> None:
        labs, diseases = self.codes()
        parts = self.split()
        kernels = self.chosen_kernels()
        (d / "kernel_choice.txt").write_text(
            "".join(f"{lab} {'multivariate' if isinstance(k, im.LearnableKernel2D) else 'univariate'}\n"
                    for lab, k in kernels.items()))
        for split in SPLITS:
            s = ch.stack_samples(ch.emit_samples(parts[split], labs, diseases, self.cfg.stride),
                                 len(labs), len(diseases))
            imputed = im.impute_cohort(s.values, s.mask, kernels, labs, self.cfg.epsilon_denominator,
                                       self.cfg.fallback_value, self.cfg.cancel_floor)
            _save_arrays(d / f"{split}.npz", s, imputed=imputed)

    def _inputs(self, mode):
        out = {}
        for split in SPLITS:
            s, extra = self.windows(split)
            out[split] = (s, pr.build_inputs(s.values, s.mask, mode, extra["imputed"]),
                          pr.window_max_features(s.values, s.mask) if mode == "raw"
                          else pr.window_max_features(extra["imputed"]))
        return out

    def _stage_predictors(self, d: Path) -> None:
        labs, diseases = self.codes()
        for mode in self.modes:
            data = None
            for model in self.cfg.model_list():
                sub = d / f"{model}_{mode}"
                if (sub / "DONE").exists():
                    continue
                sub.mkdir(parents=True, exist_ok=True)
                data = data or self._inputs(mode)
                (tr, x_tr, f_tr), (va, x_va, f_va), (te, x_te, f_te) = (data[k] for k in SPLITS)
                if not len(tr.labels) or not len(va.labels):
                    raise ConfigurationError("a split produced no windows")
                if model == "logit":
                    sgd = dc.SgdConfig(self.cfg.logit_learning_rate, self.cfg.decay, self.cfg.batch_size,
                                          self.cfg.epochs, self.cfg.seed)
                    lm, trace = pr.logit_max_baseline(f_tr, tr.labels, tr.eligible, f_va, va.labels, va.eligible, sgd)
                    np.savez(sub / "weights.npz", weights=lm.weights, bias=lm.bias, center=lm.center, scale=lm.scale)
                    scores = lm.scores(f_te)
                else:
                    net = pr.build_network(model, self.cfg.predictor(mode, len(labs), len(diseases)))
                    trace = pr.train(net, x_tr, tr.labels, tr.eligible, x_va, va.labels, va.eligible)
                    pr.save_network(net, sub / "model.txt")
                    scores = pr.predict_proba(pr.load_network(sub / "model.txt"), x_te)
                np.save(sub / "test_scores.npy", scores)
                _write_rows(sub / "training_log.csv", ["epoch", "train_loss", "val_mean_auc", "best"],
                            [[e, _fmt(a), _fmt(b), int(e == trace.best_epoch)]
                             for e, (a, b) in enumerate(zip(trace.train_loss, trace.val_auc))])
                (sub / "skipped.txt").write_text("".join(f"{diseases[m]}\n" for m in trace.skipped))
                (sub / "DONE").write_text("")

    def _stage_evaluate(self, d: Path) -> None:
        _, diseases = self.codes()
        te, _ = self.windows("test")
        for mode in self.modes:
            rows = []
            per_model = {}
            for model in self.cfg.model_list():
                sub = self.dir("predictors") / f"{model}_{mode}"
                if not (sub / "DONE").exists():
                    raise ConfigurationError(f"no trained {model} for mode {mode}")
                scores = np.load(sub / "test_scores.npy")
                skipped = set((sub / "skipped.txt").read_text().split())
                _, per = pr.mean_auc(scores, te.labels, te.eligible)
                per_model[model] = [None if diseases[m] in skipped else a for m, a in enumerate(per)]
            for m, code in enumerate(diseases):
                rows.append([code] + [_fmt(per_model[k][m]) for k in self.cfg.model_list()])
            _write_rows(d / f"auc_{mode}.csv", ["disease"] + self.cfg.model_list(), rows)

    def _stage_report(self, d: Path) -> None:
        report = self.collect()
        emit_reports(report, self.out, self)

    # ------------------------------------------------------------ report assembly

    def collect(self) -> MetricsReport:
        labs, diseases = self.codes()
        imputation = {lab: {} for lab in labs}
        if self.done("baselines"):
            for lab, method, *_, rmse in _read_rows(self.dir("baselines") / "heldout_rmse.csv")[1]:
                imputation[lab][method] = _parse(rmse)
        if self.done("imputer"):
            for lab, method, rmse in _read_rows(self.dir("imputer") / "heldout_rmse.csv")[1]:
                imputation[lab][method] = _parse(rmse)
        prediction = {}
        for mode in self.cfg.mode_list():
            path = self.dir("evaluate") / f"auc_{mode}.csv"
            if path.exists():
                header, rows = _read_rows(path)
                prediction[mode] = {model: [_parse(r[i + 1]) for r in rows] for i, model in enumerate(header[1:])}
        meta = {"config_hash": self.cfg.hash(), "seed": str(self.cfg.seed), "version": f"v{__version__}"}
        return MetricsReport(labs, diseases, imputation, prediction, meta, dict(self.wall_clock))


def _restricted_rmse(pred, target, defined, keep, fallback) -> float:
    if keep.size == 0 or not keep.any():
        return math.nan
    p = np.where(defined, pred, fallback)
    return float(np.sqrt(np.mean((p[keep] - target[keep]) ** 2)))


# ---------------------------------------------------------------- reports


def emit_reports(report: MetricsReport, out_dir: str | Path, pipeline: Pipeline | None = None) -> list[Path]:
    """Write the report files; returns their paths.  Wall-clock goes to ``timing.txt`` only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "imputation_rmse.csv"
    _write_rows(path, ["lab", *IMPUTATION_METHODS],
                [[lab, *(_fmt(report.imputation.get(lab, {}).get(m)) for m in IMPUTATION_METHODS)] for lab in report.labs])
    written.append(path)

    models = ["convnet", "mlp", "logit"]
    for mode, per in report.prediction.items():
        path = out / f"prediction_auc_{mode}.csv"
        _write_rows(path, ["disease", *models],
                    [[code, *(_fmt(per.get(k, [None] * len(report.diseases))[m]) for k in models)]
                     for m, code in enumerate(report.diseases)])
        written.append(path)
    if report.prediction:
        best = report.best_of_modes()
        path = out / "prediction_auc.csv"
        _write_rows(path, ["disease", *models],
                    [[code, *(_fmt(best.get(k, [None] * len(report.diseases))[m]) for k in models)]
                     for m, code in enumerate(report.diseases)])
        written.append(path)

    path = out / "summary.txt"
    path.write_text(_summary(report))
    written.append(path)

    path = out / "manifest.txt"
    cfg_text = pipeline.cfg.dumps() if pipeline is not None else ""
    path.write_text(f"version = {report.metadata.get('version', '')}\n"
                    f"config_hash = {report.metadata.get('config_hash', '')}\n"
                    f"seed = {report.metadata.get('seed', '')}\n"
                    "# config echo\n" + cfg_text)
    written.append(path)

    if pipeline is not None and pipeline.done("imputer"):
        heat = out / "kernel_heatmaps"
        heat.mkdir(exist_ok=True)
        for kind in ("univariate", "multivariate"):
            for lab, k in pipeline.kernels(kind).items():
                k2 = k.as_2d() if isinstance(k, im.LearnableKernel1D) else k
                M = k2.half_width
                path = heat / f"{kind}_{lab}.csv"
                _write_rows(path, ["lab", *map(str, range(-M, M + 1))],
                            [[row_lab, *(repr(float(v)) for v in k2.weights[i])] for i, row_lab in enumerate(k2.lab_order)])
                written.append(path)
    if pipeline is not None and pipeline.done("baselines"):
        for f in sorted(pipeline.dir("baselines").glob("cv_*.csv")):
            shutil.copyfile(f, out / f.name)
            written.append(out / f.name)

    if pipeline is not None and pipeline.done("windows"):
        shutil.copyfile(pipeline.dir("windows") / "kernel_choice.txt", out / "kernel_choice.txt")
        written.append(out / "kernel_choice.txt")

    (out / "timing.txt").write_text("".join(f"{k} {v:.3f}s\n" for k, v in report.wall_clock.items()))
    return written


def _summary(report: MetricsReport) -> str:
    lines = [f"convkr report {report.metadata.get('version', '')}",
             f"config hash {report.metadata.get('config_hash', '')}", "", "Imputation RMSE (held-out individuals)"]
    lines.append("lab " + " ".join(f"{m:>16}" for m in IMPUTATION_METHODS) + "  multivar/best-univar")
    for lab in report.labs:
        vals = report.imputation.get(lab, {})
        uni = [vals.get(m) for m in IMPUTATION_METHODS[:3] if vals.get(m) is not None and not math.isnan(vals[m])]
        mv = vals.get("convkr_multivar")
        ratio = f"{mv / min(uni):.3f}" if uni and mv is not None and not math.isnan(mv) and min(uni) > 0 else "NA"
        lines.append(f"{lab} " + " ".join(f"{_short(vals.get(m)):>16}" for m in IMPUTATION_METHODS) + f"  {ratio}")
    for mode, per in report.prediction.items():
        lines += ["", f"Test AUC, input mode {mode}", "disease " + " ".join(f"{k:>8}" for k in per)]
        for m, code in enumerate(report.diseases):
            lines.append(f"{code} " + " ".join(f"{_short(per[k][m]):>8}" for k in per))
        lines.append("mean " + " ".join(f"{_short(_mean(per[k])):>8}" for k in per))
    if report.prediction:
        best = report.best_of_modes()
        lines += ["", "prediction_auc.csv holds the best AUC across input modes for each model"]
        lines.append("mean best-of-modes " + " ".join(f"{k} {_short(_mean(v))}" for k, v in best.items()))
    return "\n".join(lines) + "\n"


def _short(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def read_reports(out_dir: str | Path) -> MetricsReport:
    """Parse the CSV reports back into a :class:`MetricsReport` (metadata from the manifest)."""
    out = Path(out_dir)
    header, rows = _read_rows(out / "imputation_rmse.csv")
    labs = [r[0] for r in rows]
    imputation = {r[0]: {m: _parse(v) for m, v in zip(header[1:], r[1:]) if v != "NA"} for r in rows}
    prediction, diseases = {}, []
    for path in sorted(out.glob("prediction_auc_*.csv")):
        mode = path.stem[len("prediction_auc_"):]
        header, rows = _read_rows(path)
        diseases = [r[0] for r in rows]
        prediction[mode] = {k: [_parse(r[i + 1]) for r in rows] for i, k in enumerate(header[1:])}
    meta = {}
    for line in (out / "manifest.txt").read_text().splitlines()[:3]:
        k, v = (s.strip() for s in line.split("=", 1))
        meta[k] = v
    return MetricsReport(labs, diseases, imputation, prediction, meta)


def run_pipeline(cfg: RunConfig, out: str | Path, stop_after: str | None = None,
                 modes: list[str] | None = None) -> MetricsReport:
    """Run every stage (resuming from checkpoints) and emit the reports.

    On a stage failure, whatever report parts are already available are
    written before the error propagates.
    """
    pipe = Pipeline(cfg, out, modes)
    try:
        pipe.run("report", stop_after=stop_after)
    except StageError:
        if pipe.done("cohort"):
            try:
                emit_reports(pipe.collect(), pipe.out, pipe)
            except Exception as exc:  # best effort; the original error matters more
                log.warning("could not write partial reports: %s", exc)
        raise
    return pipe.collect()
