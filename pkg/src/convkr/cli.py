"""Command line entry point: ``convkr <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import predictor as pr
from .config import RunConfig
from .errors import ConvKRError
from .pipeline import Pipeline, _write_rows, run_pipeline

log = logging.getLogger("convkr")

SEARCH_LR = (0.001, 0.01, 0.05, 0.1, 1.0)
SEARCH_DECAY = (0.8, 0.9, 0.95, 0.99)
SEARCH_EPOCHS = 10


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, data_dir=args.data)


def _copy(files, dest: Path) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    for f in files:
        shutil.copyfile(f, dest / f.name)


def cmd_synth(pipe: Pipeline, args) -> None:
    pipe.run("cohort")
    _copy(sorted(pipe.dir("cohort").glob("*.csv")), pipe.out)


def cmd_train_imputer(pipe: Pipeline, args) -> None:
    pipe.run("imputer")
    _copy(sorted(pipe.dir("imputer").glob("*.txt")) + sorted(pipe.dir("imputer").glob("*.csv")), pipe.out / "kernels")


def cmd_impute(pipe: Pipeline, args) -> None:
    pipe.run("windows")
    _copy([pipe.dir("windows") / "kernel_choice.txt"], pipe.out)
    for split in ("train", "validation", "test"):
        s, extra = pipe.windows(split)
        np.savez(pipe.out / f"imputed_{split}.npz", values=s.values, mask=s.mask, imputed=extra["imputed"],
                 person_ids=np.array(s.person_ids, dtype=str), anchors=s.anchors)


def cmd_cv_baselines(pipe: Pipeline, args) -> None:
    pipe.run("baselines")
    _copy(sorted(pipe.dir("baselines").glob("*.csv")), pipe.out)


def cmd_train_predictor(pipe: Pipeline, args) -> None:
    if args.search:
        search(pipe, args.mode or pipe.modes[0], args.model)
    pipe.run("predictors")


def cmd_evaluate(pipe: Pipeline, args) -> None:
    pipe.run("evaluate")
    _copy(sorted(pipe.dir("evaluate").glob("auc_*.csv")), pipe.out)


def cmd_pipeline(pipe: Pipeline, args) -> None:
    run_pipeline(pipe.cfg, pipe.out, modes=pipe.modes)
    print((pipe.out / "summary.txt").read_text(), end="")


def search(pipe: Pipeline, mode: str, model: str) -> None:
    """Grid over learning rate and decay at a short epoch budget; scores are best validation mean AUC."""
    pipe.run("windows")
    labs, diseases = pipe.codes()
    data = pipe._inputs(mode)
    (tr, x_tr, _), (va, x_va, _) = data["train"], data["validation"]
    rows = []
    for lr in SEARCH_LR:
        for decay in SEARCH_DECAY:
            cfg = pipe.cfg.predictor(mode, len(labs), len(diseases))
            sgd = dc.SgdConfig(lr, decay, cfg.sgd.batch_size, SEARCH_EPOCHS, cfg.sgd.seed)
            net = pr.build_network(model, replace(cfg, sgd=sgd))
            trace = pr.train(net, x_tr, tr.labels, tr.eligible, x_va, va.labels, va.eligible)
            best = max(trace.val_auc) if trace.val_auc else float("nan")
            log.info("search lr=%g decay=%g val auc %.4f", lr, decay, best)
            rows.append([repr(lr), repr(decay), repr(best)])
    path = pipe.out / f"search_{model}_{mode}.csv"
    _write_rows(path, ["learning_rate", "decay", "val_mean_auc"], rows)
    top = max(rows, key=lambda r: float(r[2]))
    print(f"best learning_rate {top[0]} decay {top[1]} (validation mean AUC {float(top[2]):.4f}); table in {path}")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic cohort"),
    "train-imputer": (cmd_train_imputer, "fit the univariate and multivariate imputation kernels"),
    "impute": (cmd_impute, "impute every prediction window"),
    "cv-baselines": (cmd_cv_baselines, "cross-validate the GP and kernel regression baselines"),
    "train-predictor": (cmd_train_predictor, "train the prediction models"),
    "evaluate": (cmd_evaluate, "score trained models on the test split"),
    "report": (cmd_pipeline, "write all reports, running whatever is missing"),
    "pipeline": (cmd_pipeline, "run everything end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convkr", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs/default", help="output directory (default %(default)s)")
    common.add_argument("--data", help="directory holding observations.csv and diagnoses.csv")
    common.add_argument("--mode", choices=pr.INPUT_MODES, help="restrict to one input mode")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "train-predictor":
            p.add_argument("--search", action="store_true", help="grid search learning rate and decay first")
            p.add_argument("--model", default="convnet", choices=("convnet", "mlp"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        pipe = Pipeline(cfg, args.out, [args.mode] if args.mode else None)
        COMMANDS[args.command][0](pipe, args)
    except (ConvKRError, OSError) as exc:
        print(f"convkr: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
