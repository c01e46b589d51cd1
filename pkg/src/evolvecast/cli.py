"""Command line entry point: ``evolvecast {generate,train,forecast,evaluate}``.

Thread count for the numeric backend comes from ``EVOLVECAST_THREADS``
(default 1, which keeps runs bit-reproducible).  Logs go to stderr.
"""

from __future__ import annotations

import os

THREAD_ENV = "EVOLVECAST_THREADS"


def _configure_threads() -> None:
    threads = os.environ.get(THREAD_ENV, "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


_configure_threads()

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

from . import autodiff as ad  # noqa: E402
from .data import EvolutionScenario, denormalize_values, generate_scenario, load_dataset, tomllib  # noqa: E402
from .errors import ConfigError, EvolveCastError, MissingArtifact, module_tag  # noqa: E402
from .metrics import MetricReport, read_predictions, write_predictions  # noqa: E402
from .model import CastConfig, CastModel  # noqa: E402
from .runner import predict_windows, run_scenario  # noqa: E402
from .training import ContinualConfig, TrainConfig, prepare_period  # noqa: E402

log = logging.getLogger("evolvecast")


def load_run_config(path) -> tuple[CastConfig, TrainConfig, ContinualConfig]:
    """Run config with optional ``[model]``, ``[train]`` and ``[continual]`` tables."""
    if path is None:
        return CastConfig(), TrainConfig(), ContinualConfig()
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"model", "train", "continual"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return (
        CastConfig.from_dict(raw.get("model", {})),
        TrainConfig.from_dict(raw.get("train", {})),
        ContinualConfig.from_dict(raw.get("continual", {})),
    )


def cmd_generate(args) -> int:
    scenario = EvolutionScenario.from_file(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    result = generate_scenario(scenario, args.out)
    log.info("wrote %d periods to %s", len(result.pairs), args.out)
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, cont_cfg = load_run_config(args.config)
    seed = train_cfg.seed if args.seed is None else args.seed
    train_cfg = replace(train_cfg, seed=seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, max_epochs=args.epochs, patience=min(train_cfg.patience, args.epochs))
    pairs = load_dataset(args.data)
    run = run_scenario(pairs, args.scenario, model_cfg, train_cfg, cont_cfg, seed, args.out)
    final = run.report.final_period
    for r in run.report.select(period=final):
        log.info("period %d, %d min: MAE %.4f RMSE %.4f MAPE %.2f%%",
                 r.period, r.minutes, r.mae, r.rmse, r.mape)
    return 0


def cmd_forecast(args) -> int:
    meta, state = ad.load_checkpoint(args.checkpoint)
    if "model" not in meta:
        raise ConfigError(f"{args.checkpoint}: checkpoint carries no model config")
    cfg = CastConfig.from_dict(meta["model"])
    model = CastModel(cfg, 0 if args.seed is None else args.seed)
    model.load_state_dict(state)
    pairs = {s.period: (s, x) for s, x in load_dataset(args.data)}
    if args.period not in pairs:
        raise MissingArtifact(Path(args.data) / f"period_{args.period}")
    snapshot, raw = pairs[args.period]
    period = prepare_period(snapshot, raw, cfg.history, cfg.horizon,
                            meta.get("stride", 1), meta.get("epsilon", 0.1))
    inputs, targets = period.test
    pred = predict_windows(model, period, inputs)
    truth = denormalize_values(targets, period.series.mean, period.series.std)
    if args.out is None:
        write_predictions(sys.stdout, pred, snapshot.nodes)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_predictions(out / "predictions.csv", pred, snapshot.nodes)
        write_predictions(out / "truth.csv", truth, snapshot.nodes)
        log.info("wrote %d forecast windows to %s", len(pred), out)
    return 0


def cmd_evaluate(args) -> int:
    pred, pred_nodes = read_predictions(args.pred)
    truth, truth_nodes = read_predictions(args.truth)
    if pred_nodes != truth_nodes or pred.shape != truth.shape:
        raise ConfigError("prediction and truth files cover different windows, nodes or steps")
    report = MetricReport("evaluate")
    report.add_period(args.period, pred, truth)
    if args.out is None:
        report.write(sys.stdout)
    else:
        report.write(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evolvecast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="random seed override")
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic evolving dataset")
    p.add_argument("--scenario", required=True, help="scenario TOML file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("train", cmd_train, "train over all periods and write checkpoints and a report")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="run config TOML ([model], [train], [continual])")
    p.add_argument("--scenario", choices=["full", "continual"], default="continual")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None, help="override max_epochs")

    p = add("forecast", cmd_forecast, "forecast the test windows of one period")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--period", type=int, required=True)
    p.add_argument("--out", default=None, help="directory for predictions.csv and truth.csv")

    p = add("evaluate", cmd_evaluate, "score a predictions file against a truth file")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--period", type=int, default=0)
    p.add_argument("--out", default=None, help="report CSV path (stdout if omitted)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except EvolveCastError as exc:
        print(f"evolvecast [{module_tag(exc)}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"evolvecast [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
