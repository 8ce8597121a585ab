"""Command-line entry points: run, compare-costs, validate-config, gen-data.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    ValidationError,
    config_from_dict,
    config_to_dict,
    derive_cost_params,
    load_config,
)
from .costmodel import CostParams, SWEEP_AXES, cost_sweep, fl_costs, sfl_costs, sfprompt_costs
from .data import gen_synthetic, save_dataset_csv
from .model import save_checkpoint
from .report import render_sweep_figure, write_run_outputs, write_sweep_csv
from .server import run_training

log = logging.getLogger("sfprompt")

# Illustrative analytic presets in (MB, GFLOP-ish, seconds) units. The model
# sizes and client count match the published ViT comparison; the split and
# traffic shares are plausible stand-ins, so only the full-exchange rows are
# load-bearing.
PRESETS: dict[str, CostParams] = {
    "vit-base": CostParams(
        model_size=391.0, dataset_size=1000.0, clients=5, local_epochs=10,
        head_fraction=0.30, body_fraction=0.65, prune_fraction=0.5,
        cut_layer_size=0.15, forward_fraction=1.0 / 3.0,
        client_power=10.0, server_power=1000.0, rate=10.0,
    ),
    "vit-large": CostParams(
        model_size=1243.0, dataset_size=1000.0, clients=5, local_epochs=10,
        head_fraction=0.30, body_fraction=0.65, prune_fraction=0.5,
        cut_layer_size=0.15, forward_fraction=1.0 / 3.0,
        client_power=10.0, server_power=1000.0, rate=10.0,
    ),
}


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _cmd_run(args) -> int:
    config = _load(args)
    result = run_training(config)
    params = derive_cost_params(config)
    triples = {"fl": fl_costs(params), "sfl": sfl_costs(params), "sfprompt": sfprompt_costs(params)}
    out = Path(args.out)
    written = write_run_outputs(out, result, triples)
    save_checkpoint(result.initial_model, config.model, out / "model_initial.sfpm")
    save_checkpoint(result.final_model, config.model, out / "model_final.sfpm")
    (out / "prompt_final.bin").write_bytes(result.final_prompt.vectors.astype("<f8").tobytes())
    written += [out / "model_initial.sfpm", out / "model_final.sfpm", out / "prompt_final.bin"]
    log.info("final accuracy %.4f (initial %.4f) over %d rounds",
             result.final_accuracy, result.initial_accuracy, len(result.reports))
    for path in written:
        log.info("wrote %s", path)
    return 0


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise ValidationError("values", f"could not parse {text!r} as comma-separated numbers") from exc
    if not values:
        raise ValidationError("values", "sweep range is empty")
    return values


def _cmd_compare_costs(args) -> int:
    if args.preset:
        params = PRESETS[args.preset]
    else:
        params = derive_cost_params(_load(args))
    values = _parse_values(args.values) if args.values else _default_values(args.axis, params)
    rows = cost_sweep(params, args.axis, values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(out / "sweep.csv", rows)
    render_sweep_figure(out / "sweep.png", rows)
    log.info("wrote %s and %s", out / "sweep.csv", out / "sweep.png")
    return 0


def _default_values(axis: str, params: CostParams) -> list[float]:
    if axis == "local_epochs":
        return [float(u) for u in range(1, 21)]
    if axis == "model_size":
        return list(np.linspace(params.model_size / 4, params.model_size * 4, 13))
    if axis == "prune":
        return [round(g, 2) for g in np.linspace(0.0, 0.9, 10)]
    return [float(r) for r in range(1, 51)]


def _cmd_validate_config(args) -> int:
    config = _load(args)
    json.dump(config_to_dict(config), sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_gen_data(args) -> int:
    config = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = gen_synthetic(config.data.n_samples, config.model, config.data.class_separation, config.seed + 2)
    test = gen_synthetic(config.data.test_samples, config.model, config.data.class_separation,
                         config.seed + 3, means_seed=config.seed + 2)
    save_dataset_csv(train, out / "train.csv")
    save_dataset_csv(test, out / "test.csv")
    log.info("wrote %s (%d samples) and %s (%d samples)",
             out / "train.csv", len(train), out / "test.csv", len(test))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfprompt",
        description="Split-federated prompt-tuning simulator and analytic cost model",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="JSON config path (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default="out", help="output directory")

    p = sub.add_parser("run", help="run the full simulation and write metrics, figures, checkpoints")
    common(p)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("compare-costs", help="evaluate the analytic cost model along one axis")
    common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, default="rounds")
    p.add_argument("--values", type=str, default=None, help="comma-separated axis values")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="use a published-model preset instead of config-derived params")
    p.set_defaults(fn=_cmd_compare_costs)

    p = sub.add_parser("validate-config", help="validate a config and print the normalized form")
    common(p)
    p.set_defaults(fn=_cmd_validate_config)

    p = sub.add_parser("gen-data", help="generate the synthetic datasets as CSV")
    common(p)
    p.set_defaults(fn=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except ValidationError as exc:
        log.error("invalid configuration — %s", exc)
        return 1
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 — the CLI boundary maps everything to exit 2
        log.error("run failed: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
