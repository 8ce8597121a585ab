"""Experiment configuration: JSON loading, validation, defaults, round-trips.

The defaults describe the reference distributed scenario: 50 clients with 5
selected per round, 10 local epochs, Dirichlet(0.1) non-IID partitioning,
global lr 0.1, local lr 1e-4, batch size 128.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

from .costmodel import CostParams
from .model import ModelConfig, SplitSpec, param_count, segment_param_counts
from .simnet import LinkConfig

log = logging.getLogger("sfprompt.config")


class ValidationError(ValueError):
    """Configuration rejected; `field` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 5000
    test_samples: int = 1000
    class_separation: float = 5.0


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "dirichlet"  # "iid" | "dirichlet"
    concentration: float = 0.1


@dataclass(frozen=True)
class ComputeConfig:
    client_power: float = 1e6   # work units / second
    server_power: float = 1e8
    forward_fraction: float = 1.0 / 3.0  # share of one update spent in the forward pass


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: ModelConfig(8, 16, 4, 10, 16))
    n_prompts: int = 4
    split: SplitSpec = field(default_factory=lambda: SplitSpec(1, 4))
    data: DataConfig = field(default_factory=DataConfig)
    n_clients: int = 50
    clients_per_round: int = 5
    rounds: int = 30
    local_epochs: int = 10
    batch_size: int = 128
    lr_global: float = 0.1
    lr_local: float = 1e-4
    aggregation: str = "weighted"  # "weighted" | "uniform"
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    prune_fraction: float = 0.5
    prune_once: bool = False
    prune_with_prompt: bool = False
    link: LinkConfig = field(default_factory=lambda: LinkConfig(1e6, 1e6, True))
    compute: ComputeConfig = field(default_factory=ComputeConfig)


_SECTIONS = {
    "model": ModelConfig,
    "split": SplitSpec,
    "data": DataConfig,
    "partition": PartitionConfig,
    "link": LinkConfig,
    "compute": ComputeConfig,
}


def _build_section(name: str, cls, raw: dict):
    defaults = ExperimentConfig.__dataclass_fields__[name].default_factory()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValidationError(f"{name}.{sorted(unknown)[0]}", "unknown field")
    merged = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        merged[key] = value
    for key in known - set(raw):
        log.info("default applied: %s.%s=%r", name, key, merged[key])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ValidationError(name, str(exc)) from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("<root>", f"config must be a JSON object, got {type(raw).__name__}")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - top_fields
    if unknown:
        raise ValidationError(sorted(unknown)[0], "unknown field")
    kwargs = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _SECTIONS:
            section = raw.get(f.name, {})
            if not isinstance(section, dict):
                raise ValidationError(f.name, "must be a JSON object")
            kwargs[f.name] = _build_section(f.name, _SECTIONS[f.name], section)
        elif f.name in raw:
            kwargs[f.name] = raw[f.name]
        else:
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            kwargs[f.name] = default
            log.info("default applied: %s=%r", f.name, default)
    config = ExperimentConfig(**kwargs)
    _validate(config)
    return config


def _validate(c: ExperimentConfig) -> None:
    def require(ok: bool, field_name: str, message: str):
        if not ok:
            raise ValidationError(field_name, message)

    require(c.seed >= 0, "seed", f"must be >= 0, got {c.seed}")
    require(c.n_prompts >= 0, "n_prompts", f"must be >= 0, got {c.n_prompts}")
    try:
        c.split.validate(c.model.n_layers)
    except ValueError as exc:
        raise ValidationError("split", str(exc)) from exc
    require(c.n_clients >= 1, "n_clients", f"must be >= 1, got {c.n_clients}")
    require(
        1 <= c.clients_per_round <= c.n_clients,
        "clients_per_round",
        f"must lie in [1, n_clients={c.n_clients}], got {c.clients_per_round}",
    )
    require(c.rounds >= 0, "rounds", f"must be >= 0, got {c.rounds}")
    require(c.local_epochs >= 0, "local_epochs", f"must be >= 0, got {c.local_epochs}")
    require(c.batch_size >= 1, "batch_size", f"must be >= 1, got {c.batch_size}")
    require(c.lr_global >= 0, "lr_global", f"must be >= 0, got {c.lr_global}")
    require(c.lr_local >= 0, "lr_local", f"must be >= 0, got {c.lr_local}")
    require(c.aggregation in ("weighted", "uniform"), "aggregation", f"must be 'weighted' or 'uniform', got {c.aggregation!r}")
    require(c.partition.kind in ("iid", "dirichlet"), "partition.kind", f"must be 'iid' or 'dirichlet', got {c.partition.kind!r}")
    require(c.partition.concentration > 0, "partition.concentration", f"must be > 0, got {c.partition.concentration}")
    require(0.0 <= c.prune_fraction < 1.0, "prune_fraction", f"must lie in [0, 1), got {c.prune_fraction}")
    require(c.data.n_samples >= c.model.n_classes, "data.n_samples", f"must be >= n_classes, got {c.data.n_samples}")
    require(c.data.n_samples >= c.n_clients, "data.n_samples", f"must be >= n_clients so every client gets data, got {c.data.n_samples}")
    require(c.data.test_samples >= 1, "data.test_samples", f"must be >= 1, got {c.data.test_samples}")
    require(c.data.class_separation >= 0, "data.class_separation", f"must be >= 0, got {c.data.class_separation}")
    require(c.compute.client_power > 0, "compute.client_power", "must be > 0")
    require(c.compute.server_power > 0, "compute.server_power", "must be > 0")
    require(0.0 <= c.compute.forward_fraction <= 1.0, "compute.forward_fraction", "must lie in [0, 1]")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON config file; an empty file means all defaults."""
    with open(path) as f:
        text = f.read()
    if not text.strip():
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError("<parse>", f"{exc.msg} at line {exc.lineno} column {exc.colno}") from exc
    return config_from_dict(raw)


def config_to_dict(c: ExperimentConfig) -> dict:
    return dataclasses.asdict(c)


def dump_config(c: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(c), f, indent=2, sort_keys=True)
        f.write("\n")


def derive_cost_params(c: ExperimentConfig) -> CostParams:
    """Instantiate the analytic cost symbols from the experiment itself.

    Sizes are in bytes (8 per scalar), the activation size at the cut counts
    prompt rows, and the prompt is folded into the model up/down terms because
    the simulator really does ship it.
    """
    head_n, body_n, tail_n = segment_param_counts(c.model, c.split)
    total = param_count(c.model)
    tokens = c.n_prompts + c.model.seq_len
    return CostParams(
        model_size=total * 8,
        dataset_size=c.data.n_samples / c.n_clients,
        clients=c.clients_per_round,
        local_epochs=c.local_epochs,
        head_fraction=head_n / total,
        body_fraction=body_n / total,
        prune_fraction=c.prune_fraction,
        cut_layer_size=tokens * c.model.d_model * 8,
        forward_fraction=c.compute.forward_fraction,
        client_power=c.compute.client_power,
        server_power=c.compute.server_power,
        rate=c.link.uplink_rate,
        prompt_size=c.n_prompts * c.model.d_model * 8,
        include_prompt=True,
    )
