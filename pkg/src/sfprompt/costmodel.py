"""Closed-form per-round cost triples for the three training strategies.

All formulas are unit-agnostic: pass sizes in bytes with rates in bytes/s, or
MB with MB/s, as long as one expression never mixes units. `prune_fraction`
is the share of each local dataset REMOVED before split training; the
formulas internally use the retained share (1 - prune_fraction), which is the
convention the per-round traffic terms scale by.
"""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class CostParams:
    model_size: float        # |W|
    dataset_size: float      # |D|, samples per client
    clients: int             # K selected per round
    local_epochs: int        # U
    head_fraction: float     # alpha
    body_fraction: float     # tau
    prune_fraction: float    # gamma, share removed
    cut_layer_size: float    # q, per-sample size at the cut
    forward_fraction: float  # beta, forward share of one update
    client_power: float      # P_C
    server_power: float      # P_S
    rate: float              # R, shared up/down link rate
    prompt_size: float = 0.0
    include_prompt: bool = False  # fold prompt into the up/down model terms

    def __post_init__(self):
        for name in ("head_fraction", "body_fraction", "prune_fraction", "forward_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.head_fraction + self.body_fraction >= 1.0:
            raise ValueError(
                f"head_fraction + body_fraction must be < 1 (the tail holds the classifier), "
                f"got {self.head_fraction} + {self.body_fraction}"
            )
        for name in ("model_size", "dataset_size", "client_power", "server_power", "rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.cut_layer_size < 0 or self.prompt_size < 0:
            raise ValueError("cut_layer_size and prompt_size must be >= 0")

    @property
    def retained(self) -> float:
        return 1.0 - self.prune_fraction

    @property
    def tail_fraction(self) -> float:
        return 1.0 - self.head_fraction - self.body_fraction


@dataclass(frozen=True)
class CostTriple:
    compute_per_client: float
    comm_total: float
    latency: float

    def __post_init__(self):
        if min(self.compute_per_client, self.comm_total, self.latency) < 0:
            raise ValueError("cost components must be >= 0")


def fl_costs(p: CostParams) -> CostTriple:
    """Full-model exchange: every round moves the whole model both ways."""
    W, D, K, U = p.model_size, p.dataset_size, p.clients, p.local_epochs
    return CostTriple(
        compute_per_client=D * W,
        comm_total=2 * W * K,
        latency=2 * W * K / p.rate + D * W * U / p.client_power,
    )


def sfl_costs(p: CostParams) -> CostTriple:
    """Split training without pruning or self-update: per-epoch activation traffic."""
    W, D, K, U = p.model_size, p.dataset_size, p.clients, p.local_epochs
    a, t, q = p.head_fraction, p.body_fraction, p.cut_layer_size
    return CostTriple(
        compute_per_client=(1 - t) * D * W,
        comm_total=(4 * q * D + 2 * (1 - a - t) * W) * K,
        latency=(
            (4 * q * D + 2 * (1 - a - t) * W) * K / p.rate
            + (1 - t) * D * W * U / p.client_power
            + t * D * W * K * U / p.server_power
        ),
    )


def sfprompt_costs(p: CostParams) -> CostTriple:
    """Split training on the retained subset, with self-update overlapping the server leg."""
    W, D, K, U = p.model_size, p.dataset_size, p.clients, p.local_epochs
    a, t, q, b, g = p.head_fraction, p.body_fraction, p.cut_layer_size, p.forward_fraction, p.retained
    model_term = 2 * (1 - a - t) * W
    if p.include_prompt:
        model_term += 2 * p.prompt_size
    client_branch = (1 - t) * (1 - b) * g * D * W * U / p.client_power
    server_branch = (
        t * g * D * W * K / p.server_power
        + (1 - a - t) * (1 - b) * g * D * W / p.client_power
        + 2 * q * g * D / p.rate
    )
    return CostTriple(
        compute_per_client=(1 - t) * g * D * W,
        comm_total=(4 * q * g * D + model_term) * K,
        latency=(
            (2 * q * g * D + 2 * (1 - a - t) * W) * K / p.rate
            + a * b * g * D * W / p.client_power
            + max(client_branch, server_branch)
        ),
    )


def crossover_model_size(p: CostParams) -> float:
    """Model size above which the pruned split strategy moves fewer bytes than
    full-model exchange. Uses the prompt-free traffic terms."""
    denom = p.head_fraction + p.body_fraction
    if denom == 0.0:
        raise ValueError("head_fraction + body_fraction must be > 0 for a crossover to exist")
    return 2.0 * p.cut_layer_size * p.retained * p.dataset_size / denom


SWEEP_AXES = ("local_epochs", "model_size", "prune", "rounds")

METHODS = ("fl", "sfl", "sfprompt")


@dataclass(frozen=True)
class SweepRow:
    method: str
    axis: str
    axis_value: float
    compute: float
    comm: float
    latency: float


def _triples(p: CostParams) -> dict[str, CostTriple]:
    return {"fl": fl_costs(p), "sfl": sfl_costs(p), "sfprompt": sfprompt_costs(p)}


def cost_sweep(p: CostParams, axis: str, values) -> list[SweepRow]:
    """Evaluate the three methods along one axis.

    local_epochs: split-method traffic repeats once per epoch, so their comm
    term scales the activation traffic by U while full-model exchange stays
    flat (the self-update epochs of the pruned strategy are local and free).
    rounds: cumulative cost = per-round triple times the round count.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep range is empty")
    rows: list[SweepRow] = []
    for v in values:
        if axis == "local_epochs":
            u = int(v)
            pv = replace(p, local_epochs=u)
            triples = _triples(pv)
            sfl = triples["sfl"]
            extra = 4 * p.cut_layer_size * p.dataset_size * (u - 1) * p.clients
            triples["sfl"] = CostTriple(sfl.compute_per_client, sfl.comm_total + max(extra, 0.0), sfl.latency)
        elif axis == "model_size":
            triples = _triples(replace(p, model_size=float(v)))
        elif axis == "prune":
            triples = _triples(replace(p, prune_fraction=float(v)))
        else:  # rounds
            base = _triples(p)
            triples = {
                m: CostTriple(tr.compute_per_client * v, tr.comm_total * v, tr.latency * v)
                for m, tr in base.items()
            }
        for method in METHODS:
            tr = triples[method]
            rows.append(SweepRow(method, axis, float(v), tr.compute_per_client, tr.comm_total, tr.latency))
    return rows
