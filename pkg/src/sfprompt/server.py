"""Server side: model splitting and distribution, client selection, the frozen
body forward/backward service, weighted aggregation, and the round loop."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import simnet
from .client import Client, GradMsg, SmashedMsg
from .config import ExperimentConfig
from .data import Dataset, gen_synthetic, partition_dirichlet, partition_iid
from .model import (
    ForwardRun,
    ModelConfig,
    ModelPartition,
    ParamSet,
    PromptParams,
    body_forward,
    build_model,
    full_forward,
    init_prompt,
    recompose,
    split_model,
)
from .simnet import DOWN, UP, LinkConfig, RoundPipeline, SimClock, TrafficLedger


def select_clients(client_ids, k: int, round_: int, seed: int) -> list[int]:
    """Uniform sample without replacement, deterministic per (seed, round)."""
    ids = sorted(client_ids)
    if k > len(ids):
        raise ValueError(f"cannot select {k} clients from a pool of {len(ids)}")
    rng = np.random.default_rng([seed, round_])
    picked = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in picked)


class BodyService:
    """Runs the frozen body for clients, retaining each forward tape until the
    matching gradient comes back."""

    def __init__(self, body: ParamSet, config: ModelConfig):
        self.body = body
        self.config = config
        self._pending: dict[tuple[int, int], ForwardRun] = {}

    def forward(self, msg: SmashedMsg) -> np.ndarray:
        key = (msg.client_id, msg.batch_id)
        if key in self._pending:
            raise ValueError(f"duplicate in-flight batch {key}")
        out, run = body_forward(self.body, msg.activations, self.config)
        self._pending[key] = run
        return out

    def backward(self, msg: GradMsg) -> np.ndarray:
        key = (msg.client_id, msg.batch_id)
        run = self._pending.pop(key, None)
        if run is None:
            raise ValueError(f"no retained tape for batch {key}")
        run.backward(msg.gradients)
        return run.input_grad


def aggregate(
    uploads: list[tuple[ParamSet, PromptParams, int]], mode: str = "weighted"
) -> tuple[ParamSet, PromptParams]:
    """Combine uploads into the new global tail and prompt.

    mode="weighted" weights by sample counts n_k / N; mode="uniform" uses 1/K.
    Uploads are reordered by content before summing, so the result is
    bit-identical under any permutation of the inputs, and aggregating k
    copies of one upload returns it exactly.
    """
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    if mode not in ("weighted", "uniform"):
        raise ValueError(f"mode must be 'weighted' or 'uniform', got {mode!r}")
    names = uploads[0][0].names()
    pshape = uploads[0][1].vectors.shape
    for tail, prompt, _ in uploads[1:]:
        if tail.names() != names or any(tail[n].shape != uploads[0][0][n].shape for n in names):
            raise ValueError("upload tail shapes differ")
        if prompt.vectors.shape != pshape:
            raise ValueError("upload prompt shapes differ")

    def content_key(upload):
        tail, prompt, n_k = upload
        h = hashlib.sha256()
        for n in names:
            h.update(tail[n].tobytes())
        h.update(prompt.vectors.tobytes())
        return (-n_k, h.digest())

    ordered = sorted(uploads, key=content_key)
    if mode == "uniform":
        weights = [1.0 / len(ordered)] * len(ordered)
    else:
        total = sum(n_k for _, _, n_k in ordered)
        weights = [n_k / total for _, _, n_k in ordered]

    anchor_tail, anchor_prompt, _ = ordered[0]
    out_tail = anchor_tail.copy()
    for name in names:
        acc = np.zeros_like(anchor_tail[name])
        for w, (tail, _, _) in zip(weights, ordered):
            acc += w * (tail[name] - anchor_tail[name])
        out_tail[name][...] = anchor_tail[name] + acc
    acc = np.zeros_like(anchor_prompt.vectors)
    for w, (_, prompt, _) in zip(weights, ordered):
        acc += w * (prompt.vectors - anchor_prompt.vectors)
    return out_tail, PromptParams(anchor_prompt.vectors + acc)


def evaluate(
    partition: ModelPartition, prompt: PromptParams, test: Dataset, batch_size: int = 256
) -> float:
    """Accuracy of the recomposed model; argmax ties go to the lowest class index."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    full = recompose(partition)
    correct = 0
    for start in range(0, len(test), batch_size):
        batch = test.features[start:start + batch_size]
        labels = test.labels[start:start + batch_size]
        logits, _ = full_forward(full, prompt, batch, partition.config)
        correct += int((np.argmax(logits, axis=1) == labels).sum())
    return correct / len(test)


@dataclass(frozen=True)
class RoundReport:
    """Per-round metrics. mean_local_loss averages the selected clients' final
    self-update epoch (NaN when local_epochs == 0); byte counts are payload only."""

    round: int
    selected: tuple[int, ...]
    pruned_sizes: tuple[int, ...]
    mean_local_loss: float
    test_accuracy: float
    bytes_up: int
    bytes_down: int
    latency_s: float


@dataclass
class SimulationResult:
    config: ExperimentConfig
    initial_model: ParamSet
    final_model: ParamSet
    partition: ModelPartition
    final_tail: ParamSet
    final_prompt: PromptParams
    initial_prompt: PromptParams
    reports: list[RoundReport]
    ledger: TrafficLedger
    clock: SimClock
    initial_accuracy: float
    final_accuracy: float
    train: Dataset
    test: Dataset
    client_sizes: list[int]


def run_training(config: ExperimentConfig) -> SimulationResult:
    """Execute the full three-phase protocol for config.rounds global rounds."""
    mc = config.model
    seed = config.seed
    full = build_model(mc, seed)
    initial_model = full.copy()
    partition = split_model(full, mc, config.split)
    prompt = init_prompt(config.n_prompts, mc.d_model, seed + 1)
    initial_prompt = prompt.copy()

    train = gen_synthetic(config.data.n_samples, mc, config.data.class_separation, seed + 2)
    test = gen_synthetic(config.data.test_samples, mc, config.data.class_separation, seed + 3, means_seed=seed + 2)
    if config.partition.kind == "iid":
        plan = partition_iid(train, config.n_clients, seed + 4)
    else:
        plan = partition_dirichlet(train, config.n_clients, config.partition.concentration, seed + 4)

    clients = {
        k: Client(k, train.subset(plan.client_indices[k]), partition.head, mc)
        for k in range(config.n_clients)
    }
    body = BodyService(partition.body, mc)
    ledger = TrafficLedger()
    clock = SimClock()
    link: LinkConfig = config.link
    p_c, p_s, beta = config.compute.client_power, config.compute.server_power, config.compute.forward_fraction

    n_head = partition.head.n_params
    n_body = partition.body.n_params
    n_tail = partition.tail.n_params
    n_prompt = prompt.n_params
    head_bytes = n_head * 8

    global_tail = partition.tail.copy()
    global_prompt = prompt.copy()
    initial_accuracy = evaluate(partition, initial_prompt, test)

    reports: list[RoundReport] = []
    for r in range(1, config.rounds + 1):
        selected = select_clients(clients.keys(), config.clients_per_round, r, seed + 5)
        K = len(selected)
        pipe = RoundPipeline()

        if r == 1:
            # the frozen head goes out once, to every client that may ever participate
            head_dist_s = 0.0
            for k in sorted(clients):
                head_dist_s = simnet.record_transfer(
                    ledger, clock, link, r, DOWN, "head_dist", head_bytes,
                    active_clients=config.n_clients, actor="server",
                )

        pruned_sizes: list[int] = []
        local_losses: list[float] = []
        uploads = []
        for k in selected:
            client = clients[k]
            dist_s = simnet.record_transfer(
                ledger, clock, link, r, DOWN, "model_dist",
                Client.upload_bytes(global_tail, global_prompt),
                active_clients=K, actor="server",
            )
            if r == 1:
                dist_s += head_dist_s
            pipe.dist_s.append(dist_s)
            client.receive_round(r, global_tail, global_prompt)

            n_pruned = client.prune_dataset(
                config.prune_fraction, with_prompt=config.prune_with_prompt, once=config.prune_once
            )
            pruned_sizes.append(n_pruned)
            score_params = n_head + n_tail + (n_prompt if config.prune_with_prompt else 0)
            pre_s = simnet.record_compute(clock, r, f"client{k}", beta * client.n_k * score_params, p_c)

            losses = client.local_loss_update(config.local_epochs, config.lr_local, config.batch_size)
            local_losses.append(losses[-1] if losses else float("nan"))
            pipe.local_update_s.append(simnet.record_compute(
                clock, r, f"client{k}",
                config.local_epochs * client.n_k * (n_head + n_tail + n_prompt), p_c,
            ))

            up_s = tail_s = mid_s = server_s = 0.0
            n_batches = client.start_split_epoch(config.batch_size)
            for _ in range(n_batches):
                smashed = client.forward_update()
                b = smashed.activations.shape[0]
                pre_s += simnet.record_compute(clock, r, f"client{k}", beta * b * (n_head + n_prompt), p_c)
                up_s += simnet.record_transfer(
                    ledger, clock, link, r, UP, "smashed_up", smashed.byte_size,
                    active_clients=K, actor=f"client{k}",
                )
                smashed_prime = body.forward(smashed)
                server_s += simnet.record_compute(clock, r, "server", beta * b * n_body, p_s)
                mid_s += simnet.record_transfer(
                    ledger, clock, link, r, DOWN, "smashed_down", smashed_prime.size * 8,
                    active_clients=K, actor="server",
                )
                grad_msg = client.backward_update(smashed_prime, config.lr_global)
                tail_s += simnet.record_compute(clock, r, f"client{k}", b * n_tail, p_c)
                mid_s += simnet.record_transfer(
                    ledger, clock, link, r, UP, "grad_up", grad_msg.byte_size,
                    active_clients=K, actor=f"client{k}",
                )
                grad_back = body.backward(grad_msg)
                server_s += simnet.record_compute(clock, r, "server", (1 - beta) * b * n_body, p_s)
                mid_s += simnet.record_transfer(
                    ledger, clock, link, r, DOWN, "grad_down", grad_back.size * 8,
                    active_clients=K, actor="server",
                )
                client.prompt_update(grad_back, config.lr_global)
                tail_s += simnet.record_compute(clock, r, f"client{k}", (1 - beta) * b * (n_head + n_prompt), p_c)

            pipe.client_pre_s.append(pre_s)
            pipe.up_smashed_s.append(up_s)
            pipe.client_tail_s.append(tail_s)
            pipe.mid_transfer_s.append(mid_s)
            pipe.server_s.append(server_s)

            tail_up, prompt_up, n_k = client.upload()
            pipe.upload_s.append(simnet.record_transfer(
                ledger, clock, link, r, UP, "upload", Client.upload_bytes(tail_up, prompt_up),
                active_clients=K, actor=f"client{k}",
            ))
            uploads.append((tail_up, prompt_up, n_k))

        global_tail, global_prompt = aggregate(uploads, config.aggregation)
        eval_partition = ModelPartition(partition.head, partition.body, global_tail, mc, config.split)
        accuracy = evaluate(eval_partition, global_prompt, test)

        clock.set_round_latency(r, simnet.pipelined_round_latency(pipe))
        ledger.close_round(r)
        clock.close_round(r)
        totals = simnet.round_summary(ledger, clock, r)
        reports.append(RoundReport(
            round=r,
            selected=tuple(selected),
            pruned_sizes=tuple(pruned_sizes),
            mean_local_loss=float(np.mean(local_losses)) if local_losses else float("nan"),
            test_accuracy=accuracy,
            bytes_up=totals.bytes_up,
            bytes_down=totals.bytes_down,
            latency_s=totals.latency_s,
        ))

    final_partition = ModelPartition(partition.head, partition.body, global_tail, mc, config.split)
    final_accuracy = reports[-1].test_accuracy if reports else initial_accuracy
    return SimulationResult(
        config=config,
        initial_model=initial_model,
        final_model=recompose(final_partition),
        partition=final_partition,
        final_tail=global_tail,
        final_prompt=global_prompt,
        initial_prompt=initial_prompt,
        reports=reports,
        ledger=ledger,
        clock=clock,
        initial_accuracy=initial_accuracy,
        final_accuracy=final_accuracy,
        train=train,
        test=test,
        client_sizes=plan.sizes(),
    )
