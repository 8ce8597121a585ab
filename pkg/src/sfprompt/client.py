"""Client-side protocol: per-round pruning, local-loss self-update on the
head+tail path, then the four-message split-training exchange per batch.

Message phases are strictly ordered; calling anything out of turn raises
ProtocolError. Raw samples and labels never leave this object: outbound
payloads are cut-layer activations, their gradients, and the trainable
parameters at upload time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset, el2n_scores, prune
from .model import (
    ForwardRun,
    ModelConfig,
    ParamSet,
    PromptParams,
    connect_head_tail,
    head_forward,
    tail_forward,
)


class ProtocolError(RuntimeError):
    """A client message was produced or consumed out of phase order."""


@dataclass
class SmashedMsg:
    client_id: int
    round: int
    batch_id: int
    activations: np.ndarray
    byte_size: int


@dataclass
class GradMsg:
    client_id: int
    round: int
    batch_id: int
    gradients: np.ndarray
    byte_size: int


@dataclass
class _InFlight:
    batch_id: int
    head_run: ForwardRun
    labels: np.ndarray
    awaiting: str  # "body_output" then "prompt_grad"


# round phases, in order
_IDLE = "idle"
_RECEIVED = "received"
_PRUNED = "pruned"
_LOCAL_DONE = "local_done"
_SPLIT_DONE = "split_done"


class Client:
    """One participant. Holds its local dataset, the frozen head, and the
    trainable tail + prompt received from the server each round."""

    def __init__(self, client_id: int, dataset: Dataset, head: ParamSet, config: ModelConfig):
        self.client_id = client_id
        self.dataset = dataset
        self.head = head  # shared, frozen; distributed once
        self.config = config
        self.tail: ParamSet | None = None
        self.prompt: PromptParams | None = None
        self.pruned: Dataset | None = None
        self.round = 0
        self._phase = _IDLE
        self._inflight: _InFlight | None = None
        self._batch_starts: list[int] = []
        self._next_batch = 0
        self._split_batch_size = 0
        # gradient snapshots from the most recent split batch, for diagnostics
        self.last_tail_grads: dict[str, np.ndarray] | None = None
        self.last_prompt_grad: np.ndarray | None = None

    @property
    def n_k(self) -> int:
        """Weight reported at upload: the full local dataset size."""
        return len(self.dataset)

    def receive_round(self, round_: int, tail: ParamSet, prompt: PromptParams) -> None:
        if self._inflight is not None:
            raise ProtocolError(f"client {self.client_id}: new round while a batch is in flight")
        self.round = round_
        self.tail = tail.copy()
        self.prompt = prompt.copy()
        self._phase = _RECEIVED
        self._next_batch = 0
        self._batch_starts = []

    # ----- phase 1 -------------------------------------------------------

    def prune_dataset(self, gamma: float, with_prompt: bool = False, once: bool = False) -> int:
        if self._phase != _RECEIVED:
            raise ProtocolError(f"client {self.client_id}: prune out of order (phase={self._phase})")
        if once and self.pruned is not None:
            self._phase = _PRUNED
            return len(self.pruned)
        scores = el2n_scores(
            self.head, self.tail, self.dataset, self.config,
            prompt=self.prompt if with_prompt else None,
        )
        self.pruned = prune(self.dataset, scores, gamma)
        self._phase = _PRUNED
        return len(self.pruned)

    def local_loss_update(self, epochs: int, lr_local: float, batch_size: int) -> list[float]:
        """Self-update on the connected head+tail path over the FULL local set.

        Returns the mean minibatch loss of each epoch. No traffic is generated.
        """
        if self._phase != _PRUNED:
            raise ProtocolError(f"client {self.client_id}: local update out of order (phase={self._phase})")
        if epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {epochs}")
        if len(self.dataset) == 0:
            raise ValueError("local dataset is empty")
        epoch_losses: list[float] = []
        for _ in range(epochs):
            losses = []
            for start in range(0, len(self.dataset), batch_size):
                batch = self.dataset.features[start:start + batch_size]
                labels = self.dataset.labels[start:start + batch_size]
                _, run = connect_head_tail(self.head, self.tail, self.prompt, batch, self.config)
                loss = T.cross_entropy(run.out_var, labels)
                run.tape.backward(loss, 1.0)
                T.sgd_step(self.tail, run.param_grads(self.tail), lr_local)
                if self.prompt.n_prompts > 0:
                    self.prompt.vectors -= lr_local * run.prompt_grad
                losses.append(float(loss.value))
            epoch_losses.append(float(np.mean(losses)))
        self._phase = _LOCAL_DONE
        return epoch_losses

    # ----- phase 2 -------------------------------------------------------

    def start_split_epoch(self, batch_size: int) -> int:
        """Plan one pass over the pruned subset; returns the batch count."""
        if self._phase != _LOCAL_DONE:
            raise ProtocolError(f"client {self.client_id}: split start out of order (phase={self._phase})")
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self._split_batch_size = batch_size
        self._batch_starts = list(range(0, len(self.pruned), batch_size))
        self._next_batch = 0
        return len(self._batch_starts)

    def forward_update(self) -> SmashedMsg:
        if self._phase != _LOCAL_DONE or not self._batch_starts:
            raise ProtocolError(f"client {self.client_id}: split forward before local update")
        if self._inflight is not None:
            raise ProtocolError(f"client {self.client_id}: batch {self._inflight.batch_id} still in flight")
        if self._next_batch >= len(self._batch_starts):
            raise ProtocolError(f"client {self.client_id}: split epoch already finished")
        start = self._batch_starts[self._next_batch]
        batch = self.pruned.features[start:start + self._split_batch_size]
        labels = self.pruned.labels[start:start + self._split_batch_size]
        smashed, run = head_forward(self.head, self.prompt, batch, self.config)
        self._inflight = _InFlight(self._next_batch, run, labels, awaiting="body_output")
        return SmashedMsg(self.client_id, self.round, self._next_batch, smashed, smashed.size * 8)

    def backward_update(self, smashed_prime: np.ndarray, lr_global: float) -> GradMsg:
        """Run the tail on the body output, update the tail, and return the
        loss gradient at the body output."""
        fl = self._inflight
        if fl is None or fl.awaiting != "body_output":
            raise ProtocolError(f"client {self.client_id}: backward without a matching forward")
        smashed_prime = T.as_array(smashed_prime)
        expected = self._inflight.head_run.output.shape
        if smashed_prime.shape != expected:
            raise ValueError(f"body output shape {smashed_prime.shape} does not match {expected}")
        _, run = tail_forward(self.tail, smashed_prime, self.config)
        loss = T.cross_entropy(run.out_var, fl.labels)
        run.tape.backward(loss, 1.0)
        grads = run.param_grads(self.tail)
        self.last_tail_grads = grads
        T.sgd_step(self.tail, grads, lr_global)
        fl.awaiting = "prompt_grad"
        g = run.input_grad
        return GradMsg(self.client_id, self.round, fl.batch_id, g, g.size * 8)

    def prompt_update(self, grad_from_server: np.ndarray, lr_global: float) -> None:
        """Push the server's gradient through the retained head tape down to the prompt."""
        fl = self._inflight
        if fl is None or fl.awaiting != "prompt_grad":
            raise ProtocolError(f"client {self.client_id}: prompt update without a pending gradient")
        grad = T.as_array(grad_from_server)
        if grad.shape != fl.head_run.output.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match smashed shape {fl.head_run.output.shape}")
        fl.head_run.backward(grad)
        gp = fl.head_run.prompt_grad
        self.last_prompt_grad = gp
        if gp is not None and self.prompt.n_prompts > 0:
            self.prompt.vectors -= lr_global * gp
        self._inflight = None
        self._next_batch += 1
        if self._next_batch >= len(self._batch_starts):
            self._phase = _SPLIT_DONE

    # ----- phase 3 -------------------------------------------------------

    def upload(self) -> tuple[ParamSet, PromptParams, int]:
        if self._phase != _SPLIT_DONE:
            raise ProtocolError(f"client {self.client_id}: upload before split training finished")
        self._phase = _IDLE
        return self.tail.copy(), self.prompt.copy(), self.n_k

    @staticmethod
    def upload_bytes(tail: ParamSet, prompt: PromptParams) -> int:
        return (tail.n_params + prompt.n_params) * 8
