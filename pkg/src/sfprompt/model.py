"""Small transformer classifier, partitioned into head / body / tail segments.

The architecture is fixed: a per-token linear embedding, `n_layers` pre-norm
blocks (single-head self-attention + a 2-layer GELU MLP, hidden width
2*d_model, residual connections), then mean-pooling over all tokens and a
linear classifier. Constant width d_model everywhere, so the head output can
feed either the body or the tail directly.

Learnable prompt rows are prepended to the embedded token sequence before the
first block; they attend and are attended to like data tokens, and they are
included in the pooling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamSet, Tape, Var

CHECKPOINT_MAGIC = b"SFPM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int
    d_model: int
    n_layers: int
    n_classes: int
    input_dim: int

    def __post_init__(self):
        for name in ("seq_len", "d_model", "n_layers", "n_classes", "input_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"model config field {name} must be a positive int, got {v!r}")
        if self.n_layers < 2:
            raise ValueError(f"n_layers must be >= 2 so head and body each get a block, got {self.n_layers}")


@dataclass(frozen=True)
class SplitSpec:
    """Head owns blocks [0, cut1), body [cut1, cut2), tail [cut2, n_layers)."""

    cut1: int
    cut2: int

    def validate(self, n_layers: int) -> None:
        if not (0 < self.cut1 < self.cut2 <= n_layers):
            raise ValueError(
                f"invalid split cut1={self.cut1}, cut2={self.cut2} for n_layers={n_layers}: "
                "need 0 < cut1 < cut2 <= n_layers"
            )


@dataclass
class PromptParams:
    """Learnable rows prepended to the embedded input sequence."""

    vectors: np.ndarray  # (n_prompts, d_model)

    def __post_init__(self):
        self.vectors = T.as_array(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError(f"prompt vectors must be 2-D (n_prompts, d_model), got {self.vectors.shape}")

    @property
    def n_prompts(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_params(self) -> int:
        return self.vectors.size

    @property
    def nbytes(self) -> int:
        return self.vectors.nbytes

    def copy(self) -> "PromptParams":
        return PromptParams(self.vectors.copy())


def init_prompt(n_prompts: int, d_model: int, seed: int, init_scale: float = 0.02) -> PromptParams:
    if n_prompts < 0:
        raise ValueError(f"n_prompts must be >= 0, got {n_prompts}")
    rng = np.random.default_rng(seed)
    return PromptParams(init_scale * rng.standard_normal((n_prompts, d_model)))


def param_layout(config: ModelConfig):
    """Yield (name, shape) in declaration order; also fixes checkpoint order."""
    d = config.d_model
    yield "embed.W", (config.input_dim, d)
    yield "embed.b", (d,)
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        yield p + "ln1.g", (d,)
        yield p + "ln1.b", (d,)
        for m in ("q", "k", "v", "o"):
            yield p + f"attn.W{m}", (d, d)
            yield p + f"attn.b{m}", (d,)
        yield p + "ln2.g", (d,)
        yield p + "ln2.b", (d,)
        yield p + "mlp.W1", (d, 2 * d)
        yield p + "mlp.b1", (2 * d,)
        yield p + "mlp.W2", (2 * d, d)
        yield p + "mlp.b2", (d,)
    yield "classifier.W", (d, config.n_classes)
    yield "classifier.b", (config.n_classes,)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(config))


def segment_param_counts(config: ModelConfig, spec: SplitSpec) -> tuple[int, int, int]:
    """(head, body, tail) scalar parameter counts for a split, from the layout alone."""
    spec.validate(config.n_layers)
    counts = [0, 0, 0]
    for name, shape in param_layout(config):
        if name.startswith("embed."):
            seg = 0
        elif name.startswith("classifier."):
            seg = 2
        else:
            block = int(name.split(".")[1])
            seg = 0 if block < spec.cut1 else (1 if block < spec.cut2 else 2)
        counts[seg] += int(np.prod(shape))
    return tuple(counts)


def build_model(config: ModelConfig, seed: int) -> ParamSet:
    """Deterministic init: 1/sqrt(fan_in) normal weights, unit norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for name, shape in param_layout(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("W"):
            fan_in = shape[0]
            params.add(name, rng.standard_normal(shape) / np.sqrt(fan_in))
        elif leaf == "g":
            params.add(name, np.ones(shape))
        else:
            params.add(name, np.zeros(shape))
    return params


@dataclass
class ModelPartition:
    """The three parameter segments. Head and body are frozen, tail is trainable."""

    head: ParamSet
    body: ParamSet
    tail: ParamSet
    config: ModelConfig
    split: SplitSpec

    @property
    def total_params(self) -> int:
        return self.head.n_params + self.body.n_params + self.tail.n_params

    @property
    def head_fraction(self) -> float:
        return self.head.n_params / self.total_params

    @property
    def body_fraction(self) -> float:
        return self.body.n_params / self.total_params


def split_model(model: ParamSet, config: ModelConfig, spec: SplitSpec) -> ModelPartition:
    spec.validate(config.n_layers)

    def segment_for(name: str) -> str:
        if name.startswith("embed."):
            return "head"
        if name.startswith("classifier."):
            return "tail"
        block = int(name.split(".")[1])
        if block < spec.cut1:
            return "head"
        if block < spec.cut2:
            return "body"
        return "tail"

    segs = {"head": ParamSet(), "body": ParamSet(), "tail": ParamSet()}
    for name, value in model.items():
        frozen = segment_for(name) != "tail"
        segs[segment_for(name)].add(name, value, frozen=frozen)
    return ModelPartition(segs["head"], segs["body"], segs["tail"], config, spec)


def recompose(partition: ModelPartition) -> ParamSet:
    """Reassemble the full parameter set in declaration order."""
    full = ParamSet()
    for name, _ in param_layout(partition.config):
        for seg in (partition.head, partition.body, partition.tail):
            if name in seg:
                full.add(name, seg[name].copy())
                break
        else:
            raise ValueError(f"parameter {name!r} missing from partition")
    return full


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardRun:
    """Handle onto a live tape: the output plus the leaves needed for backward."""

    tape: Tape
    out_var: Var
    param_vars: dict[str, Var]
    input_var: Var | None = None
    prompt_var: Var | None = None
    label_order: list[str] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.out_var.value

    def backward(self, out_grad) -> None:
        self.tape.backward(self.out_var, out_grad)

    def param_grads(self, params: ParamSet, trainable_only: bool = True) -> dict[str, np.ndarray]:
        names = params.trainable_names() if trainable_only else params.names()
        return {n: self.param_vars[n].grad_or_zero() for n in names if n in self.param_vars}

    @property
    def input_grad(self) -> np.ndarray | None:
        return None if self.input_var is None else self.input_var.grad_or_zero()

    @property
    def prompt_grad(self) -> np.ndarray | None:
        return None if self.prompt_var is None else self.prompt_var.grad_or_zero()


def _leaves(tape: Tape, *param_sets: ParamSet) -> dict[str, Var]:
    out: dict[str, Var] = {}
    for ps in param_sets:
        for name, value in ps.items():
            out[name] = tape.leaf(value, name)
    return out


def _block_indices(params: ParamSet) -> list[int]:
    idx = {int(n.split(".")[1]) for n in params.names() if n.startswith("blocks.")}
    return sorted(idx)


def _block(x: Var, pv: dict[str, Var], i: int, d_model: int) -> Var:
    p = f"blocks.{i}."
    h = T.layer_norm(x, pv[p + "ln1.g"], pv[p + "ln1.b"])
    q = h @ pv[p + "attn.Wq"] + pv[p + "attn.bq"]
    k = h @ pv[p + "attn.Wk"] + pv[p + "attn.bk"]
    v = h @ pv[p + "attn.Wv"] + pv[p + "attn.bv"]
    scores = T.scale(q @ T.transpose_last(k), 1.0 / np.sqrt(d_model))
    ctx = T.softmax(scores) @ v
    x = x + (ctx @ pv[p + "attn.Wo"] + pv[p + "attn.bo"])
    h2 = T.layer_norm(x, pv[p + "ln2.g"], pv[p + "ln2.b"])
    m = T.gelu(h2 @ pv[p + "mlp.W1"] + pv[p + "mlp.b1"]) @ pv[p + "mlp.W2"] + pv[p + "mlp.b2"]
    return x + m


def _check_batch(batch: np.ndarray, config: ModelConfig) -> np.ndarray:
    batch = T.as_array(batch)
    if batch.ndim != 3 or batch.shape[1] != config.seq_len or batch.shape[2] != config.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match (B, seq_len={config.seq_len}, "
            f"input_dim={config.input_dim})"
        )
    return batch


def _embed_with_prompt(tape, pv, prompt: PromptParams | None, batch: np.ndarray):
    """Embed the batch and prepend prompt rows. Returns (tokens Var, input Var, prompt Var)."""
    xin = tape.leaf(batch, "_input")
    tokens = xin @ pv["embed.W"] + pv["embed.b"]
    prompt_var = None
    if prompt is not None and prompt.n_prompts > 0:
        prompt_var = tape.leaf(prompt.vectors, "_prompt")
        tokens = T.concat_tokens(T.broadcast_rows(prompt_var, batch.shape[0]), tokens)
    return tokens, xin, prompt_var


def head_forward(
    head: ParamSet, prompt: PromptParams | None, batch: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, ForwardRun]:
    """Embed + prompt-prepend + head blocks. The returned run keeps the tape live
    so a gradient arriving later can be pushed back down to the prompt."""
    batch = _check_batch(batch, config)
    tape = Tape()
    pv = _leaves(tape, head)
    x, xin, prompt_var = _embed_with_prompt(tape, pv, prompt, batch)
    for i in _block_indices(head):
        x = _block(x, pv, i, config.d_model)
    run = ForwardRun(tape, x, pv, input_var=xin, prompt_var=prompt_var)
    return x.value, run


def body_forward(body: ParamSet, smashed: np.ndarray, config: ModelConfig) -> tuple[np.ndarray, ForwardRun]:
    blocks = _block_indices(body)
    if not blocks:
        raise ValueError("body has no transformer blocks")
    smashed = T.as_array(smashed)
    if smashed.ndim != 3 or smashed.shape[2] != config.d_model:
        raise ValueError(f"smashed shape {smashed.shape} does not match (B, tokens, d_model={config.d_model})")
    tape = Tape()
    pv = _leaves(tape, body)
    x = tape.leaf(smashed, "_input")
    out = x
    for i in blocks:
        out = _block(out, pv, i, config.d_model)
    run = ForwardRun(tape, out, pv, input_var=x)
    return out.value, run


def tail_forward(tail: ParamSet, smashed: np.ndarray, config: ModelConfig) -> tuple[np.ndarray, ForwardRun]:
    """Optional tail blocks, then mean-pool over every token and classify."""
    smashed = T.as_array(smashed)
    if smashed.ndim != 3 or smashed.shape[2] != config.d_model:
        raise ValueError(f"smashed shape {smashed.shape} does not match (B, tokens, d_model={config.d_model})")
    tape = Tape()
    pv = _leaves(tape, tail)
    x = tape.leaf(smashed, "_input")
    out = x
    for i in _block_indices(tail):
        out = _block(out, pv, i, config.d_model)
    pooled = T.mean_tokens(out)
    logits = pooled @ pv["classifier.W"] + pv["classifier.b"]
    run = ForwardRun(tape, logits, pv, input_var=x)
    return logits.value, run


def _stacked_forward(
    param_sets: list[ParamSet], prompt: PromptParams | None, batch: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, ForwardRun]:
    batch = _check_batch(batch, config)
    tape = Tape()
    pv = _leaves(tape, *param_sets)
    x, xin, prompt_var = _embed_with_prompt(tape, pv, prompt, batch)
    for i in sorted({int(n.split(".")[1]) for n in pv if n.startswith("blocks.")}):
        x = _block(x, pv, i, config.d_model)
    logits = T.mean_tokens(x) @ pv["classifier.W"] + pv["classifier.b"]
    run = ForwardRun(tape, logits, pv, input_var=xin, prompt_var=prompt_var)
    return logits.value, run


def full_forward(
    model: ParamSet, prompt: PromptParams | None, batch: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, ForwardRun]:
    """The unsplit reference path: embed -> all blocks -> pool -> classify."""
    return _stacked_forward([model], prompt, batch, config)


def connect_head_tail(
    head: ParamSet, tail: ParamSet, prompt: PromptParams | None, batch: np.ndarray, config: ModelConfig
) -> tuple[np.ndarray, ForwardRun]:
    """The body-bypassing local path: head blocks feed the tail directly."""
    return _stacked_forward([head, tail], prompt, batch, config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParamSet, config: ModelConfig, path) -> None:
    """Flat binary: magic, version u32, five config u32s, params in declaration order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(
            "<6I", CHECKPOINT_VERSION,
            config.seq_len, config.d_model, config.n_layers, config.n_classes, config.input_dim,
        ))
        for name, shape in param_layout(config):
            value = params[name]
            if value.shape != shape:
                raise ValueError(f"parameter {name!r} has shape {value.shape}, layout expects {shape}")
            f.write(value.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> tuple[ParamSet, ModelConfig]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, seq_len, d_model, n_layers, n_classes, input_dim = struct.unpack("<6I", f.read(24))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig(seq_len, d_model, n_layers, n_classes, input_dim)
        params = ParamSet()
        for name, shape in param_layout(config):
            n = int(np.prod(shape))
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"truncated checkpoint while reading {name!r}")
            params.add(name, np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after final parameter")
    return params, config
