"""Span extraction on a synthetic lookup task, from a pretrained encoder.

Each example frames a query: "[CLS] key len [SEP] body [SEP]" where the
body contains the key token exactly once and the answer is the span of
`len` tokens starting at that occurrence. Two dense H->1 heads score
span start and end per slot. The attention-dropout gradient mode is the
experimental knob: STANDARD backpropagates through the sampled masks,
STRAIGHT_THROUGH ignores them on the way back. With attention dropout
at zero the two runs are bitwise identical by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DropoutMode, Parameter, Tensor
from .checkpoint import Checkpoint
from .masking import CLS_ID, SEP_ID, Vocab
from .model import (
    ModelConfig,
    ModelWeights,
    embed_forward,
    encoder_forward,
    init_weights,
    truncated_normal,
)
from .seeds import stream

__all__ = [
    "FinetuneConfig",
    "FinetuneRecord",
    "FinetuneResult",
    "ProbeResult",
    "SpanExample",
    "SpanMetrics",
    "SpanWeights",
    "evaluate_span",
    "generate_span_dataset",
    "init_span_weights",
    "predict_span",
    "probe_softmax_gradients",
    "run_finetune",
    "span_em_f1",
    "span_forward",
    "span_loss",
    "weights_from_checkpoint",
]

LENGTH_MARKER_BASE = 5  # vocab ids 5..9 encode answer lengths 1..5
MAX_SPAN_LEN = 5
BODY_START = 4  # [CLS] key len [SEP] occupy slots 0..3


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 0.05
    dropout_gradient_mode: str = DropoutMode.STANDARD
    seed: int = 0
    train_examples: int = 512
    dev_examples: int = 128
    seq_len: int = 32

    def __post_init__(self):
        if self.dropout_gradient_mode not in DropoutMode.ALL:
            raise ValueError(f"unknown dropout_gradient_mode {self.dropout_gradient_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if self.train_examples < 1 or self.dev_examples < 1:
            raise ValueError("dataset sizes must be positive")
        if self.seq_len < BODY_START + MAX_SPAN_LEN + 1:
            raise ValueError(f"seq_len {self.seq_len} cannot hold a {MAX_SPAN_LEN}-token span")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "dropout_gradient_mode": self.dropout_gradient_mode,
            "seed": self.seed,
            "train_examples": self.train_examples,
            "dev_examples": self.dev_examples,
            "seq_len": self.seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(**d)


@dataclass
class SpanExample:
    input_ids: np.ndarray  # int64 [S]
    start: int
    end: int  # inclusive; end = start + length - 1

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def generate_span_dataset(
    count: int, vocab: Vocab, seq_len: int, rng: np.random.Generator
) -> list[SpanExample]:
    """Examples with exactly one key occurrence and a length-coded answer."""
    v = len(vocab)
    first_word = LENGTH_MARKER_BASE + MAX_SPAN_LEN
    if v <= first_word + 2:
        raise ValueError(f"vocab of {v} tokens is too small for the span task")
    body_end = seq_len - 2  # inclusive; final SEP sits at seq_len - 1
    if body_end < BODY_START:
        raise ValueError(f"seq_len {seq_len} leaves no body")
    max_len = min(MAX_SPAN_LEN, body_end - BODY_START + 1)
    examples = []
    for _ in range(count):
        length = int(rng.integers(1, max_len + 1))
        key = int(rng.integers(first_word, v))
        start = int(rng.integers(BODY_START, body_end - length + 2))
        ids = np.empty(seq_len, dtype=np.int64)
        ids[0] = CLS_ID
        ids[1] = key
        ids[2] = LENGTH_MARKER_BASE + length - 1
        ids[3] = SEP_ID
        for j in range(BODY_START, body_end + 1):
            filler = int(rng.integers(LENGTH_MARKER_BASE, v))
            while filler == key:
                filler = int(rng.integers(LENGTH_MARKER_BASE, v))
            ids[j] = filler
        ids[start] = key
        ids[seq_len - 1] = SEP_ID
        examples.append(SpanExample(input_ids=ids, start=start, end=start + length - 1))
    return examples


class SpanWeights:
    """The two start/end heads, kept apart from the encoder's parameters."""

    def __init__(self, params: dict[str, Parameter]):
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.clear_grad()


def init_span_weights(hidden_size: int, seed: int, dtype=np.float32) -> SpanWeights:
    params: dict[str, Parameter] = {}
    for side in ("start", "end"):
        name = f"span.{side}.w"
        rng = stream(seed, "weights-init", ag.hash_name(name))
        params[name] = Parameter(name, truncated_normal(rng, (hidden_size, 1), 0.02, dtype))
        params[f"span.{side}.b"] = Parameter(f"span.{side}.b", np.zeros(1, dtype=dtype))
    return SpanWeights(params)


def span_forward(
    sequence_output: Tensor, span_weights: SpanWeights, batch_size: int, seq_len: int
) -> tuple[Tensor, Tensor]:
    """[B*S, H] -> per-slot start and end logits, each [B, S]."""

    def head(side: str) -> Tensor:
        logits = ag.add_bias(
            ag.matmul(sequence_output, span_weights.tensor(f"span.{side}.w")),
            span_weights.tensor(f"span.{side}.b"),
        )
        return ag.reshape(logits, (batch_size, seq_len))

    return head("start"), head("end")


def span_loss(start_logits: Tensor, end_logits: Tensor, starts, ends) -> Tensor:
    """Mean of the start and end cross-entropies."""
    ce_start = ag.cross_entropy_mean(start_logits, starts)
    ce_end = ag.cross_entropy_mean(end_logits, ends)
    return ag.scale(ag.add(ce_start, ce_end), 0.5)


def predict_span(start_row: np.ndarray, end_row: np.ndarray) -> tuple[int, int]:
    """Argmax per head; a backwards pair is swapped into a valid span."""
    s = int(np.argmax(start_row))
    e = int(np.argmax(end_row))
    if s > e:
        s, e = e, s
    return s, e


def span_em_f1(pred: tuple[int, int], gold: tuple[int, int]) -> tuple[float, float]:
    """Exact match and token-overlap F1 between two inclusive spans."""
    em = 1.0 if pred == gold else 0.0
    lo = max(pred[0], gold[0])
    hi = min(pred[1], gold[1])
    overlap = max(0, hi - lo + 1)
    if overlap == 0:
        return em, 0.0
    precision = overlap / (pred[1] - pred[0] + 1)
    recall = overlap / (gold[1] - gold[0] + 1)
    return em, 2.0 * precision * recall / (precision + recall)


@dataclass
class SpanMetrics:
    exact_match: float
    f1: float
    count: int


@dataclass
class FinetuneRecord:
    epoch: int
    train_loss: float | None  # None on the epoch-0 (pre-training) row
    exact_match: float
    f1: float


@dataclass
class ProbeResult:
    standard: float
    straight_through: float

    @property
    def ratio(self) -> float:
        return self.straight_through / self.standard


@dataclass
class FinetuneResult:
    records: list[FinetuneRecord]
    metrics: SpanMetrics
    predictions: list[tuple]  # (example_id, gold_start, gold_end, pred_start, pred_end, em, f1)
    weights: ModelWeights
    span_weights: SpanWeights


def weights_from_checkpoint(ckpt: Checkpoint) -> ModelWeights:
    """Rebuild ModelWeights from a checkpoint's tensors."""
    config = ModelConfig.from_dict(ckpt.model_config)
    weights = init_weights(config, ckpt.master_seed)
    missing = sorted(set(weights.params) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(weights.params))
    if missing or extra:
        raise ValueError(f"checkpoint params mismatch: missing {missing}, extra {extra}")
    for name, arr in ckpt.params.items():
        np.copyto(weights[name].value, arr)
    return weights


def _span_batches(examples: list[SpanExample], order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i : i + batch_size]]


def _batch_arrays(batch: list[SpanExample]):
    ids = np.stack([ex.input_ids for ex in batch])
    starts = np.array([ex.start for ex in batch], dtype=np.int64)
    ends = np.array([ex.end for ex in batch], dtype=np.int64)
    positions = np.tile(np.arange(ids.shape[1], dtype=np.int64), (ids.shape[0], 1))
    return ids, positions, starts, ends


def _span_forward_pass(
    weights: ModelWeights,
    span_weights: SpanWeights,
    ids: np.ndarray,
    positions: np.ndarray,
    training: bool,
    rng: np.random.Generator | None,
    attn_mode: str,
    probe: list | None = None,
):
    b, s = ids.shape
    hidden = embed_forward(ids, positions, weights, training, rng)
    seq = encoder_forward(hidden, weights, b, s, attn_mode, training, rng, probe=probe)
    return span_forward(seq, span_weights, b, s)


def evaluate_span(
    weights: ModelWeights,
    span_weights: SpanWeights,
    examples: list[SpanExample],
    batch_size: int = 16,
) -> tuple[SpanMetrics, list[tuple]]:
    """Greedy decode on every example; returns metrics plus per-example rows."""
    rows = []
    em_sum = f1_sum = 0.0
    order = np.arange(len(examples))
    with ag.no_grad():
        example_id = 0
        for batch in _span_batches(examples, order, batch_size):
            ids, positions, _, _ = _batch_arrays(batch)
            start_logits, end_logits = _span_forward_pass(
                weights, span_weights, ids, positions, False, None, DropoutMode.STANDARD
            )
            for r, ex in enumerate(batch):
                ps, pe = predict_span(start_logits.data[r], end_logits.data[r])
                em, f1 = span_em_f1((ps, pe), (ex.start, ex.end))
                rows.append((example_id, ex.start, ex.end, ps, pe, em, f1))
                em_sum += em
                f1_sum += f1
                example_id += 1
    n = len(examples)
    metrics = SpanMetrics(em_sum / n if n else 0.0, f1_sum / n if n else 0.0, n)
    return metrics, rows


def run_finetune(ckpt: Checkpoint, config: FinetuneConfig) -> FinetuneResult:
    """Train the span heads (and the encoder) on the synthetic lookup task.

    Zero epochs still evaluates, so the returned metrics then describe
    the pretrained encoder with freshly initialised heads.
    """
    weights = weights_from_checkpoint(ckpt)
    mc = weights.config
    if config.seq_len > mc.max_positions:
        raise ValueError(
            f"seq_len {config.seq_len} exceeds the checkpoint's {mc.max_positions} positions"
        )
    vocab = ckpt.vocab
    span_weights = init_span_weights(mc.hidden_size, config.seed)
    train = generate_span_dataset(
        config.train_examples, vocab, config.seq_len, stream(config.seed, "span-train")
    )
    dev = generate_span_dataset(
        config.dev_examples, vocab, config.seq_len, stream(config.seed, "span-dev")
    )

    all_params = weights.parameters() + span_weights.parameters()
    records = []
    metrics, predictions = evaluate_span(weights, span_weights, dev, config.batch_size)
    records.append(FinetuneRecord(0, None, metrics.exact_match, metrics.f1))

    lr = np.float32(config.lr)
    for epoch in range(1, config.epochs + 1):
        order = stream(config.seed, "finetune-order", epoch).permutation(len(train))
        loss_sum = 0.0
        n_batches = 0
        for batch_idx, batch in enumerate(_span_batches(train, order, config.batch_size)):
            ids, positions, starts, ends = _batch_arrays(batch)
            rng = stream(config.seed, "finetune-dropout", epoch, batch_idx)
            start_logits, end_logits = _span_forward_pass(
                weights,
                span_weights,
                ids,
                positions,
                True,
                rng,
                config.dropout_gradient_mode,
            )
            loss = span_loss(start_logits, end_logits, starts, ends)
            ag.backward(loss)
            for p in all_params:
                if not np.isfinite(p.grad).all():
                    raise ag.NonFiniteError(f"gradient of {p.name} is not finite")
                arr = p.value
                arr -= lr * p.grad
                p.clear_grad()
            loss_sum += loss.item()
            n_batches += 1
        metrics, predictions = evaluate_span(weights, span_weights, dev, config.batch_size)
        records.append(
            FinetuneRecord(epoch, loss_sum / n_batches, metrics.exact_match, metrics.f1)
        )

    return FinetuneResult(records, metrics, predictions, weights, span_weights)


def probe_softmax_gradients(
    weights: ModelWeights,
    span_weights: SpanWeights,
    examples: list[SpanExample],
    seed: int = 0,
) -> ProbeResult:
    """Mean gradient norm at the attention-softmax outputs, per backward mode.

    Both measurements share the weights and (through a fixed stream) the
    sampled dropout masks; only the backward rule differs. Reported per
    mode: the L2 norm of the gradient arriving at each layer's softmax
    output, averaged over layers. Measurement only; no direction is
    asserted anywhere.
    """
    ids, positions, starts, ends = _batch_arrays(examples)
    norms = {}
    for mode in DropoutMode.ALL:
        weights.zero_grads()
        span_weights.zero_grads()
        probe: list[tuple[Tensor, Tensor]] = []
        rng = stream(seed, "probe-dropout")
        start_logits, end_logits = _span_forward_pass(
            weights, span_weights, ids, positions, True, rng, mode, probe=probe
        )
        loss = span_loss(start_logits, end_logits, starts, ends)
        ag.backward(loss)
        layer_norms = [float(np.linalg.norm(probs.grad)) for probs, _ in probe]
        norms[mode] = float(np.mean(layer_norms))
        weights.zero_grads()
        span_weights.zero_grads()
    result = ProbeResult(norms[DropoutMode.STANDARD], norms[DropoutMode.STRAIGHT_THROUGH])
    if not (np.isfinite(result.standard) and result.standard > 0):
        raise ag.NonFiniteError(f"probe: standard-mode norm {result.standard} is not usable")
    if not (np.isfinite(result.straight_through) and result.straight_through > 0):
        raise ag.NonFiniteError(
            f"probe: straight-through norm {result.straight_through} is not usable"
        )
    return result
