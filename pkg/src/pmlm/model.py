"""Encoder with a masked-token head and a masked-position head.

The twist over a plain BERT-style encoder is the position side: the
position-embedding table has one extra row (index max_positions) that
stands in for "position unknown", and a single dense head is trained to
recover the true index of slots whose position id was corrupted. When a
batch carries no masked positions the head is skipped entirely and the
graph is exactly the plain encoder's, so a baseline run never pays for,
or is perturbed by, machinery it does not use.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .autograd import DropoutMode, Parameter, Tensor
from .seeds import derive_seed, stream

__all__ = [
    "ForwardOutput",
    "ModelConfig",
    "ModelWeights",
    "embed_forward",
    "encoder_forward",
    "gather_rows",
    "init_weights",
    "mlm_head_forward",
    "position_head_forward",
    "pretrain_forward",
]


@dataclass
class ModelConfig:
    vocab_size: int = 2000
    max_positions: int = 64
    hidden_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ffn_size: int = 512
    attention_dropout: float = 0.1
    hidden_dropout: float = 0.1
    mask_token_id: int = 4
    position_loss_weight: float = 1.0

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ValueError(f"mask_token_id {self.mask_token_id} outside vocab")
        if self.position_loss_weight < 0:
            raise ValueError(f"position_loss_weight {self.position_loss_weight} < 0")
        for name in ("attention_dropout", "hidden_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name}={p} outside [0, 1)")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def mask_position_id(self) -> int:
        # The reserved "position unknown" row sits one past the last real index.
        return self.max_positions

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype, cutoff: float = 3.0
) -> np.ndarray:
    """Normal(0, std) with tails beyond cutoff*std resampled away."""
    out = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(out) > cutoff
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        out[bad] = rng.standard_normal(n_bad)
    np.clip(out, -cutoff, cutoff, out=out)  # stragglers after 8 rounds
    return (out * std).astype(dtype)


class ModelWeights:
    """Named parameters in a stable order (the checkpoint manifest order)."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def tensor(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.clear_grad()

    @property
    def has_position_head(self) -> bool:
        return "pos_head.w" in self.params

    def without_position_head(self) -> "ModelWeights":
        """Deep copy with the position head removed (baseline twin)."""
        kept = {
            name: Parameter(name, p.value.copy())
            for name, p in self.params.items()
            if not name.startswith("pos_head.")
        }
        return ModelWeights(self.config, kept)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config, {n: Parameter(n, p.value.copy()) for n, p in self.params.items()}
        )


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Fresh weights. Matrices are truncated-normal(std 0.02), biases zero,
    norm gains one. Each parameter draws from its own name-keyed stream, so
    adding or removing one head never shifts another parameter's init.
    """
    std = 0.02
    params: dict[str, Parameter] = {}

    def matrix(name: str, shape: tuple[int, ...]) -> None:
        rng = stream(seed, "weights-init", ag.hash_name(name))
        params[name] = Parameter(name, truncated_normal(rng, shape, std, dtype))

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Parameter(name, np.zeros(shape, dtype=dtype))

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = Parameter(name, np.ones(shape, dtype=dtype))

    h, f = config.hidden_size, config.ffn_size
    matrix("embed.token", (config.vocab_size, h))
    matrix("embed.position", (config.max_positions + 1, h))
    ones("embed.norm.gain", (h,))
    zeros("embed.norm.bias", (h,))
    for i in range(config.num_layers):
        base = f"encoder.layer{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            matrix(f"{base}.attn.{proj}", (h, h))
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"{base}.attn.{b}", (h,))
        ones(f"{base}.attn_norm.gain", (h,))
        zeros(f"{base}.attn_norm.bias", (h,))
        matrix(f"{base}.ffn.w1", (h, f))
        zeros(f"{base}.ffn.b1", (f,))
        matrix(f"{base}.ffn.w2", (f, h))
        zeros(f"{base}.ffn.b2", (h,))
        ones(f"{base}.ffn_norm.gain", (h,))
        zeros(f"{base}.ffn_norm.bias", (h,))
    matrix("mlm_head.transform.w", (h, h))
    zeros("mlm_head.transform.b", (h,))
    ones("mlm_head.norm.gain", (h,))
    zeros("mlm_head.norm.bias", (h,))
    zeros("mlm_head.output_bias", (config.vocab_size,))
    matrix("pos_head.w", (h, config.max_positions))
    zeros("pos_head.b", (config.max_positions,))
    return ModelWeights(config, params)


def _validate_ids(name: str, ids: np.ndarray, limit: int) -> None:
    if ids.size == 0:
        return
    per_row_ok = (ids >= 0) & (ids < limit)
    if per_row_ok.all():
        return
    bad_rows = np.where(~per_row_ok.all(axis=-1))[0]
    raise ValueError(f"{name} out of range [0,{limit}) in batch row(s) {bad_rows.tolist()}")


def embed_forward(
    input_ids: np.ndarray,
    position_ids: np.ndarray,
    weights: ModelWeights,
    training: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Token + position embeddings, layer norm, hidden dropout. Returns [B*S, H]."""
    cfg = weights.config
    input_ids = np.asarray(input_ids, dtype=np.int64)
    position_ids = np.asarray(position_ids, dtype=np.int64)
    if input_ids.shape != position_ids.shape or input_ids.ndim != 2:
        raise ValueError(
            f"embed_forward: id shapes {input_ids.shape} and {position_ids.shape}"
        )
    _validate_ids("input id", input_ids, cfg.vocab_size)
    _validate_ids("position id", position_ids, cfg.max_positions + 1)

    tok = ag.gather_rows(weights.tensor("embed.token"), input_ids.reshape(-1))
    pos = ag.gather_rows(weights.tensor("embed.position"), position_ids.reshape(-1))
    x = ag.add(tok, pos)
    x = ag.layer_norm(x, weights.tensor("embed.norm.gain"), weights.tensor("embed.norm.bias"))
    return ag.dropout(x, cfg.hidden_dropout, rng, training, DropoutMode.STANDARD)


def encoder_forward(
    hidden: Tensor,
    weights: ModelWeights,
    batch_size: int,
    seq_len: int,
    attn_dropout_mode: str = DropoutMode.STANDARD,
    training: bool = False,
    rng: np.random.Generator | None = None,
    probe: list | None = None,
) -> Tensor:
    """Stack of self-attention + GELU feed-forward blocks on a [B*S, H] input.

    `probe`, when given, collects per layer the attention-probability
    tensor before and after its dropout site, so callers can inspect the
    gradients that arrive at each.
    """
    cfg = weights.config
    b, s, h, a, dh = batch_size, seq_len, cfg.hidden_size, cfg.num_heads, cfg.head_size
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    x = hidden

    def split_heads(t: Tensor) -> Tensor:
        t = ag.reshape(t, (b, s, a, dh))
        t = ag.permute(t, (0, 2, 1, 3))
        return ag.reshape(t, (b * a, s, dh))

    for i in range(cfg.num_layers):
        base = f"encoder.layer{i}"
        q = ag.add_bias(ag.matmul(x, weights.tensor(f"{base}.attn.wq")), weights.tensor(f"{base}.attn.bq"))
        k = ag.add_bias(ag.matmul(x, weights.tensor(f"{base}.attn.wk")), weights.tensor(f"{base}.attn.bk"))
        v = ag.add_bias(ag.matmul(x, weights.tensor(f"{base}.attn.wv")), weights.tensor(f"{base}.attn.bv"))
        qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
        scores = ag.scale(ag.bmm(qh, ag.permute(kh, (0, 2, 1))), inv_sqrt_dh)
        probs = ag.softmax_rows(scores)
        probs_dropped = ag.dropout(probs, cfg.attention_dropout, rng, training, attn_dropout_mode)
        if probe is not None:
            probe.append((probs, probs_dropped))
        ctx = ag.bmm(probs_dropped, vh)
        ctx = ag.reshape(ctx, (b, a, s, dh))
        ctx = ag.permute(ctx, (0, 2, 1, 3))
        ctx = ag.reshape(ctx, (b * s, h))
        attn_out = ag.add_bias(ag.matmul(ctx, weights.tensor(f"{base}.attn.wo")), weights.tensor(f"{base}.attn.bo"))
        x = ag.layer_norm(
            ag.add(x, attn_out),
            weights.tensor(f"{base}.attn_norm.gain"),
            weights.tensor(f"{base}.attn_norm.bias"),
        )
        ff = ag.gelu(ag.add_bias(ag.matmul(x, weights.tensor(f"{base}.ffn.w1")), weights.tensor(f"{base}.ffn.b1")))
        ff = ag.add_bias(ag.matmul(ff, weights.tensor(f"{base}.ffn.w2")), weights.tensor(f"{base}.ffn.b2"))
        x = ag.layer_norm(
            ag.add(x, ff),
            weights.tensor(f"{base}.ffn_norm.gain"),
            weights.tensor(f"{base}.ffn_norm.bias"),
        )
    return x


def gather_rows(sequence_output: Tensor, slots: np.ndarray, seq_len: int) -> Tensor:
    """Pack the hidden rows at (batch, seq) slots into an [M, H] tensor.

    Slot order is preserved exactly; M may be zero.
    """
    slots = np.asarray(slots, dtype=np.int64).reshape(-1, 2)
    flat = slots[:, 0] * seq_len + slots[:, 1]
    return ag.gather_rows(sequence_output, flat)


def mlm_head_forward(packed: Tensor, weights: ModelWeights) -> Tensor:
    """[M,H] -> [M,V] logits; the output projection reuses the token table."""
    x = ag.add_bias(
        ag.matmul(packed, weights.tensor("mlm_head.transform.w")),
        weights.tensor("mlm_head.transform.b"),
    )
    x = ag.gelu(x)
    x = ag.layer_norm(x, weights.tensor("mlm_head.norm.gain"), weights.tensor("mlm_head.norm.bias"))
    logits = ag.matmul(x, ag.transpose(weights.tensor("embed.token")))
    return ag.add_bias(logits, weights.tensor("mlm_head.output_bias"))


def position_head_forward(packed: Tensor, weights: ModelWeights) -> Tensor:
    """[M,H] -> [M, max_positions] logits from a single dense layer."""
    return ag.add_bias(ag.matmul(packed, weights.tensor("pos_head.w")), weights.tensor("pos_head.b"))


@dataclass
class ForwardOutput:
    sequence_output: Tensor  # [B, S, H]
    mlm_logits: Tensor  # [M, V]
    pos_logits: Tensor | None  # [Mp, P], None when no position slots
    mlm_loss: Tensor
    pos_loss: Tensor | None
    total_loss: Tensor

    @property
    def losses(self) -> dict[str, float]:
        return {
            "mlm": self.mlm_loss.item(),
            "pos": self.pos_loss.item() if self.pos_loss is not None else 0.0,
            "total": self.total_loss.item(),
        }


def pretrain_forward(
    batch,
    weights: ModelWeights,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_dropout_mode: str = DropoutMode.STANDARD,
    probe: list | None = None,
) -> ForwardOutput:
    """Full pretraining pass over a MaskedBatch.

    total = mlm + position_loss_weight * pos, with two exactly-equal
    shortcuts: when the batch has no position slots the head never runs,
    and when the weight is zero `total` IS the mlm loss node, so neither
    case can disturb the baseline graph even at the bitwise level.
    """
    cfg = weights.config
    b, s = batch.input_ids.shape
    hidden = embed_forward(batch.input_ids, batch.position_ids, weights, training, rng)
    seq = encoder_forward(
        hidden, weights, b, s, attn_dropout_mode, training, rng, probe=probe
    )

    packed_tok = gather_rows(seq, batch.token_mask_slots, s)
    mlm_logits = mlm_head_forward(packed_tok, weights)
    mlm_loss = ag.cross_entropy_mean(mlm_logits, batch.token_labels)

    pos_logits = None
    pos_loss = None
    total = mlm_loss
    if len(batch.position_mask_slots) > 0:
        packed_pos = gather_rows(seq, batch.position_mask_slots, s)
        pos_logits = position_head_forward(packed_pos, weights)
        pos_loss = ag.cross_entropy_mean(pos_logits, batch.position_labels)
        if cfg.position_loss_weight > 0.0:
            total = ag.add(mlm_loss, ag.scale(pos_loss, cfg.position_loss_weight))

    return ForwardOutput(
        sequence_output=ag.reshape(seq, (b, s, cfg.hidden_size)),
        mlm_logits=mlm_logits,
        pos_logits=pos_logits,
        mlm_loss=mlm_loss,
        pos_loss=pos_loss,
        total_loss=total,
    )
