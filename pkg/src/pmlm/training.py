"""Two-phase pretraining loop: SGD with momentum, warmup/decay schedule.

Determinism is the organising constraint. Every random draw comes from a
stream named by (master seed, purpose, step), evaluation runs with
dropout off against batches masked by a fixed per-phase stream, and the
metrics CSV contains no measured quantity (the wall_seconds column is
written as 0.0; real timing goes to the console only). Identical
(configs, corpus, seed) therefore reproduce the CSV and the final
checkpoint byte for byte, and resuming from step k replays the exact
tail of the uninterrupted run.
"""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError
from .checkpoint import Checkpoint, save_checkpoint
from .masking import DataError, MaskedBatch, MaskingConfig, Vocab, assemble_batch, build_vocab, make_examples
from .model import ModelConfig, ModelWeights, init_weights, pretrain_forward
from .seeds import derive_seed, stream

__all__ = [
    "DivergenceError",
    "EvalResult",
    "METRICS_HEADER",
    "MetricsRecord",
    "Mode",
    "PhaseConfig",
    "TrainConfig",
    "evaluate",
    "lr_at_step",
    "run_pretraining",
    "sgd_step",
    "write_metrics_csv",
]

METRICS_HEADER = "step,phase,lr,total_loss,mlm_loss,pos_loss,mlm_acc,pos_acc,tokens_seen,wall_seconds,seed"


class Mode:
    BASELINE = "baseline"
    POSITION = "position"

    ALL = (BASELINE, POSITION)


class DivergenceError(RuntimeError):
    """Training hit a non-finite value and aborted."""


@dataclass
class PhaseConfig:
    seq_len: int
    steps: int
    batch_size: int

    def __post_init__(self):
        if self.seq_len < 3:
            raise ValueError(f"seq_len {self.seq_len} < 3")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError(f"bad phase: steps={self.steps} batch_size={self.batch_size}")

    def to_dict(self) -> dict:
        return {"seq_len": self.seq_len, "steps": self.steps, "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    # Defaults put 90% of the steps on the short phase, 10% on the long one.
    seed: int = 0
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig(32, 1800, 8))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(64, 200, 4))
    lr_peak: float = 0.1
    warmup_steps: int = 100
    momentum: float = 0.9
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    eval_every: int = 100
    checkpoint_every: int = 0  # 0 = final checkpoint only
    eval_examples: int = 256  # held-out examples per phase

    def __post_init__(self):
        if self.phase2.seq_len < self.phase1.seq_len:
            raise ValueError(
                f"phase2.seq_len {self.phase2.seq_len} < phase1.seq_len {self.phase1.seq_len}"
            )
        if self.lr_peak <= 0:
            raise ValueError(f"lr_peak {self.lr_peak} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1)")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} outside [0, {self.total_steps}]"
            )
        if self.eval_every < 1 or self.checkpoint_every < 0 or self.eval_examples < 1:
            raise ValueError("eval_every >= 1, checkpoint_every >= 0, eval_examples >= 1")

    @property
    def total_steps(self) -> int:
        return self.phase1.steps + self.phase2.steps

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "phase1": self.phase1.to_dict(),
            "phase2": self.phase2.to_dict(),
            "lr_peak": self.lr_peak,
            "warmup_steps": self.warmup_steps,
            "momentum": self.momentum,
            "masking": self.masking.to_dict(),
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "eval_examples": self.eval_examples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("phase1", "phase2"):
            if key in d:
                d[key] = PhaseConfig.from_dict(d[key])
        if "masking" in d:
            d["masking"] = MaskingConfig.from_dict(d["masking"])
        return cls(**d)


def lr_at_step(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """Linear warmup to lr_peak at warmup_steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return lr_peak if step == warmup_steps else 0.0
    return lr_peak * (total_steps - step) / span


def sgd_step(
    weights: ModelWeights,
    momentum_buffers: dict[str, np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """v <- momentum * v + g; theta <- theta - lr * v. Grads are cleared."""
    params = weights.parameters()
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"gradient of {p.name} is not finite")
    for p in params:
        arr = p.value
        v = momentum_buffers[p.name]
        v *= arr.dtype.type(momentum)
        v += p.grad
        arr -= arr.dtype.type(lr) * v
        p.clear_grad()


@dataclass
class EvalResult:
    mlm_loss: float
    pos_loss: float
    total_loss: float
    mlm_acc: float
    pos_acc: float
    token_slots: int
    position_slots: int


def evaluate(weights: ModelWeights, eval_batches: list[MaskedBatch]) -> EvalResult:
    """Slot-weighted losses and argmax accuracies, dropout off."""
    tok_correct = tok_total = pos_correct = pos_total = 0
    mlm_loss_sum = 0.0
    pos_loss_sum = 0.0
    with ag.no_grad():
        for batch in eval_batches:
            out = pretrain_forward(batch, weights, training=False)
            m = len(batch.token_labels)
            if m:
                preds = np.argmax(out.mlm_logits.data, axis=1)
                tok_correct += int((preds == batch.token_labels).sum())
                tok_total += m
                mlm_loss_sum += out.mlm_loss.item() * m
            mp = len(batch.position_labels)
            if mp and out.pos_logits is not None:
                preds = np.argmax(out.pos_logits.data, axis=1)
                pos_correct += int((preds == batch.position_labels).sum())
                pos_total += mp
                pos_loss_sum += out.pos_loss.item() * mp
    mlm_loss = mlm_loss_sum / tok_total if tok_total else 0.0
    pos_loss = pos_loss_sum / pos_total if pos_total else 0.0
    return EvalResult(
        mlm_loss=mlm_loss,
        pos_loss=pos_loss,
        total_loss=mlm_loss + weights.config.position_loss_weight * pos_loss,
        mlm_acc=tok_correct / tok_total if tok_total else 0.0,
        pos_acc=pos_correct / pos_total if pos_total else 0.0,
        token_slots=tok_total,
        position_slots=pos_total,
    )


@dataclass
class MetricsRecord:
    step: int
    phase: int
    lr: float
    total_loss: float
    mlm_loss: float
    pos_loss: float
    mlm_acc: float
    pos_acc: float
    tokens_seen: int
    wall_seconds: float
    seed: int

    def to_csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                str(self.phase),
                repr(float(self.lr)),
                repr(float(self.total_loss)),
                repr(float(self.mlm_loss)),
                repr(float(self.pos_loss)),
                repr(float(self.mlm_acc)),
                repr(float(self.pos_acc)),
                str(self.tokens_seen),
                repr(float(self.wall_seconds)),
                str(self.seed),
            ]
        )


def write_metrics_csv(records: list[MetricsRecord], path: str | Path) -> None:
    lines = [METRICS_HEADER] + [r.to_csv_row() for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _effective_configs(
    model_config: ModelConfig, train_config: TrainConfig, mode: str
) -> tuple[ModelConfig, TrainConfig]:
    """Baseline mode turns the position channel off without touching inputs."""
    if mode == Mode.POSITION:
        return model_config, train_config
    mc = ModelConfig.from_dict({**model_config.to_dict(), "position_loss_weight": 0.0})
    masking = MaskingConfig.from_dict(
        {**train_config.masking.to_dict(), "position_mask_pct": 0.0}
    )
    tc_dict = train_config.to_dict()
    tc_dict["masking"] = masking.to_dict()
    return mc, TrainConfig.from_dict(tc_dict)


def _phase_data(
    corpus_lines: list[str],
    vocab: Vocab,
    phase: PhaseConfig,
    eval_examples: int,
    masking: MaskingConfig,
    seed: int,
    phase_index: int,
    vocab_size: int,
    mask_position_id: int,
):
    """Split packed examples into train pool + fixed masked eval batches."""
    stream_ids: list[int] = []
    for line in corpus_lines:
        stream_ids.extend(vocab.encode(line))
    examples = make_examples(stream_ids, phase.seq_len)
    if len(examples) < eval_examples + phase.batch_size:
        raise DataError(
            f"phase {phase_index + 1}: {len(examples)} examples cannot cover "
            f"{eval_examples} eval + a batch of {phase.batch_size}"
        )
    train = examples[:-eval_examples]
    held_out = examples[-eval_examples:]
    eval_batches = []
    for i in range(0, len(held_out), phase.batch_size):
        chunk = held_out[i : i + phase.batch_size]
        eval_batches.append(
            assemble_batch(
                chunk,
                masking,
                derive_seed(seed, "eval-mask", phase_index, i),
                vocab_size,
                mask_position_id,
            )
        )
    return train, eval_batches


def run_pretraining(
    model_config: ModelConfig,
    train_config: TrainConfig,
    corpus_lines: list[str],
    mode: str = Mode.POSITION,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    log=None,
) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Train for phase1.steps + phase2.steps updates and checkpoint the result.

    With out_dir set, metrics.csv is appended row by row (so a diverging
    run still leaves its partial metrics) and checkpoints land next to
    it. `resume` continues a saved run; the caller's configs must match
    the checkpoint's exactly.
    """
    if mode not in Mode.ALL:
        raise ValueError(f"unknown mode {mode!r}")
    mc, tc = _effective_configs(model_config, train_config, mode)
    seed = tc.seed
    vocab = build_vocab(corpus_lines, mc.vocab_size)

    if resume is not None:
        if resume.model_config != mc.to_dict() or resume.train_config != tc.to_dict():
            raise ValueError("resume: checkpoint configs do not match the requested run")
        if resume.mode != mode:
            raise ValueError(f"resume: checkpoint mode {resume.mode!r} != requested {mode!r}")
        if resume.vocab_tokens != vocab.tokens:
            raise DataError("resume: corpus produces a different vocab than the checkpoint's")

    weights = init_weights(mc, seed)
    momentum_buffers = {p.name: np.zeros_like(p.value) for p in weights.parameters()}
    start_step = 0
    tokens_seen = 0
    if resume is not None:
        for name, arr in resume.params.items():
            np.copyto(weights[name].value, arr)
        for name, arr in resume.momentum.items():
            np.copyto(momentum_buffers[name], arr)
        start_step = resume.global_step
        tokens_seen = resume.tokens_seen

    phases = [tc.phase1, tc.phase2]
    total_steps = tc.total_steps
    phase_data = {}

    def data_for(phase_index: int):
        if phase_index not in phase_data:
            phase_data[phase_index] = _phase_data(
                corpus_lines,
                vocab,
                phases[phase_index],
                tc.eval_examples,
                tc.masking,
                seed,
                phase_index,
                mc.vocab_size,
                mc.mask_position_id,
            )
        return phase_data[phase_index]

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_path = out_path / "metrics.csv"
        append = resume is not None and metrics_path.exists()
        metrics_file = open(metrics_path, "a" if append else "w", encoding="utf-8")
        if not append:
            metrics_file.write(METRICS_HEADER + "\n")
            metrics_file.flush()

    def emit(record: MetricsRecord):
        records.append(record)
        if metrics_file is not None:
            metrics_file.write(record.to_csv_row() + "\n")
            metrics_file.flush()
        if log is not None:
            log(
                f"step {record.step}/{total_steps} phase {record.phase} "
                f"lr {record.lr:.5f} loss {record.total_loss:.4f} "
                f"mlm_acc {record.mlm_acc:.4f} pos_acc {record.pos_acc:.4f} "
                f"({time.monotonic() - t_start:.1f}s)"
            )

    def snapshot() -> Checkpoint:
        return Checkpoint(
            model_config=mc.to_dict(),
            train_config=tc.to_dict(),
            mode=mode,
            phase_steps_done=[
                min(global_step, tc.phase1.steps),
                max(0, global_step - tc.phase1.steps),
            ],
            global_step=global_step,
            tokens_seen=tokens_seen,
            master_seed=seed,
            vocab_tokens=vocab.tokens,
            params={p.name: p.value for p in weights.parameters()},
            momentum=dict(momentum_buffers),
        )

    records: list[MetricsRecord] = []
    global_step = start_step
    t_start = time.monotonic()
    try:
        for global_step in range(start_step + 1, total_steps + 1):
            phase_index = 0 if global_step <= tc.phase1.steps else 1
            phase = phases[phase_index]
            train_examples, eval_batches = data_for(phase_index)

            order_rng = stream(seed, "data-order", global_step)
            idx = order_rng.choice(len(train_examples), size=phase.batch_size, replace=False)
            batch = assemble_batch(
                [train_examples[i] for i in idx],
                tc.masking,
                derive_seed(seed, "batch-mask", global_step),
                mc.vocab_size,
                mc.mask_position_id,
            )
            lr = lr_at_step(global_step, total_steps, tc.warmup_steps, tc.lr_peak)
            drop_rng = stream(seed, "dropout", global_step)
            try:
                out = pretrain_forward(batch, weights, training=True, rng=drop_rng)
                ag.backward(out.total_loss)
                sgd_step(weights, momentum_buffers, lr, tc.momentum)
            except NonFiniteError as e:
                raise DivergenceError(f"step {global_step}: {e}") from e
            tokens_seen += phase.batch_size * phase.seq_len

            if global_step % tc.eval_every == 0 or global_step == total_steps:
                try:
                    result = evaluate(weights, eval_batches)
                except NonFiniteError as e:
                    raise DivergenceError(f"step {global_step}: {e}") from e
                emit(
                    MetricsRecord(
                        step=global_step,
                        phase=phase_index + 1,
                        lr=lr,
                        total_loss=result.total_loss,
                        mlm_loss=result.mlm_loss,
                        pos_loss=result.pos_loss,
                        mlm_acc=result.mlm_acc,
                        pos_acc=result.pos_acc,
                        tokens_seen=tokens_seen,
                        wall_seconds=0.0,  # measured time never enters the CSV
                        seed=seed,
                    )
                )
            if (
                out_path is not None
                and tc.checkpoint_every
                and global_step % tc.checkpoint_every == 0
                and global_step != total_steps
            ):
                save_checkpoint(snapshot(), out_path / f"ckpt-step{global_step}.pmlm")
    finally:
        if metrics_file is not None:
            metrics_file.close()

    global_step = max(global_step, start_step)
    ckpt = snapshot()
    if out_path is not None:
        save_checkpoint(ckpt, out_path / "checkpoint.pmlm")
    return ckpt, records
