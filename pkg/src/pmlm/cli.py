"""Command-line surface.

Exit codes are a contract: 0 success, 2 configuration or input error,
3 numerical divergence (including a failing gradient check). Output
directory precedence: --out flag, then the PMLM_OUT environment
variable, then paths.out_dir from the config.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DropoutMode, GradCheckError, NonFiniteError, grad_check
from .checkpoint import CheckpointLoadError, load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    default_run_config,
    load_run_config,
    serialize_run_config,
)
from .corpus import generate_corpus, read_corpus, write_corpus
from .finetune import (
    FinetuneConfig,
    generate_span_dataset,
    init_span_weights,
    probe_softmax_gradients,
    run_finetune,
    span_forward,
    span_loss,
    weights_from_checkpoint,
    _batch_arrays,
)
from .masking import (
    AssemblyError,
    DataError,
    MaskingConfig,
    RESERVED_TOKENS,
    Vocab,
    assemble_batch,
    make_examples,
    write_vocab_file,
)
from .model import ModelConfig, embed_forward, encoder_forward, init_weights, pretrain_forward
from .report import (
    ReportError,
    build_comparison,
    build_curves,
    build_finetune_summary,
    build_table,
    read_run_dir,
    steps_to_threshold,
)
from .seeds import derive_seed, stream
from .training import DivergenceError, Mode, TrainConfig, run_pretraining

INJECT_BUG_ENV = "PMLM_GRADCHECK_INJECT_BUG"
OUT_ENV = "PMLM_OUT"


def _eprint(*parts) -> None:
    print(*parts, file=sys.stderr)


def _out_base(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.paths.out_dir)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _load_corpus(cfg: RunConfig) -> list[str]:
    if not cfg.paths.corpus:
        raise ConfigError("paths.corpus is required for this command")
    path = Path(cfg.paths.corpus)
    if not path.exists():
        raise ConfigError(f"paths.corpus: no such file: {path}")
    return read_corpus(path)


def _override_train_seed(cfg: RunConfig, seed: int) -> RunConfig:
    d = cfg.train.to_dict()
    d["seed"] = seed
    return RunConfig(cfg.model, TrainConfig.from_dict(d), cfg.finetune, cfg.paths)


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = _override_train_seed(cfg, args.seed)
    mode = args.mode
    corpus = _load_corpus(cfg)
    run_id = f"{mode}-s{cfg.train.seed}-{config_hash(cfg)}"
    run_dir = _out_base(args, cfg) / run_id
    resume = load_checkpoint(args.resume) if args.resume else None

    log = None if args.quiet else _eprint
    t0 = time.monotonic()
    ckpt, records = run_pretraining(
        cfg.model, cfg.train, corpus, mode, out_dir=run_dir, resume=resume, log=log
    )
    elapsed = time.monotonic() - t0

    (run_dir / "config.json").write_text(serialize_run_config(cfg), encoding="utf-8")
    _write_json(
        run_dir / "run.json",
        {
            "kind": "pretrain",
            "run_id": run_id,
            "mode": mode,
            "seed": cfg.train.seed,
            "config_hash": config_hash(cfg),
            "model_config": ckpt.model_config,
            "train_config": ckpt.train_config,
        },
    )
    if cfg.paths.vocab:
        write_vocab_file(ckpt.vocab, cfg.paths.vocab)
    if records:
        last = records[-1]
        print(
            f"{run_id}: step {last.step} total_loss {last.total_loss:.4f} "
            f"mlm_acc {last.mlm_acc:.4f} pos_acc {last.pos_acc:.4f} ({elapsed:.1f}s)"
        )
    else:
        print(f"{run_id}: no steps run; checkpoint equals the initial weights")
    print(f"run dir: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    ft_d = cfg.finetune.to_dict()
    if args.seed is not None:
        ft_d["seed"] = args.seed
    if args.dropout_grad is not None:
        ft_d["dropout_gradient_mode"] = args.dropout_grad
    try:
        ft = FinetuneConfig.from_dict(ft_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"finetune: {e}") from e
    cfg = RunConfig(cfg.model, cfg.train, ft, cfg.paths)

    ckpt = load_checkpoint(args.checkpoint)
    run_id = f"ft-{ft.dropout_gradient_mode}-s{ft.seed}-{config_hash(cfg)}"
    run_dir = _out_base(args, cfg) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.monotonic()
    result = run_finetune(ckpt, ft)

    # The probe measures the pretrained encoder exactly as finetuning
    # first sees it: same checkpoint weights, same fresh span heads.
    probe_examples = generate_span_dataset(
        min(8, ft.dev_examples), ckpt.vocab, ft.seq_len, stream(ft.seed, "span-dev")
    )
    probe = probe_softmax_gradients(
        weights_from_checkpoint(ckpt),
        init_span_weights(ckpt.model_config["hidden_size"], ft.seed),
        probe_examples,
        seed=ft.seed,
    )
    elapsed = time.monotonic() - t0

    lines = ["epoch,train_loss,em,f1,seed"]
    for r in result.records:
        loss = "" if r.train_loss is None else repr(float(r.train_loss))
        lines.append(f"{r.epoch},{loss},{r.exact_match!r},{r.f1!r},{ft.seed}")
    (run_dir / "span_metrics.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    pred_lines = ["example_id,gold_start,gold_end,pred_start,pred_end,em,f1"]
    for row in result.predictions:
        ex_id, gs, ge, ps, pe, em, f1 = row
        pred_lines.append(f"{ex_id},{gs},{ge},{ps},{pe},{em!r},{f1!r}")
    (run_dir / "predictions.csv").write_text("\n".join(pred_lines) + "\n", encoding="utf-8")

    probe_payload = {
        "standard": probe.standard,
        "straight_through": probe.straight_through,
        "ratio": probe.ratio,
    }
    _write_json(run_dir / "probe.json", probe_payload)
    (run_dir / "config.json").write_text(serialize_run_config(cfg), encoding="utf-8")
    _write_json(
        run_dir / "run.json",
        {
            "kind": "finetune",
            "run_id": run_id,
            "dropout_gradient_mode": ft.dropout_gradient_mode,
            "seed": ft.seed,
            "config_hash": config_hash(cfg),
            "final_em": result.metrics.exact_match,
            "final_f1": result.metrics.f1,
            "probe": probe_payload,
        },
    )
    print(
        f"{run_id}: em {result.metrics.exact_match:.4f} f1 {result.metrics.f1:.4f} "
        f"probe ratio {probe.ratio:.4f} ({elapsed:.1f}s)"
    )
    print(f"run dir: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    try:
        pcts = [float(p) for p in args.pcts.split(",") if p.strip()]
    except ValueError as e:
        raise ConfigError(f"--pcts: {e}") from e
    if not pcts or any(not 0.0 < p < 1.0 for p in pcts):
        raise ConfigError(f"--pcts must be fractions in (0, 1), got {args.pcts!r}")
    if args.num_seeds < 1:
        raise ConfigError("--num-seeds must be >= 1")
    corpus = _load_corpus(cfg)
    sweep_dir = _out_base(args, cfg) / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    by_pct: dict[float, list[float]] = {}
    for pct in pcts:
        for offset in range(args.num_seeds):
            seed = cfg.train.seed + offset
            td = cfg.train.to_dict()
            td["seed"] = seed
            td["masking"] = {**td["masking"], "position_mask_pct": pct}
            sub_cfg = RunConfig(cfg.model, TrainConfig.from_dict(td), cfg.finetune, cfg.paths)
            tag = repr(pct).replace(".", "_")
            run_id = f"position-p{tag}-s{seed}-{config_hash(sub_cfg)}"
            run_dir = sweep_dir / run_id
            if not args.quiet:
                _eprint(f"sweep point pct={pct} seed={seed} -> {run_dir}")
            ckpt, records = run_pretraining(
                sub_cfg.model, sub_cfg.train, corpus, Mode.POSITION, out_dir=run_dir
            )
            if not records:
                raise ConfigError("sweep: runs must take at least one step")
            _write_json(
                run_dir / "run.json",
                {
                    "kind": "pretrain",
                    "run_id": run_id,
                    "mode": Mode.POSITION,
                    "seed": seed,
                    "config_hash": config_hash(sub_cfg),
                    "model_config": ckpt.model_config,
                    "train_config": ckpt.train_config,
                },
            )
            final = records[-1]
            thresh = steps_to_threshold(
                [{"step": r.step, "mlm_acc": r.mlm_acc} for r in records]
            )
            rows.append(
                f"{pct!r},{seed},{final.mlm_acc!r},{final.pos_acc!r},"
                f"{final.total_loss!r},{thresh}"
            )
            by_pct.setdefault(pct, []).append(final.pos_acc)

    header = "pct,seed,final_mlm_acc,final_pos_acc,final_total_loss,steps_to_threshold"
    (sweep_dir / "sweep.csv").write_text("\n".join([header] + rows) + "\n", encoding="utf-8")

    # Direction check is advisory: reported, never a failure.
    means = [(pct, sum(v) / len(v)) for pct, v in sorted(by_pct.items())]
    violations = [
        f"{a[0]} -> {b[0]} ({a[1]:.4f} -> {b[1]:.4f})"
        for a, b in zip(means, means[1:])
        if b[1] > a[1]
    ]
    if violations:
        print(f"position-accuracy monotonicity violated: {'; '.join(violations)}")
    else:
        print("position accuracy is monotonically nonincreasing over the pct grid")
    print(f"sweep csv: {sweep_dir / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def run_tiny_gradcheck(eps: float = 1e-5, tol: float = 1e-4, max_coords: int = 64, seed: int = 0):
    """Finite-difference audit of the full tiny model in 64-bit.

    Covers both pretraining heads and the span heads, with dropout
    active but frozen (every loss evaluation re-derives the same masks).
    Returns the report; printing and exit codes are the caller's job.
    """
    mc = ModelConfig(
        vocab_size=50,
        max_positions=8,
        hidden_size=16,
        num_layers=2,
        num_heads=2,
        ffn_size=32,
        attention_dropout=0.1,
        hidden_dropout=0.1,
    )
    weights = init_weights(mc, seed, dtype=np.float64)
    span_weights = init_span_weights(mc.hidden_size, seed, dtype=np.float64)
    vocab = Vocab(list(RESERVED_TOKENS) + [f"w{i:02d}" for i in range(mc.vocab_size - 5)])

    data_rng = stream(seed, "gradcheck-data")
    token_ids = data_rng.integers(5, mc.vocab_size, size=12)
    examples = make_examples(token_ids, 8)
    batch = assemble_batch(
        examples,
        MaskingConfig(token_mask_pct=0.3, position_mask_pct=0.25),
        derive_seed(seed, "gradcheck-mask"),
        mc.vocab_size,
        mc.mask_position_id,
    )
    span_examples = generate_span_dataset(2, vocab, 8, stream(seed, "gradcheck-span"))
    ids, positions, starts, ends = _batch_arrays(span_examples)

    def loss_fn():
        rng = stream(seed, "gradcheck-dropout")
        out = pretrain_forward(batch, weights, training=True, rng=rng)
        hidden = embed_forward(ids, positions, weights, True, rng)
        seq = encoder_forward(
            hidden, weights, ids.shape[0], ids.shape[1], DropoutMode.STANDARD, True, rng
        )
        s_logits, e_logits = span_forward(seq, span_weights, ids.shape[0], ids.shape[1])
        return ag.add(out.total_loss, span_loss(s_logits, e_logits, starts, ends))

    params = weights.parameters() + span_weights.parameters()
    return grad_check(loss_fn, params, eps=eps, tol=tol, max_coords_per_param=max_coords)


def cmd_gradcheck(args) -> int:
    if os.environ.get(INJECT_BUG_ENV, "") not in ("", "0"):
        ag._BACKWARD_FAULT = 0.02
    t0 = time.monotonic()
    try:
        report = run_tiny_gradcheck(args.eps, args.tol, args.max_coords, args.seed)
    finally:
        ag._BACKWARD_FAULT = 0.0
    elapsed = time.monotonic() - t0

    def group_of(name: str) -> str:
        parts = name.split(".")
        return ".".join(parts[:2]) if parts[0] == "encoder" else parts[0]

    groups: dict[str, float] = {}
    for name, err in report.per_param.items():
        g = group_of(name)
        groups[g] = max(groups.get(g, 0.0), err)
    for g in sorted(groups):
        print(f"{g}: max rel error {groups[g]:.3e}")
    status = "ok" if report.ok(args.tol) else "FAIL"
    print(
        f"gradcheck {status}: max rel error {report.max_rel_error:.3e} "
        f"at {report.worst_param}[{report.worst_coord}] over {report.audited} coordinates "
        f"({report.below_resolution} below oracle resolution; tol {args.tol:g}, {elapsed:.1f}s)"
    )
    return 0 if report.ok(args.tol) else 3


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    runs = [read_run_dir(p) for p in args.run_dirs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    pre = [r for r in runs if r.kind == "pretrain"]
    have_pair = {r.seed for r in pre if r.mode == "baseline"} & {
        r.seed for r in pre if r.mode == "position"
    }
    if have_pair:
        (out / "comparison.csv").write_text(build_comparison(runs), encoding="utf-8")
        written.append(out / "comparison.csv")
    if pre:
        (out / "curves.csv").write_text(build_curves(runs), encoding="utf-8")
        written.append(out / "curves.csv")
    if any(r.kind == "finetune" for r in runs):
        (out / "finetune_summary.csv").write_text(build_finetune_summary(runs), encoding="utf-8")
        written.append(out / "finetune_summary.csv")
    (out / "table.txt").write_text(build_table(runs), encoding="utf-8")
    written.append(out / "table.txt")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# corpus / config helpers
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    if args.body_min > args.body_max:
        raise ConfigError("--body-min must be <= --body-max")
    lines = generate_corpus(
        lines=args.lines,
        words=args.words,
        body_len_range=(args.body_min, args.body_max),
        noise=args.noise,
        seed=args.seed,
    )
    write_corpus(args.out, lines)
    print(f"wrote {args.lines} lines over {args.words} word types to {args.out}")
    return 0


def cmd_init_config(args) -> int:
    path = Path(args.out)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")
    path.write_text(serialize_run_config(default_run_config()), encoding="utf-8")
    print(f"wrote default config to {path}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmlm",
        description="Position-masked language model pretraining at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run two-phase pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=Mode.ALL, default=Mode.POSITION)
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--out", default=None, help="override the output base directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="span finetuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--dropout-grad",
        choices=DropoutMode.ALL,
        default=None,
        help="override finetune.dropout_gradient_mode",
    )
    p.add_argument("--seed", type=int, default=None, help="override finetune.seed")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="position-mask percentage grid")
    p.add_argument("--config", required=True)
    p.add_argument("--pcts", default="0.05,0.1,0.15")
    p.add_argument("--num-seeds", type=int, default=3)
    p.add_argument("--out", default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the tiny model")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate finished run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-corpus", help="write the synthetic ramp corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--lines", type=int, default=2000)
    p.add_argument("--words", type=int, default=1995)
    p.add_argument("--body-min", type=int, default=24)
    p.add_argument("--body-max", type=int, default=36)
    p.add_argument("--noise", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("init-config", help="write the default config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        _eprint(f"divergence: {e}")
        return 3
    except (GradCheckError, NonFiniteError) as e:
        _eprint(f"numerical error: {e}")
        return 3
    except (
        ConfigError,
        DataError,
        AssemblyError,
        ReportError,
        CheckpointLoadError,
        ValueError,
        OSError,
    ) as e:
        _eprint(f"error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
