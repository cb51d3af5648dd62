"""Command-line pipeline: synth-data, train-vqvae, train-predictor, generate,
evaluate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
Every failure prints a single machine-parsable line `error: <Kind>: <reason>`
to stderr. Reports are written as delimited CSV plus rendered PNG figures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .baselines import TrainBank
from .config import ENV_CONFIG_PATH, load_config
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInput,
    DyadError,
    EmptyInput,
    FormatError,
    IoError,
    NumericalError,
    RangeError,
    ShapeError,
)
from .motiondata import (
    AudioFeatureSequence,
    DyadSample,
    ExprStats,
    read_dyad_file,
    synth_dataset,
    write_dyad_file,
)
from .params import restore_store
from .predictor import train_predictor
from .report import (
    plot_curves,
    plot_histogram,
    plot_tlcc_curves,
    render_text_table,
    write_report_csv,
    write_series_csv,
)
from .rng import RngPool
from .vqvae import VqVaeModel, train_vqvae

_EXIT_CODES = (
    (ConfigError, 2),
    (ContractError, 2),
    ((FormatError, IoError, EmptyInput, RangeError, ShapeError, DegenerateInput), 3),
    (NumericalError, 4),
)


def _exit_code(err: DyadError) -> int:
    for kinds, code in _EXIT_CODES:
        if isinstance(err, kinds):
            return code
    return 3


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help=f"config file (default: ${ENV_CONFIG_PATH})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")


def _resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return load_config(args.config, overrides)


def _split_by_name(samples, cfg, name: str):
    train, val, test = pipeline.split_samples(samples, cfg)
    if name == "train":
        return train
    if name == "val":
        return val
    if name == "test":
        return test
    if name == "all":
        return list(samples)
    raise ConfigError(f"unknown split {name!r}; valid: train, val, test, all")


# -- commands -------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _resolve_config(args)
    samples = synth_dataset(args.seed, args.samples, args.length, args.modes,
                            noise=args.noise, lag=args.lag, d_m=cfg.d_m, d_a=cfg.d_a,
                            rate_multiple=cfg.rate_multiple, fps=cfg.fps)
    write_dyad_file(samples, args.out)
    motion = np.concatenate([s.listener_motion.matrix() for s in samples])
    print(f"wrote {len(samples)} samples x {args.length} frames "
          f"(d_m={cfg.d_m}, d_a={cfg.d_a}, fps={cfg.fps:g}) to {args.out}")
    print(f"listener motion mean={motion.mean():.4f} std={motion.std():.4f}")
    return 0


def cmd_train_vqvae(args) -> int:
    cfg = _resolve_config(args)
    data = read_dyad_file(args.data, d_m=cfg.d_m, d_a=cfg.d_a)
    train, val, _ = pipeline.split_samples(data, cfg)
    stats = data.expr_stats
    train_w = pipeline.vq_windows(train, cfg, stats)
    val_w = pipeline.vq_windows(val, cfg, stats) if val else None
    model = pipeline.build_vqvae(cfg)
    report = train_vqvae(model, train_w, epochs=cfg.vq_epochs, batch_size=cfg.batch,
                         base_lr=cfg.vq_base_lr, warmup=cfg.warmup, val_windows=val_w,
                         d_m=cfg.d_m, rng_pool=RngPool(cfg.seed),
                         codebook_warmup_epochs=cfg.vq_codebook_warmup,
                         log_every=args.log_every)
    model.save(args.out_checkpoint, step=report.steps)

    outdir = Path(args.report_dir or Path(args.out_checkpoint).parent)
    outdir.mkdir(parents=True, exist_ok=True)
    curves = {"total": report.loss_total, "reconstruction": report.loss_reconstruction,
              "codebook": report.loss_codebook, "commitment": report.loss_commitment}
    write_series_csv(curves, outdir / "vqvae_losses.csv")
    plot_curves(curves, outdir / "vqvae_losses.png", "VQ-VAE training loss",
                "epoch", "loss", logy=True)
    write_series_csv({"usage": [float(u) for u in report.usage]},
                     outdir / "vqvae_codebook_usage.csv")
    plot_histogram(report.usage, outdir / "vqvae_codebook_usage.png",
                   "codebook usage", "code index")
    print(f"trained {report.epochs} epochs ({report.steps} steps); "
          f"final loss {report.loss_total[-1]:.4f}; "
          f"codebook usage {report.usage_fraction * 100:.1f}%")
    if report.val_quant_l2_expression is not None:
        print(f"held-out quantization L2: expression {report.val_quant_l2_expression:.4f} "
              f"rotation {report.val_quant_l2_rotation:.4f}")
    print(f"checkpoint: {args.out_checkpoint}")
    return 0


def cmd_train_predictor(args) -> int:
    cfg = _resolve_config(args)
    if args.no_audio and args.no_motion:
        raise ConfigError("--no-audio and --no-motion cannot be combined")
    mode = cfg.fusion_mode
    if args.fusion:
        mode = {"cross": "cross", "concat": "concat"}[args.fusion]
    if args.no_audio:
        mode = "motion"
    if args.no_motion:
        mode = "audio"

    data = read_dyad_file(args.data, d_m=cfg.d_m, d_a=cfg.d_a)
    vq = VqVaeModel.load(args.vqvae).freeze()
    train, val, _ = pipeline.split_samples(data, cfg)
    stats = data.expr_stats
    li, sp, au = pipeline.predictor_windows(train, cfg, stats)
    val_tuple = None
    if val:
        try:
            vli, vsp, vau = pipeline.predictor_windows(val, cfg, stats)
            val_tuple = (vli, vsp, vau)
        except EmptyInput:
            pass
    stack = pipeline.build_predictor_stack(cfg, mode=mode)
    report = train_predictor(stack.predictor, stack.encoder, vq, stack.store,
                             li, sp, au, epochs=cfg.pred_epochs, batch_size=cfg.batch,
                             base_lr=cfg.pred_base_lr, warmup=cfg.warmup,
                             mask_prob=cfg.mask_prob, aux_weight=cfg.aux_weight,
                             val=val_tuple, rng_pool=RngPool(cfg.seed),
                             log_every=args.log_every)
    stack.save(args.out_checkpoint, cfg, stats, step=report.steps, mode=mode)

    outdir = Path(args.report_dir or Path(args.out_checkpoint).parent)
    outdir.mkdir(parents=True, exist_ok=True)
    curves = {"loss": report.loss, "next_token_ce": report.next_token_ce}
    if report.val_accuracy:
        curves["val_accuracy"] = report.val_accuracy
    write_series_csv(curves, outdir / "predictor_losses.csv")
    plot_curves(curves, outdir / "predictor_losses.png",
                f"predictor training (fusion={mode})", "epoch", "value")
    print(f"trained {report.epochs} epochs ({report.steps} steps, fusion={mode}); "
          f"initial CE {report.initial_ce:.3f}; final loss {report.loss[-1]:.4f}")
    if report.val_accuracy:
        print(f"held-out next-token accuracy: {report.val_accuracy[-1]:.3f}")
    print(f"checkpoint: {args.out_checkpoint}")
    return 0


def cmd_generate(args) -> int:
    vq = VqVaeModel.load(args.vqvae).freeze()
    stack, cfg, stats = pipeline.load_predictor_stack(args.predictor)
    data = read_dyad_file(args.speaker_data, d_m=cfg.d_m, d_a=cfg.d_a)
    sources = _split_by_name(data, cfg, args.split)
    if not sources:
        raise EmptyInput(f"generate: split {args.split!r} of {args.speaker_data} is empty")
    p = args.nucleus_p if args.nucleus_p is not None else cfg.nucleus_p
    pool = RngPool(args.seed)
    rate = cfg.rate_multiple
    out_samples = []
    for s in sources:
        max_steps = (len(s) - cfg.window) // cfg.window
        steps = args.steps or max_steps
        if steps > max_steps:
            raise RangeError(f"generate: {steps} steps need {steps * cfg.window + cfg.window} "
                             f"speaker frames, sample {s.id!r} has {len(s)}")
        for k in range(args.samples):
            rng = pool.stream(f"generate/{s.id}/{k}")
            listener, _ = pipeline.generate_listener(
                stack, vq, stats, s.speaker_motion.matrix(), s.speaker_audio.features,
                steps, p, rng, fps=cfg.fps, d_m=cfg.d_m)
            frames = len(listener)
            out_samples.append(DyadSample(
                s.speaker_motion.slice(0, frames),
                AudioFeatureSequence(s.speaker_audio.features[:frames * rate], rate),
                listener,
                id=f"{s.id}-generated#{k}",
            ))
    write_dyad_file(out_samples, args.out, expr_stats=stats)
    print(f"wrote {len(out_samples)} rollouts ({args.samples} per speaker, "
          f"nucleus p={p:g}, seed={args.seed}) to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    gt_data = read_dyad_file(args.gt, d_m=cfg.d_m, d_a=cfg.d_a)
    bank_data = read_dyad_file(args.train_bank, d_m=cfg.d_m, d_a=cfg.d_a)
    bank_samples = _split_by_name(bank_data, cfg, "train" if args.train_bank == args.gt
                                  else "all")
    bank = TrainBank.from_samples(bank_samples, window_len=cfg.train_len,
                                  stride=cfg.train_len)
    eval_samples = _split_by_name(gt_data, cfg, args.split)
    if not eval_samples:
        raise EmptyInput(f"evaluate: split {args.split!r} of {args.gt} is empty")
    eval_set = pipeline.eval_windows(eval_samples, cfg)

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    vq = VqVaeModel.load(args.vqvae).freeze() if args.vqvae else None

    model_preds = None
    if args.pred:
        model_preds = _collect_model_predictions(args.pred, eval_samples, eval_set, cfg)
        if "model" not in methods:
            methods.append("model")
    reports = pipeline.evaluate_methods(methods, eval_set, bank, cfg,
                                        RngPool(args.seed), model_preds=model_preds,
                                        vq=vq)

    outdir = Path(args.out_report)
    outdir.mkdir(parents=True, exist_ok=True)
    text = render_text_table(reports)
    (outdir / "report.txt").write_text(text, encoding="utf-8")
    write_report_csv(reports, outdir / "report.csv")
    plot_tlcc_curves(reports, outdir / "tlcc_expression.png", "expression")
    plot_tlcc_curves(reports, outdir / "tlcc_rotation.png", "rotation")

    if args.multi_sample:
        if not (args.vqvae and args.predictor):
            raise ConfigError("--multi-sample needs --vqvae and --predictor checkpoints")
        stack, pcfg, stats = pipeline.load_predictor_stack(args.predictor)
        curve = pipeline.multi_sample_curve(stack, vq, stats, eval_set,
                                            args.multi_sample, cfg.nucleus_p,
                                            RngPool(args.seed),
                                            limit=args.multi_sample_windows)
        write_series_csv({"avg_min_l2": [float(v) for v in curve]},
                         outdir / "multi_sample.csv")
        plot_curves({"avg min L2": list(curve)}, outdir / "multi_sample.png",
                    "avg. min L2 to ground truth vs samples drawn", "samples", "L2")

    sys.stdout.write(text)
    print(f"report written to {outdir}")
    return 0


def _collect_model_predictions(pred_path, eval_samples, eval_set, cfg
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Cut generated listeners into the ground-truth window grid.

    Returns (predictions, window_index): several rollouts of one speaker all
    map onto that speaker's evaluation windows.
    """
    pred_data = read_dyad_file(pred_path, d_m=cfg.d_m, d_a=cfg.d_a)
    t_len = cfg.train_len
    need = t_len + cfg.window
    window_pos = {wid: i for i, wid in enumerate(eval_set.window_ids)}
    preds = []
    idx = []
    for s in eval_samples:
        matches = [p for p in pred_data
                   if p.id == s.id or p.id.startswith(f"{s.id}-generated")]
        if not matches:
            raise FormatError(f"evaluate: {pred_path} has no prediction for sample "
                              f"{s.id!r}")
        for m in matches:
            mat = m.listener_motion.matrix()
            for lo in range(0, len(s) - need + 1, t_len):
                wid = f"{s.id}@{lo}"
                if lo + t_len <= len(mat) and wid in window_pos:
                    preds.append(mat[lo:lo + t_len])
                    idx.append(window_pos[wid])
    if not preds:
        raise EmptyInput(f"evaluate: no aligned prediction windows in {pred_path}")
    return np.stack(preds), np.asarray(idx)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyadsynth",
        description="Dyadic listener-motion synthesis and evaluation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic dyad dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--modes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--lag", type=int, default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-vqvae", help="train the listener motion codebook")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--report-dir")
    p.add_argument("--log-every", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=cmd_train_vqvae)

    p = sub.add_parser("train-predictor", help="train speaker fusion + predictor")
    p.add_argument("--data", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--report-dir")
    p.add_argument("--no-audio", action="store_true")
    p.add_argument("--no-motion", action="store_true")
    p.add_argument("--fusion", choices=("cross", "concat"))
    p.add_argument("--log-every", type=int, default=0)
    _add_config_args(p)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("generate", help="roll out listeners for speaker data")
    p.add_argument("--speaker-data", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--predictor", required=True)
    p.add_argument("--samples", type=int, default=1, help="rollouts per speaker")
    p.add_argument("--steps", type=int, default=None, help="tokens per rollout")
    p.add_argument("--nucleus-p", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    default_methods = ("gt",) + tuple(m for m in pipeline.BASELINE_METHODS
                                      if m != "codebook-walk")
    p = sub.add_parser("evaluate", help="metric suite over methods and predictions")
    p.add_argument("--pred", help="generated dataset file to evaluate as 'model'")
    p.add_argument("--gt", required=True)
    p.add_argument("--train-bank", required=True)
    p.add_argument("--methods", default=",".join(default_methods))
    p.add_argument("--out-report", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vqvae", help="needed for codebook-walk and --multi-sample")
    p.add_argument("--predictor", help="needed for --multi-sample")
    p.add_argument("--multi-sample", type=int, default=0)
    p.add_argument("--multi-sample-windows", type=int, default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DyadError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
