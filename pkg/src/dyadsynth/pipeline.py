"""Experiment orchestration: splits, window extraction, model assembly,
generation, and method evaluation shared by the CLI and the test suites.

Splits are contiguous frame blocks within each source sample (never random
frames) so training windows cannot leak into validation or test windows.
Models train in standardized expression space; everything written to disk
or measured by metrics is in raw coordinate space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    NN_AUDIO_NOTE,
    TrainBank,
    codebook_random_walk,
    delayed_mirror,
    median_baseline,
    mirror,
    nn_audio,
    nn_motion,
    random_baseline,
    random_expression,
)
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, EmptyInput
from .fusion import FusionConfig, SpeakerEncoder
from .metrics import ClusterModel, MetricsReport, channel_suite, fit_clusters
from .motiondata import AudioFeatureSequence, DyadSample, ExprStats, MotionSequence
from .params import ParameterStore, save_checkpoint
from .predictor import PredictorConfig, PredictorModel, multi_sample_min_l2, rollout
from .rng import RngPool
from .vqvae import VqVaeConfig, VqVaeModel

BASELINE_METHODS = ("median", "random", "mirror", "delayed-mirror", "nn-motion",
                    "nn-audio", "random-expression", "codebook-walk")
ALL_METHODS = ("gt",) + BASELINE_METHODS + ("model",)


# -- model assembly ------------------------------------------------------------


def vq_config(cfg: ExperimentConfig) -> VqVaeConfig:
    return VqVaeConfig(
        frame_dim=cfg.d_m + 3, window=cfg.window, codebook_size=cfg.codebook_size,
        code_dim=cfg.code_dim, hidden=cfg.vq_hidden, heads=cfg.vq_heads,
        layers=cfg.vq_layers, conv_kernel=cfg.conv_kernel, train_len=cfg.vq_train_len,
        commit_weight=cfg.commit_weight)


def fusion_config(cfg: ExperimentConfig, mode: str | None = None) -> FusionConfig:
    return FusionConfig(
        motion_dim=cfg.d_m + 3, audio_dim=cfg.d_a, hidden=cfg.fusion_hidden,
        heads=cfg.fusion_heads, layers=cfg.fusion_layers, conv_kernel=cfg.conv_kernel,
        conv_stages=int(math.log2(cfg.window)), context_len=cfg.speaker_window,
        target_tokens=cfg.tau, rate_multiple=cfg.rate_multiple,
        mode=mode or cfg.fusion_mode, extra_summary_step=cfg.extra_summary_step)


def predictor_config(cfg: ExperimentConfig) -> PredictorConfig:
    tau_s = cfg.tau + (1 if cfg.extra_summary_step else 0)
    return PredictorConfig(
        codebook_size=cfg.codebook_size, context_tokens=cfg.tau, speaker_tokens=tau_s,
        d_k=cfg.fusion_hidden, hidden=cfg.pred_hidden, heads=cfg.pred_heads,
        layers=cfg.pred_layers)


def build_vqvae(cfg: ExperimentConfig, seed: int | None = None) -> VqVaeModel:
    return VqVaeModel(vq_config(cfg), cfg.seed if seed is None else seed)


@dataclass
class PredictorStack:
    encoder: SpeakerEncoder
    predictor: PredictorModel
    store: ParameterStore

    def save(self, path, cfg: ExperimentConfig, stats: ExprStats, step: int = 0,
             mode: str | None = None):
        save_checkpoint(self.store, path, step=step, meta={
            "kind": "predictor",
            "config": cfg.to_dict(),
            "fusion_mode": mode or cfg.fusion_mode,
            "expr_mean": [float(x) for x in stats.mean],
            "expr_std": [float(x) for x in stats.std],
        })


def build_predictor_stack(cfg: ExperimentConfig, seed: int | None = None,
                          mode: str | None = None) -> PredictorStack:
    seed = cfg.seed if seed is None else seed
    store = ParameterStore(seed)
    pool = RngPool(seed)
    enc = SpeakerEncoder(store, "speaker", fusion_config(cfg, mode), pool.stream("init/speaker"))
    pred = PredictorModel(store, "predictor", predictor_config(cfg), pool.stream("init/predictor"))
    return PredictorStack(encoder=enc, predictor=pred, store=store)


def load_predictor_stack(path, cfg: ExperimentConfig | None = None
                         ) -> tuple[PredictorStack, ExperimentConfig, ExprStats]:
    from .params import load_checkpoint

    values, seed, _step, meta = load_checkpoint(path)
    if meta.get("kind") != "predictor":
        raise ContractError(f"{path}: not a predictor checkpoint "
                            f"(kind={meta.get('kind')!r})")
    saved_cfg = ExperimentConfig(**meta["config"]).validate()
    cfg = cfg or saved_cfg
    stack = build_predictor_stack(saved_cfg, seed=seed, mode=meta.get("fusion_mode"))
    stack.store.load_values(values)
    stats = ExprStats(np.asarray(meta["expr_mean"], dtype=np.float32),
                      np.asarray(meta["expr_std"], dtype=np.float32))
    return stack, saved_cfg, stats


# -- splits and windows -----------------------------------------------------------


def split_samples(samples: list[DyadSample], cfg: ExperimentConfig
                  ) -> tuple[list[DyadSample], list[DyadSample], list[DyadSample]]:
    """Contiguous per-sample frame blocks: train | val | test."""
    train, val, test = [], [], []
    rate = cfg.rate_multiple
    for s in samples:
        n = len(s)
        cut1 = int(round(n * cfg.train_frac))
        cut2 = int(round(n * (cfg.train_frac + cfg.val_frac)))
        for lo, hi, bucket, tag in ((0, cut1, train, "train"),
                                    (cut1, cut2, val, "val"),
                                    (cut2, n, test, "test")):
            if hi - lo < 1:
                continue
            bucket.append(DyadSample(
                s.speaker_motion.slice(lo, hi),
                AudioFeatureSequence(s.speaker_audio.features[lo * rate:hi * rate], rate),
                s.listener_motion.slice(lo, hi),
                id=f"{s.id}/{tag}",
            ))
    return train, val, test


def vq_windows(samples: list[DyadSample], cfg: ExperimentConfig,
               stats: ExprStats) -> np.ndarray:
    """Standardized listener windows of vq_train_len frames, stride window_stride."""
    length = cfg.vq_train_len
    out = []
    for s in samples:
        mat = stats.standardize(s.listener_motion.matrix())
        for lo in range(0, len(s) - length + 1, cfg.window_stride):
            out.append(mat[lo:lo + length])
    if not out:
        raise EmptyInput(f"vq_windows: no sample spans {length} frames")
    return np.stack(out)


def predictor_windows(samples: list[DyadSample], cfg: ExperimentConfig,
                      stats: ExprStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(listener T-frame windows, speaker (t+w)-frame windows, speaker audio).

    The listener window covers the visible past (t frames) plus the
    supervised future; the speaker window covers the same past plus w
    frames of future context. Motion is standardized.
    """
    t_len = cfg.train_len
    sp_len = cfg.speaker_window
    rate = cfg.rate_multiple
    listeners, speakers, audios = [], [], []
    for s in samples:
        li = stats.standardize(s.listener_motion.matrix())
        sp = stats.standardize(s.speaker_motion.matrix())
        au = s.speaker_audio.features
        for lo in range(0, len(s) - t_len + 1, cfg.window_stride):
            listeners.append(li[lo:lo + t_len])
            speakers.append(sp[lo:lo + sp_len])
            audios.append(au[lo * rate:(lo + sp_len) * rate])
    if not listeners:
        raise EmptyInput(f"predictor_windows: no sample spans {t_len} frames")
    return np.stack(listeners), np.stack(speakers), np.stack(audios)


@dataclass
class EvalSet:
    """Aligned evaluation windows in raw coordinate space (+ model-space speaker)."""

    gt: np.ndarray              # (N, T, C) raw listener ground truth
    speaker: np.ndarray         # (N, T, C) raw speaker motion
    audio: np.ndarray           # (N, T*rate, d_a) speaker audio features
    sp_motion_ext: np.ndarray   # (N, T+w, C) raw speaker incl. future context
    audio_ext: np.ndarray       # (N, (T+w)*rate, d_a)
    window_ids: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.gt)


def eval_windows(samples: list[DyadSample], cfg: ExperimentConfig,
                 eval_len: int | None = None, stride: int | None = None) -> EvalSet:
    """Non-overlapping evaluation windows with w extra speaker frames for rollouts."""
    t_len = eval_len or cfg.train_len
    stride = stride or t_len
    need = t_len + cfg.window
    rate = cfg.rate_multiple
    gt, sp, au, spx, aux_, ids = [], [], [], [], [], []
    for s in samples:
        li = s.listener_motion.matrix()
        spm = s.speaker_motion.matrix()
        audio = s.speaker_audio.features
        for lo in range(0, len(s) - need + 1, stride):
            gt.append(li[lo:lo + t_len])
            sp.append(spm[lo:lo + t_len])
            au.append(audio[lo * rate:(lo + t_len) * rate])
            spx.append(spm[lo:lo + need])
            aux_.append(audio[lo * rate:(lo + need) * rate])
            ids.append(f"{s.id}@{lo}")
    if not gt:
        raise EmptyInput(f"eval_windows: no sample spans {need} frames")
    return EvalSet(np.stack(gt), np.stack(sp), np.stack(au), np.stack(spx),
                   np.stack(aux_), ids)


# -- generation --------------------------------------------------------------------


def generate_listener(stack: PredictorStack, vq: VqVaeModel, stats: ExprStats,
                      speaker_motion_raw: np.ndarray, speaker_audio: np.ndarray,
                      steps: int, p: float, rng: np.random.Generator,
                      fps: float = 30.0, d_m: int | None = None
                      ) -> tuple[MotionSequence, np.ndarray]:
    """One rollout in model space, de-standardized to a raw MotionSequence."""
    sp_std = stats.standardize(speaker_motion_raw)
    motion_std, tokens = rollout(stack.predictor, stack.encoder, vq, sp_std,
                                 np.asarray(speaker_audio, dtype=np.float32),
                                 steps, p, rng)
    raw = stats.destandardize(motion_std)
    d_m = d_m if d_m is not None else raw.shape[1] - 3
    return MotionSequence.from_matrix(raw, d_m, fps), tokens


# -- evaluation --------------------------------------------------------------------


def run_baseline(name: str, bank: TrainBank, eval_set: EvalSet, cfg: ExperimentConfig,
                 rng: np.random.Generator, vq: VqVaeModel | None = None) -> np.ndarray:
    """Predictions of one baseline for every evaluation window, raw space."""
    n, t_len, c = eval_set.gt.shape
    preds = np.empty((n, t_len, c), dtype=np.float32)
    if name == "median":
        med = median_baseline(bank)
        row = np.tile(med[:1], (t_len, 1))
        preds[:] = row
    elif name == "random":
        for i in range(n):
            preds[i] = _fit_len(random_baseline(bank, rng), t_len)
    elif name == "mirror":
        for i in range(n):
            preds[i] = mirror(eval_set.speaker[i], cfg.smooth_radius)
    elif name == "delayed-mirror":
        for i in range(n):
            preds[i] = delayed_mirror(eval_set.speaker[i], cfg.mirror_delay,
                                      cfg.smooth_radius)
    elif name == "nn-motion":
        for i in range(n):
            preds[i] = _fit_len(nn_motion(bank, _fit_len(eval_set.speaker[i],
                                                         bank.window_len)), t_len)
    elif name == "nn-audio":
        want = bank.window_len * cfg.rate_multiple
        for i in range(n):
            preds[i] = _fit_len(nn_audio(bank, _fit_len(eval_set.audio[i], want)), t_len)
    elif name == "random-expression":
        for i in range(n):
            preds[i] = random_expression(bank, rng, length=t_len)
    elif name == "codebook-walk":
        if vq is None:
            raise ConfigError("codebook-walk needs a vqvae checkpoint")
        steps = t_len // cfg.window
        for i in range(n):
            motion, _ = codebook_random_walk(vq, steps, rng)
            preds[i] = motion
    else:
        raise ConfigError(f"unknown method {name!r}; valid: {', '.join(ALL_METHODS)}")
    return preds


def _fit_len(window: np.ndarray, t_len: int) -> np.ndarray:
    if len(window) == t_len:
        return window
    if len(window) > t_len:
        return window[:t_len]
    reps = int(np.ceil(t_len / len(window)))
    return np.tile(window, (reps, 1))[:t_len]


@dataclass
class EvalContext:
    """Cluster models and projection functions shared across method rows."""

    expr_clusters: ClusterModel
    rot_clusters: ClusterModel
    d_m: int
    smile_channel: int
    max_lag: int

    @staticmethod
    def build(bank: TrainBank, cfg: ExperimentConfig) -> "EvalContext":
        frames = bank.all_listener_frames()
        d_m = frames.shape[1] - 3
        k_e = min(cfg.kmeans_k_expression, len(frames))
        k_r = min(cfg.kmeans_k_rotation, len(frames))
        return EvalContext(
            expr_clusters=fit_clusters(frames[:, :d_m], k_e, seed=cfg.kmeans_seed),
            rot_clusters=fit_clusters(frames[:, d_m:], k_r, seed=cfg.kmeans_seed),
            d_m=d_m,
            smile_channel=cfg.smile_channel,
            max_lag=cfg.max_lag,
        )


def evaluate_method(name: str, pred: np.ndarray, eval_set: EvalSet, ctx: EvalContext,
                    cfg: ExperimentConfig, notes: list[str] | None = None,
                    gt_index: np.ndarray | None = None) -> MetricsReport:
    """The full metric suite for one method's predictions (raw space).

    gt_index maps prediction rows to evaluation windows when a method emits
    several rollouts per window.
    """
    d_m = ctx.d_m
    is_gt = name == "gt"
    max_lag = min(ctx.max_lag, pred.shape[1] - 3)
    gt = eval_set.gt if gt_index is None else eval_set.gt[gt_index]
    speaker = eval_set.speaker if gt_index is None else eval_set.speaker[gt_index]

    def expr_series(block):
        return np.asarray(block[:, ctx.smile_channel], dtype=np.float64)

    def rot_series(block):
        return np.asarray(block[:, 0], dtype=np.float64)

    expression = channel_suite(pred[:, :, :d_m], gt[:, :, :d_m],
                               speaker[:, :, :d_m], ctx.expr_clusters,
                               expr_series, max_lag, include_reference=not is_gt)
    rotation = channel_suite(pred[:, :, d_m:], gt[:, :, d_m:],
                             speaker[:, :, d_m:], ctx.rot_clusters,
                             rot_series, max_lag, include_reference=not is_gt)
    return MetricsReport(method=name, expression=expression, rotation=rotation,
                         sample_count=len(pred), notes=notes or [],
                         config={"max_lag": max_lag, "smile_channel": ctx.smile_channel,
                                 "k_expression": ctx.expr_clusters.k,
                                 "k_rotation": ctx.rot_clusters.k})


def evaluate_methods(methods: list[str], eval_set: EvalSet, bank: TrainBank,
                     cfg: ExperimentConfig, rng_pool: RngPool,
                     model_preds: tuple[np.ndarray, np.ndarray] | None = None,
                     vq: VqVaeModel | None = None) -> list[MetricsReport]:
    """Reports for each requested method plus optional model predictions.

    model_preds is (predictions, window_index): several rollouts may map to
    the same evaluation window.
    """
    ctx = EvalContext.build(bank, cfg)
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; valid: {', '.join(ALL_METHODS)}")
    reports = []
    for name in methods:
        if name == "gt":
            reports.append(evaluate_method("gt", eval_set.gt, eval_set, ctx, cfg))
            continue
        if name == "model":
            if model_preds is None:
                raise ConfigError("method 'model' requires generated predictions (--pred)")
            preds, idx = model_preds
            reports.append(evaluate_method("model", preds, eval_set, ctx, cfg,
                                           gt_index=idx))
            continue
        notes = [NN_AUDIO_NOTE] if name == "nn-audio" else []
        preds = run_baseline(name, bank, eval_set, cfg,
                             rng_pool.stream(f"eval/{name}"), vq=vq)
        reports.append(evaluate_method(name, preds, eval_set, ctx, cfg, notes=notes))
    return reports


def multi_sample_curve(stack: PredictorStack, vq: VqVaeModel, stats: ExprStats,
                       eval_set: EvalSet, n_samples: int, p: float,
                       rng_pool: RngPool, limit: int | None = None) -> np.ndarray:
    """Average min-L2 curve over evaluation windows (model space)."""
    rng = rng_pool.stream("eval/multi-sample")
    curves = []
    count = len(eval_set) if limit is None else min(limit, len(eval_set))
    for i in range(count):
        sp_std = stats.standardize(eval_set.sp_motion_ext[i])
        gt_std = stats.standardize(eval_set.gt[i])
        curves.append(multi_sample_min_l2(stack.predictor, stack.encoder, vq,
                                          sp_std, eval_set.audio_ext[i], gt_std,
                                          n_samples, p, rng))
    return np.mean(np.stack(curves), axis=0)
