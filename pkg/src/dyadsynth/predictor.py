"""Autoregressive prediction of listener codebook indices.

The predictor consumes the fused speaker embedding concatenated with
embeddings of past listener tokens (hidden slots are fed as zero vectors and
made unattendable) and emits a distribution over the next codebook index.
Training teacher-forces with random prefix masking; inference rolls out
token by token with nucleus sampling, never touching ground-truth listener
motion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyInput, RangeError, ShapeError
from .fusion import SpeakerEncoder, encode_speaker
from .nn import Embedding, Linear, PositionTable, Transformer
from .params import AdamState, ParameterStore, adam_step, noam_lr
from .rng import RngPool
from .tensor import (
    Tensor,
    concat,
    cross_entropy_with_logits,
    narrow,
    no_grad,
    reshape,
)
from .vqvae import TokenSequence, VqVaeModel, tokenize_batch

__all__ = [
    "PredictorConfig",
    "PredictorModel",
    "predict_dist",
    "nucleus_sample",
    "rollout",
    "multi_sample_min_l2",
    "train_predictor",
    "PredictorTrainReport",
]


@dataclass
class PredictorConfig:
    codebook_size: int = 200    # K
    context_tokens: int = 4     # tau: listener token slots
    speaker_tokens: int = 4     # tau_s: speaker embedding steps
    d_k: int = 1024             # embedding dim shared with the speaker encoder
    hidden: int = 200
    heads: int = 10
    layers: int = 5
    train_positions: int = 4    # output positions read during training


class PredictorModel:
    """Registers parameters under `prefix` in the caller's store."""

    def __init__(self, store: ParameterStore, prefix: str, cfg: PredictorConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        seq = cfg.speaker_tokens + cfg.context_tokens
        self.token_emb = Embedding(store, f"{prefix}.tokens", cfg.codebook_size, cfg.d_k, rng)
        self.in_proj = Linear(store, f"{prefix}.in_proj", cfg.d_k, cfg.hidden, rng)
        self.segment = Embedding(store, f"{prefix}.segment", 2, cfg.hidden, rng)
        self.pos = PositionTable(store, f"{prefix}", seq, cfg.hidden, rng)
        self.tf = Transformer(store, f"{prefix}.tf", cfg.hidden, cfg.heads, cfg.layers, rng)
        # near-zero readout so the initial distribution is uniform (CE ~ ln K)
        self.head = Linear(store, f"{prefix}.head", cfg.hidden, cfg.codebook_size, rng,
                           init_scale=0.02)


def forward_logits(model: PredictorModel, speaker: Tensor, tokens: np.ndarray,
                   visible: np.ndarray) -> Tensor:
    """Batched logits over every position of the concatenated sequence.

    speaker: (B, tau_s, d_k); tokens: (B, tau) ints; visible: (B, tau) bools.
    Hidden token slots contribute zero embeddings and cannot be attended to,
    so the output is exactly invariant to their token values.
    """
    cfg = model.cfg
    if not isinstance(speaker, Tensor):
        speaker = Tensor(np.asarray(speaker, dtype=np.float32))
    if speaker.ndim != 3 or speaker.shape[1] != cfg.speaker_tokens or speaker.shape[2] != cfg.d_k:
        raise ShapeError(f"forward_logits: speaker {speaker.shape} must be "
                         f"(B, {cfg.speaker_tokens}, {cfg.d_k})")
    tokens = np.asarray(tokens, dtype=np.int64)
    visible = np.asarray(visible, dtype=bool)
    b = speaker.shape[0]
    if tokens.shape != (b, cfg.context_tokens):
        raise ShapeError(f"forward_logits: tokens {tokens.shape} must be (B, {cfg.context_tokens})")
    if visible.shape != tokens.shape:
        raise ShapeError(f"forward_logits: mask {visible.shape} does not match tokens {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.codebook_size):
        raise RangeError(f"forward_logits: token outside [0, {cfg.codebook_size}): "
                         f"{int(tokens.min())}..{int(tokens.max())}")

    emb = model.token_emb(tokens)
    emb = emb * Tensor(visible[:, :, None].astype(np.float32))
    x = concat([speaker, emb], axis=1)
    x = model.in_proj(x)
    seq = cfg.speaker_tokens + cfg.context_tokens
    seg_idx = np.array([0] * cfg.speaker_tokens + [1] * cfg.context_tokens)
    x = x + model.pos(seq) + model.segment(seg_idx)
    key_mask = np.concatenate(
        [np.ones((b, cfg.speaker_tokens), dtype=bool), visible], axis=1)
    h = model.tf(x, key_mask)
    return model.head(h)


def predict_dist(model: PredictorModel, speaker, past, mask, with_aux: bool = False):
    """Distribution over the next codebook index for one sample.

    speaker: (tau_s, d_k); past: TokenSequence or (tau,) ints; mask: (tau,)
    bools, True = visible. Returns a float64 probability vector of length K
    (plus the auxiliary training-position distributions if requested).
    """
    cfg = model.cfg
    if isinstance(past, TokenSequence):
        past = past.tokens
    past = np.asarray(past, dtype=np.int64).reshape(-1)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if past.shape != (cfg.context_tokens,):
        raise ShapeError(f"predict_dist: past {past.shape} must be ({cfg.context_tokens},)")
    if mask.shape != past.shape:
        raise ShapeError(f"predict_dist: mask {mask.shape} does not match past {past.shape}")
    sp = speaker.data if isinstance(speaker, Tensor) else np.asarray(speaker, dtype=np.float32)
    if sp.ndim == 2:
        sp = sp[None]
    with no_grad():
        logits = forward_logits(model, Tensor(sp), past[None], mask[None]).data[0]

    def to_dist(row):
        z = row.astype(np.float64)
        z -= z.max()
        e = np.exp(z)
        return e / e.sum()

    dist = to_dist(logits[0])
    if not with_aux:
        return dist
    aux = np.stack([to_dist(logits[i]) for i in range(1, cfg.train_positions)])
    return dist, aux


def nucleus_sample(dist: np.ndarray, p: float, rng: np.random.Generator) -> int:
    """Sample from the smallest probability-sorted prefix with mass >= p.

    Ties in probability break toward the lower index. The kept prefix is
    renormalized before sampling.
    """
    if not 0.0 < p <= 1.0:
        raise ContractError(f"nucleus_sample: p must be in (0, 1], got {p}")
    dist = np.asarray(dist, dtype=np.float64).reshape(-1)
    if dist.size == 0 or dist.min() < -1e-9 or abs(dist.sum() - 1.0) > 1e-3:
        raise ContractError("nucleus_sample: dist must be a probability vector")
    order = np.argsort(-dist, kind="stable")
    csum = np.cumsum(dist[order])
    cut = int(np.searchsorted(csum, min(p, csum[-1]) - 1e-12)) + 1
    kept = order[:cut]
    mass = dist[kept]
    mass = mass / mass.sum()
    u = rng.random()
    pick = int(np.searchsorted(np.cumsum(mass), u, side="right"))
    return int(kept[min(pick, cut - 1)])


def nucleus_set(dist: np.ndarray, p: float) -> np.ndarray:
    """The index set nucleus_sample draws from, for verification."""
    dist = np.asarray(dist, dtype=np.float64).reshape(-1)
    order = np.argsort(-dist, kind="stable")
    csum = np.cumsum(dist[order])
    cut = int(np.searchsorted(csum, min(p, csum[-1]) - 1e-12)) + 1
    return np.sort(order[:cut])


def _edge_padded(arr: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """arr[lo:hi] with lo possibly negative; the head repeats arr[0]."""
    if lo >= 0:
        return arr[lo:hi]
    pad = np.repeat(arr[:1], -lo, axis=0)
    return np.concatenate([pad, arr[:hi]], axis=0)


def rollout(model: PredictorModel, enc: SpeakerEncoder, vq: VqVaeModel,
            speaker_motion: np.ndarray, speaker_audio: np.ndarray, steps: int,
            p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Autoregressive generation of `steps` tokens; returns (motion, tokens).

    The listener history starts fully masked; each step encodes the current
    speaker window (t past frames plus w of future context, the window
    sliding by w per generated token), samples the next token by nucleus
    sampling, and finally decodes the whole token sequence to steps*w motion
    frames. No ground-truth listener input is consulted.
    """
    cfg = model.cfg
    w = vq.cfg.window
    t_ctx = cfg.context_tokens * w
    rate = enc.cfg.rate_multiple
    need = steps * w + w
    if len(speaker_motion) < need:
        raise RangeError(f"rollout: speaker stream of {len(speaker_motion)} frames is too "
                         f"short for {steps} steps (need {need})")
    if len(speaker_audio) < need * rate - (rate - 1):
        raise RangeError(f"rollout: speaker audio of {len(speaker_audio)} frames is too "
                         f"short for {steps} steps (need about {need * rate})")
    tokens: list[int] = []
    tau = cfg.context_tokens
    for j in range(steps):
        lo = j * w - t_ctx
        hi = j * w + w
        m_win = _edge_padded(speaker_motion, lo, hi)
        a_win = _edge_padded(speaker_audio, lo * rate, hi * rate)
        with no_grad():
            m_prime = encode_speaker(enc, m_win[None], a_win[None])
        past = np.zeros(tau, dtype=np.int64)
        visible = np.zeros(tau, dtype=bool)
        k = min(len(tokens), tau)
        if k:
            past[tau - k:] = tokens[-k:]
            visible[tau - k:] = True
        dist = predict_dist(model, m_prime, past, visible)
        tokens.append(nucleus_sample(dist, p, rng))
    token_arr = np.asarray(tokens, dtype=np.int64)
    motion = vq.decode_tokens(token_arr)
    return motion, token_arr


def multi_sample_min_l2(model: PredictorModel, enc: SpeakerEncoder, vq: VqVaeModel,
                        speaker_motion: np.ndarray, speaker_audio: np.ndarray,
                        gt_listener: np.ndarray, n_samples: int, p: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Min L2-to-ground-truth over the first x of n rollouts, for x = 1..n.

    Non-increasing by construction (the minimum runs over growing prefixes).
    """
    if n_samples < 1:
        raise ContractError(f"multi_sample_min_l2: n_samples must be >= 1, got {n_samples}")
    steps = len(gt_listener) // vq.cfg.window
    l2s = []
    for _ in range(n_samples):
        motion, _ = rollout(model, enc, vq, speaker_motion, speaker_audio, steps, p, rng)
        l2s.append(float(np.linalg.norm(motion - gt_listener)))
    return np.minimum.accumulate(np.asarray(l2s))


@dataclass
class PredictorTrainReport:
    epochs: int
    steps: int
    initial_ce: float
    loss: list[float]
    next_token_ce: list[float]
    val_accuracy: list[float]


def _draw_visibility(b: int, tau: int, mask_prob: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Teacher-forcing masks: with prob mask_prob hide a random prefix.

    The prefix boundary u is uniform on [0, tau]; tokens before u are hidden.
    """
    vis = np.ones((b, tau), dtype=bool)
    masked = rng.random(b) < mask_prob
    cuts = rng.integers(0, tau + 1, size=b)
    col = np.arange(tau)
    vis[masked] = col[None, :] >= cuts[masked, None]
    return vis


def next_token_accuracy(model: PredictorModel, enc: SpeakerEncoder,
                        speaker_motion: np.ndarray, speaker_audio: np.ndarray,
                        tokens: np.ndarray, batch_size: int = 64) -> float:
    """Top-1 accuracy of the next-token head under a fully visible past."""
    tau = model.cfg.context_tokens
    hits = 0
    for lo in range(0, len(tokens), batch_size):
        sl = slice(lo, lo + batch_size)
        with no_grad():
            sp = encode_speaker(enc, speaker_motion[sl], speaker_audio[sl])
            logits = forward_logits(model, sp, tokens[sl, :tau],
                                    np.ones_like(tokens[sl, :tau], dtype=bool))
        pred = logits.data[:, 0, :].argmax(axis=1)
        hits += int((pred == tokens[sl, tau]).sum())
    return hits / len(tokens)


def train_predictor(model: PredictorModel, enc: SpeakerEncoder, vq: VqVaeModel,
                    store: ParameterStore, listener_windows: np.ndarray,
                    speaker_motion: np.ndarray, speaker_audio: np.ndarray, *,
                    epochs: int, batch_size: int = 32, base_lr: float = 0.01,
                    warmup: int = 4000, mask_prob: float = 0.5, aux_weight: float = 1.0,
                    val: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
                    rng_pool: RngPool | None = None,
                    log_every: int = 0) -> PredictorTrainReport:
    """Joint teacher-forced training of predictor + speaker encoder.

    The frozen VQ-VAE tokenizes each 2*tau*w-frame listener window into
    2*tau tokens: the first tau are the visible past, the rest supervise the
    train_positions output heads (position 0 is the next token, the others
    act as a temporal regularizer at weight aux_weight).
    """
    if not vq.frozen:
        raise ContractError("train_predictor: the VQ-VAE must be frozen")
    listener_windows = np.asarray(listener_windows, dtype=np.float32)
    if len(listener_windows) == 0:
        raise EmptyInput("train_predictor: empty dataset")
    n = len(listener_windows)
    if len(speaker_motion) != n or len(speaker_audio) != n:
        raise ShapeError(f"train_predictor: {n} listener windows vs "
                         f"{len(speaker_motion)} speaker motion / {len(speaker_audio)} audio")
    cfg = model.cfg
    tau = cfg.context_tokens
    npos = cfg.train_positions
    need = (tau + npos) * vq.cfg.window
    if listener_windows.shape[1] != need:
        raise ShapeError(f"train_predictor: listener windows of {listener_windows.shape[1]} "
                         f"frames, need {need}")
    if rng_pool is None:
        rng_pool = RngPool(store.rng_seed)
    shuffle = rng_pool.stream("pred/shuffle")
    mask_rng = rng_pool.stream("pred/mask")

    tokens = tokenize_batch(vq, listener_windows)  # (N, tau + npos)
    val_tokens = None
    if val is not None:
        val_tokens = tokenize_batch(vq, np.asarray(val[0], dtype=np.float32))

    opt = AdamState()
    weights = np.array([1.0] + [aux_weight] * (npos - 1))
    wsum = weights.sum()
    losses: list[float] = []
    next_ces: list[float] = []
    accs: list[float] = []
    initial_ce = None
    step = 0
    for epoch in range(epochs):
        perm = shuffle.permutation(n)
        ep_loss = ep_next = 0.0
        batches = 0
        for lo in range(0, n, batch_size):
            pick = perm[lo:lo + batch_size]
            b = len(pick)
            sp = encode_speaker(enc, speaker_motion[pick], speaker_audio[pick])
            vis = _draw_visibility(b, tau, mask_prob, mask_rng)
            logits = forward_logits(model, sp, tokens[pick, :tau], vis)
            ces = []
            for i in range(npos):
                pos_logits = reshape(narrow(logits, 1, i, 1), (b, cfg.codebook_size))
                ces.append(cross_entropy_with_logits(pos_logits, tokens[pick, tau + i]))
            loss = ces[0] * (weights[0] / wsum)
            for i in range(1, npos):
                loss = loss + ces[i] * (weights[i] / wsum)
            if initial_ce is None:
                initial_ce = float(np.mean([c.item() for c in ces]))
            loss.backward()
            step += 1
            adam_step(store, opt, noam_lr(step, base_lr, warmup, cfg.hidden))
            store.zero_grads()
            ep_loss += loss.item()
            ep_next += ces[0].item()
            batches += 1
        losses.append(ep_loss / batches)
        next_ces.append(ep_next / batches)
        if val is not None:
            accs.append(next_token_accuracy(model, enc, np.asarray(val[1], dtype=np.float32),
                                            np.asarray(val[2], dtype=np.float32), val_tokens))
        if log_every and (epoch + 1) % log_every == 0:
            msg = f"predictor epoch {epoch + 1}/{epochs}: loss={losses[-1]:.4f}"
            if accs:
                msg += f" val_acc={accs[-1]:.3f}"
            print(msg)
    return PredictorTrainReport(epochs=epochs, steps=step, initial_ce=initial_ce,
                                loss=losses, next_token_ce=next_ces, val_accuracy=accs)
