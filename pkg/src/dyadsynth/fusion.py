"""Speaker encoder: fuses speaker motion and audio into a short embedding.

The cross-modal path computes attention queries from the (projected) raw
audio at every block while keys/values come from the running motion stream;
convolution + pooling stages then downsample the fused sequence to the
listener token rate. Ablation modes replace cross-attention with
per-modality self-attention transformers fused by feature concatenation
("concat") or drop one modality entirely ("motion", "audio").
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .motiondata import AudioFeatureSequence
from .nn import (
    ConvDownsampler,
    CrossAttentionBlock,
    LayerNorm,
    Linear,
    PositionTable,
    Transformer,
)
from .params import ParameterStore
from .tensor import Tensor, concat, narrow, reshape

__all__ = ["FusionConfig", "SpeakerEncoder", "pool_audio", "cross_attend", "encode_speaker"]

FUSION_MODES = ("cross", "concat", "motion", "audio")


@dataclass
class FusionConfig:
    motion_dim: int = 56        # d_m + 3
    audio_dim: int = 128        # d_a
    hidden: int = 1024          # d_k
    heads: int = 8
    layers: int = 12
    conv_kernel: int = 5
    conv_stages: int = 3        # downsample factor 2**stages
    context_len: int = 40       # speaker frames per window (t + w)
    target_tokens: int = 4      # tau, the listener token rate
    rate_multiple: int = 4
    mode: str = "cross"
    extra_summary_step: bool = False  # emit tau+1 steps instead of tau

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ContractError(f"fusion mode {self.mode!r} not one of {FUSION_MODES}")

    @property
    def output_tokens(self) -> int:
        return self.target_tokens + (1 if self.extra_summary_step else 0)


class SpeakerEncoder:
    """Registers parameters under `prefix` in the caller's store."""

    def __init__(self, store: ParameterStore, prefix: str, cfg: FusionConfig,
                 rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.hidden
        # single-modality ablations register no parameters for the dropped stream
        self.audio_proj = (Linear(store, f"{prefix}.audio_proj", cfg.audio_dim, d, rng)
                           if cfg.mode != "motion" else None)
        self.motion_proj = (Linear(store, f"{prefix}.motion_proj", cfg.motion_dim, d, rng)
                            if cfg.mode != "audio" else None)
        self.pos = PositionTable(store, f"{prefix}", cfg.context_len, d, rng)
        if cfg.mode == "cross":
            self.blocks = [CrossAttentionBlock(store, f"{prefix}.block{i}", d, cfg.heads, rng)
                           for i in range(cfg.layers)]
            self.ln_f = LayerNorm(store, f"{prefix}.lnf", d)
        elif cfg.mode == "concat":
            self.motion_tf = Transformer(store, f"{prefix}.motion_tf", d, cfg.heads,
                                         cfg.layers, rng)
            self.audio_tf = Transformer(store, f"{prefix}.audio_tf", d, cfg.heads,
                                        cfg.layers, rng)
            self.fuse = Linear(store, f"{prefix}.fuse", 2 * d, d, rng)
        elif cfg.mode == "motion":
            self.motion_tf = Transformer(store, f"{prefix}.motion_tf", d, cfg.heads,
                                         cfg.layers, rng)
        else:  # audio
            self.audio_tf = Transformer(store, f"{prefix}.audio_tf", d, cfg.heads,
                                        cfg.layers, rng)
        self.down = ConvDownsampler(store, f"{prefix}.down", d, d, cfg.conv_stages,
                                    cfg.conv_kernel, rng)


def pool_audio(audio, target_len: int, rate_multiple: int = 4) -> np.ndarray:
    """Non-overlapping max-pool of audio features down to the motion rate.

    Accepts (frames, d_a) or (B, frames, d_a); frames must be within
    rate_multiple-1 of rate_multiple*target_len (zero-padded up, truncated
    down is not tolerated beyond that).
    """
    arr = audio.features if isinstance(audio, AudioFeatureSequence) else np.asarray(audio)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"pool_audio: expected (frames, d_a) or (B, frames, d_a), got {arr.shape}")
    want = rate_multiple * target_len
    have = arr.shape[1]
    if have != want:
        if have < want - (rate_multiple - 1) or have > want + (rate_multiple - 1):
            raise ShapeError(f"pool_audio: audio length {have} incompatible with "
                             f"{rate_multiple} x {target_len} = {want} motion-rate frames")
        if have < want:
            arr = np.pad(arr, ((0, 0), (0, want - have), (0, 0)))
        else:
            arr = arr[:, :want]
    pooled = arr.reshape(arr.shape[0], target_len, rate_multiple, arr.shape[2]).max(axis=2)
    return pooled[0] if squeeze else pooled


def _as_batched(x, dim: int, what: str) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    squeezed = False
    if t.ndim == 2:
        t = reshape(t, (1,) + t.shape)
        squeezed = True
    if t.ndim != 3 or t.shape[2] != dim:
        raise ShapeError(f"{what}: expected (B, L, {dim}), got {t.shape}")
    return t, squeezed


def cross_attend(enc: SpeakerEncoder, motion, audio) -> Tensor:
    """Fused full-rate stream from equal-length motion and (pooled) audio.

    motion: (B, L, motion_dim); audio: (B, L, audio_dim). Output (B, L, d_k).
    """
    m, squeezed = _as_batched(motion, enc.cfg.motion_dim, "cross_attend motion")
    a, _ = _as_batched(audio, enc.cfg.audio_dim, "cross_attend audio")
    if m.shape[:2] != a.shape[:2]:
        raise ShapeError(f"cross_attend: motion {m.shape} and audio {a.shape} lengths differ")
    length = m.shape[1]
    pos = enc.pos(length)
    if enc.cfg.mode == "cross":
        stream = enc.motion_proj(m) + pos
        queries = enc.audio_proj(a) + pos
        for blk in enc.blocks:
            stream = blk(stream, queries)
        out = enc.ln_f(stream)
    elif enc.cfg.mode == "concat":
        ms = enc.motion_tf(enc.motion_proj(m) + pos)
        au = enc.audio_tf(enc.audio_proj(a) + pos)
        out = enc.fuse(concat([ms, au], axis=2))
    elif enc.cfg.mode == "motion":
        out = enc.motion_tf(enc.motion_proj(m) + pos)
    else:
        out = enc.audio_tf(enc.audio_proj(a) + pos)
    if squeezed:
        out = reshape(out, out.shape[1:])
    return out


def encode_speaker(enc: SpeakerEncoder, motion, audio) -> Tensor:
    """Speaker window -> embedding m' of output_tokens x d_k.

    motion: (B, L, motion_dim) with L = context frames; audio: raw feature
    frames at rate_multiple x L (pooled internally). The fused stream is
    downsampled by 2**conv_stages and the leading output steps are kept.
    """
    m, squeezed = _as_batched(motion, enc.cfg.motion_dim, "encode_speaker motion")
    length = m.shape[1]
    pooled = pool_audio(audio, length, enc.cfg.rate_multiple)
    fused = cross_attend(enc, m, pooled)
    if fused.ndim == 2:
        fused = reshape(fused, (1,) + fused.shape)
    down = enc.down(fused)
    want = enc.cfg.output_tokens
    if down.shape[1] < want:
        raise ShapeError(f"encode_speaker: window of {length} frames downsamples to "
                         f"{down.shape[1]} steps, need {want}")
    out = narrow(down, 1, 0, want)
    if squeezed:
        out = reshape(out, out.shape[1:])
    return out
