"""Non-learned comparison methods over a bank of training windows.

Every bank-returning baseline hands back listener windows verbatim from the
bank; all methods are deterministic given (bank, seed). The audio
nearest-neighbor search runs in a pooled per-bin mean+std statistic space
rather than a pretrained audio network's embedding space; reports that
include it carry a note documenting the substitution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyInput, ShapeError
from .motiondata import DyadSample, moving_average
from .vqvae import VqVaeModel

__all__ = [
    "TrainBank",
    "nn_motion",
    "nn_audio",
    "random_baseline",
    "median_baseline",
    "mirror",
    "delayed_mirror",
    "random_expression",
    "codebook_random_walk",
    "NN_AUDIO_NOTE",
]

NN_AUDIO_NOTE = ("nn-audio searches pooled mel statistics (per-bin mean+std) "
                 "instead of pretrained audio-network embeddings")


@dataclass
class TrainBank:
    """Aligned 64-frame training windows plus flattened search indexes."""

    listener_windows: np.ndarray   # (N, L, C)
    speaker_windows: np.ndarray    # (N, L, C)
    audio_windows: np.ndarray      # (N, rate*L, d_a)
    window_len: int = 64

    def __post_init__(self):
        n = len(self.listener_windows)
        if n == 0:
            raise EmptyInput("TrainBank: no windows")
        if len(self.speaker_windows) != n or len(self.audio_windows) != n:
            raise ShapeError(f"TrainBank: window counts differ "
                             f"({n}, {len(self.speaker_windows)}, {len(self.audio_windows)})")
        if self.listener_windows.shape[1] != self.window_len:
            raise ShapeError(f"TrainBank: windows are {self.listener_windows.shape[1]} "
                             f"frames, expected {self.window_len}")
        self._speaker_flat = self.speaker_windows.reshape(n, -1).astype(np.float64)
        self._audio_stats = _audio_statistics(self.audio_windows)

    def __len__(self) -> int:
        return len(self.listener_windows)

    @staticmethod
    def from_samples(samples: list[DyadSample], window_len: int = 64,
                     stride: int | None = None) -> "TrainBank":
        if not samples:
            raise EmptyInput("TrainBank.from_samples: no samples")
        stride = stride or window_len
        rate = samples[0].speaker_audio.rate_multiple
        listeners, speakers, audios = [], [], []
        for s in samples:
            for lo in range(0, len(s) - window_len + 1, stride):
                listeners.append(s.listener_motion.matrix()[lo:lo + window_len])
                speakers.append(s.speaker_motion.matrix()[lo:lo + window_len])
                audios.append(s.speaker_audio.features[lo * rate:(lo + window_len) * rate])
        if not listeners:
            raise EmptyInput(f"TrainBank.from_samples: no sample is {window_len} frames long")
        return TrainBank(np.stack(listeners), np.stack(speakers), np.stack(audios),
                         window_len=window_len)

    def all_listener_frames(self) -> np.ndarray:
        return self.listener_windows.reshape(-1, self.listener_windows.shape[2])


def _audio_statistics(audio_windows: np.ndarray) -> np.ndarray:
    """Pooled per-bin mean+std for each window: (N, 2*d_a)."""
    mean = audio_windows.mean(axis=1)
    std = audio_windows.std(axis=1)
    return np.concatenate([mean, std], axis=1).astype(np.float64)


def _check_window(bank: TrainBank, win: np.ndarray, what: str, feat: int) -> np.ndarray:
    win = np.asarray(win, dtype=np.float64)
    if win.ndim != 2 or win.shape[1] != feat:
        raise ShapeError(f"{what}: expected ({bank.window_len}, {feat}), got {win.shape}")
    return win


def nn_motion(bank: TrainBank, speaker_window: np.ndarray) -> np.ndarray:
    """Listener paired with the L2-nearest bank speaker window; ties -> lowest index."""
    win = _check_window(bank, speaker_window, "nn_motion", bank.speaker_windows.shape[2])
    if win.shape[0] != bank.window_len:
        raise ShapeError(f"nn_motion: query has {win.shape[0]} frames, bank windows "
                         f"{bank.window_len}")
    d2 = ((bank._speaker_flat - win.reshape(-1)) ** 2).sum(axis=1)
    return bank.listener_windows[int(d2.argmin())]


def nn_audio(bank: TrainBank, speaker_audio_window: np.ndarray) -> np.ndarray:
    """Nearest neighbor in pooled audio-feature statistic space (see NN_AUDIO_NOTE)."""
    win = np.asarray(speaker_audio_window, dtype=np.float64)
    if win.ndim != 2 or win.shape[1] != bank.audio_windows.shape[2]:
        raise ShapeError(f"nn_audio: expected (frames, {bank.audio_windows.shape[2]}), "
                         f"got {win.shape}")
    stats = np.concatenate([win.mean(axis=0), win.std(axis=0)])
    d2 = ((bank._audio_stats - stats) ** 2).sum(axis=1)
    return bank.listener_windows[int(d2.argmin())]


def random_baseline(bank: TrainBank, rng: np.random.Generator) -> np.ndarray:
    """A uniformly drawn bank listener window, verbatim."""
    return bank.listener_windows[int(rng.integers(len(bank)))]


def median_baseline(bank: TrainBank) -> np.ndarray:
    """The per-coordinate median training frame, repeated for the window."""
    med = np.median(bank.all_listener_frames(), axis=0)
    return np.tile(med.astype(np.float32), (bank.window_len, 1))


def mirror(speaker_window: np.ndarray, smooth_radius: int = 3) -> np.ndarray:
    """The speaker's motion, smoothed by a centered moving average."""
    win = np.asarray(speaker_window, dtype=np.float64)
    if win.ndim != 2:
        raise ShapeError(f"mirror: expected (frames, feat), got {win.shape}")
    if smooth_radius < 0:
        raise ContractError(f"mirror: smooth_radius must be >= 0, got {smooth_radius}")
    return moving_average(win, smooth_radius).astype(np.float32)


def delayed_mirror(speaker_window: np.ndarray, delay: int = 17,
                   smooth_radius: int = 3) -> np.ndarray:
    """Mirror shifted right by `delay`; the initial gap holds the first frame."""
    if delay < 0:
        raise ContractError(f"delayed_mirror: delay must be >= 0, got {delay}")
    sm = mirror(speaker_window, smooth_radius)
    if delay == 0:
        return sm
    out = np.empty_like(sm)
    out[:delay] = sm[0]
    out[delay:] = sm[:len(sm) - delay]
    return out


def random_expression(bank: TrainBank, rng: np.random.Generator,
                      length: int | None = None) -> np.ndarray:
    """Each output frame drawn independently and uniformly from all bank frames."""
    frames = bank.all_listener_frames()
    length = length or bank.window_len
    picks = rng.integers(len(frames), size=length)
    return frames[picks]


def codebook_random_walk(vq: VqVaeModel, steps: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-random codebook indices decoded to motion; returns (motion, tokens)."""
    if steps < 1:
        raise ContractError(f"codebook_random_walk: steps must be >= 1, got {steps}")
    tokens = rng.integers(0, vq.cfg.codebook_size, size=steps)
    return vq.decode_tokens(tokens), tokens
