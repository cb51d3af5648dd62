"""Motion and audio representations, dataset file I/O, and synthetic dyads.

A facial frame is an expression-coefficient vector (default 53 = 50
expression + 3 jaw values) plus a 3-angle head rotation. Sequences store
frames as dense arrays; audio features run at ``rate_multiple`` frames per
motion frame. All operations here are pure given their inputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, EmptyInput, FormatError, IoError, RangeError
from .rng import named_stream, stream_key

_MAGIC = b"DYAD"
_VERSION = 1

TWO_PI = 2.0 * np.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Wrap angles into (-pi, pi]."""
    return a - TWO_PI * np.ceil((a - np.pi) / TWO_PI)


@dataclass
class FacialFrame:
    """One timestep: expression coefficients plus Euler head rotation.

    Rotation is intrinsic XYZ (pitch, yaw, roll), radians, relative to the
    rest pose; each angle lies in (-pi, pi].
    """

    expression: np.ndarray
    rotation: np.ndarray


class MotionSequence:
    """A uniformly sampled sequence of facial frames."""

    def __init__(self, expression: np.ndarray, rotation: np.ndarray, fps: float = 30.0):
        expression = np.asarray(expression, dtype=np.float32)
        rotation = np.asarray(rotation, dtype=np.float32)
        if expression.ndim != 2 or rotation.ndim != 2 or rotation.shape[1] != 3:
            raise ContractError(
                f"MotionSequence: need expression (T,d_m) and rotation (T,3), got "
                f"{expression.shape} and {rotation.shape}")
        if len(expression) == 0:
            raise EmptyInput("MotionSequence: no frames")
        if len(expression) != len(rotation):
            raise ContractError(
                f"MotionSequence: {len(expression)} expression frames vs {len(rotation)} rotations")
        self.expression = expression
        self.rotation = rotation
        self.fps = float(fps)

    def __len__(self) -> int:
        return len(self.expression)

    @property
    def d_m(self) -> int:
        return self.expression.shape[1]

    def frame(self, i: int) -> FacialFrame:
        return FacialFrame(self.expression[i], self.rotation[i])

    @property
    def frames(self) -> list[FacialFrame]:
        return [self.frame(i) for i in range(len(self))]

    def matrix(self) -> np.ndarray:
        """(T, d_m + 3) array: expression block then rotation block."""
        return np.concatenate([self.expression, self.rotation], axis=1)

    @staticmethod
    def from_matrix(m: np.ndarray, d_m: int, fps: float = 30.0) -> "MotionSequence":
        m = np.asarray(m, dtype=np.float32)
        if m.ndim != 2 or m.shape[1] != d_m + 3:
            raise ContractError(f"from_matrix: shape {m.shape} does not match d_m={d_m}+3")
        return MotionSequence(m[:, :d_m], m[:, d_m:], fps)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.expression[start:stop], self.rotation[start:stop], self.fps)


class AudioFeatureSequence:
    """Per-timestep audio feature frames at rate_multiple x the motion rate."""

    def __init__(self, features: np.ndarray, rate_multiple: int = 4):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ContractError(f"AudioFeatureSequence: need (frames, d_a), got {features.shape}")
        if len(features) == 0:
            raise EmptyInput("AudioFeatureSequence: no frames")
        self.features = features
        self.rate_multiple = int(rate_multiple)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def d_a(self) -> int:
        return self.features.shape[1]

    def slice(self, start: int, stop: int) -> "AudioFeatureSequence":
        return AudioFeatureSequence(self.features[start:stop], self.rate_multiple)


@dataclass
class DyadSample:
    """One temporally aligned speaker/listener pair."""

    speaker_motion: MotionSequence
    speaker_audio: AudioFeatureSequence
    listener_motion: MotionSequence
    id: str = ""

    def __post_init__(self):
        if len(self.speaker_motion) != len(self.listener_motion):
            raise ContractError(
                f"DyadSample {self.id!r}: speaker has {len(self.speaker_motion)} frames, "
                f"listener {len(self.listener_motion)}")

    def __len__(self) -> int:
        return len(self.listener_motion)


@dataclass
class ExprStats:
    """Per-dataset standardization of expression coefficients."""

    mean: np.ndarray
    std: np.ndarray

    @staticmethod
    def fit(samples: list[DyadSample]) -> "ExprStats":
        rows = np.concatenate(
            [s.speaker_motion.expression for s in samples]
            + [s.listener_motion.expression for s in samples])
        return ExprStats(rows.mean(axis=0).astype(np.float32),
                         np.maximum(rows.std(axis=0), 1e-6).astype(np.float32))

    def standardize(self, motion: np.ndarray) -> np.ndarray:
        """Standardize the expression block of a (T, d_m+3) matrix; rotations pass through."""
        d_m = len(self.mean)
        out = np.array(motion, dtype=np.float32, copy=True)
        out[..., :d_m] = (out[..., :d_m] - self.mean) / self.std
        return out

    def destandardize(self, motion: np.ndarray) -> np.ndarray:
        d_m = len(self.mean)
        out = np.array(motion, dtype=np.float32, copy=True)
        out[..., :d_m] = out[..., :d_m] * self.std + self.mean
        return out

    @staticmethod
    def identity(d_m: int) -> "ExprStats":
        return ExprStats(np.zeros(d_m, dtype=np.float32), np.ones(d_m, dtype=np.float32))


# -- rest pose -----------------------------------------------------------------


def normalize_rest_pose(seq: MotionSequence) -> MotionSequence:
    """Remove the sequence-mean head rotation so the rest pose is the origin.

    The mean is removed per Euler component and the result re-wrapped into
    (-pi, pi]. Expressions are unchanged. Idempotent whenever re-wrapping
    does not trigger.
    """
    if len(seq) == 0:
        raise EmptyInput("normalize_rest_pose: empty sequence")
    mean_rot = seq.rotation.mean(axis=0)
    return MotionSequence(seq.expression, wrap_angles(seq.rotation - mean_rot), seq.fps)


# -- audio features ------------------------------------------------------------


def mel_frequencies(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Band centers (Hz) of the mel filterbank, HTK mel scale."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    pts = np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2)
    return from_mel(pts)


def _mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    pts = mel_frequencies(n_mels, 0.0, sample_rate / 2.0)
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, ctr, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - freqs) / max(hi - ctr, 1e-9)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_features(waveform: np.ndarray, sample_rate: int = 16000, motion_fps: float = 30.0,
                 n_mels: int = 128, n_fft: int = 1024) -> AudioFeatureSequence:
    """Log-mel spectrogram at 4x the motion frame rate.

    The hop is round(sample_rate / (4 * motion_fps)) samples (133 at 16 kHz
    and 30 fps) so one second of audio yields about 4 * motion_fps frames.
    """
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if len(waveform) < n_fft:
        raise EmptyInput(f"mel_features: waveform of {len(waveform)} samples is shorter "
                         f"than one {n_fft}-sample window")
    hop = int(round(sample_rate / (4.0 * motion_fps)))
    pad = n_fft // 2
    padded = np.pad(waveform, pad, mode="reflect")
    n_frames = 1 + len(waveform) // hop
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(n_fft)[None, :]
    frames = padded[idx] * np.hanning(n_fft)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb = _mel_filterbank(sample_rate, n_fft, n_mels)
    logmel = np.log(power @ fb.T + 1e-10)
    return AudioFeatureSequence(logmel.astype(np.float32), rate_multiple=4)


# -- synthetic dyads -------------------------------------------------------------

_N_SINES = 3
_SMOOTH_DEFAULT = 2
_LAG_CHOICES = np.arange(12, 23)

# Fixed motion -> audio map; shared across samples so the mapping is learnable.
_AUDIO_MAP_SEED = 0x0D1AD


def _audio_map(d_a: int, d_motion: int) -> np.ndarray:
    rng = named_stream(_AUDIO_MAP_SEED, f"audio-map/{d_a}x{d_motion}")
    return (rng.standard_normal((d_motion, d_a)) / np.sqrt(d_motion)).astype(np.float64)


def _channel_scales(d_m: int) -> np.ndarray:
    expr = 1.0 / (1.0 + 0.1 * np.arange(d_m))
    rot = np.full(3, 0.2)
    return np.concatenate([expr, rot])


def _mode_gain(mode: int) -> float:
    cycle = [1.0, 0.55, 1.45, 0.8, 1.25]
    return cycle[mode % len(cycle)] * (1.0 + 0.06 * (mode // len(cycle)))


def _mode_offset(mode: int, d_motion: int, scales: np.ndarray) -> np.ndarray:
    return 0.8 * scales * np.sin(0.9 + 1.7 * mode + 0.35 * np.arange(d_motion))


def moving_average(x: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return x.copy()
    k = 2 * radius + 1
    padded = np.pad(x, ((radius, radius), (0, 0)), mode="reflect")
    csum = np.cumsum(padded, axis=0)
    csum = np.vstack([np.zeros((1, x.shape[1])), csum])
    return (csum[k:] - csum[:-k]) / k


def synth_dyad(seed: int, length: int, mode_count: int = 3, *, noise: float = 0.02,
               lag: int | None = None, d_m: int = 53, d_a: int = 128,
               rate_multiple: int = 4, fps: float = 30.0,
               speaker_seed: int | None = None, mode: int | None = None,
               period: int | None = None, sample_id: str | None = None) -> DyadSample:
    """One deterministic-in-seed synthetic speaker/listener pair.

    Construction: the speaker's underlying motion is a per-channel sum of
    low-frequency sinusoids; the observed speaker adds white noise. Audio
    features are a fixed linear image of the underlying motion evaluated at
    4x temporal resolution, plus noise. The listener is one of
    ``mode_count`` smoothing-filter-plus-gain(-plus-offset) responses to the
    underlying speaker, delayed by ``lag`` frames (drawn from 12..22 when
    not given), so the dyad has learnable cross-modal structure, known
    multimodality, and a known ground-truth response lag.

    ``speaker_seed`` pins the speaker's sinusoid parameters independently of
    ``seed`` so many samples can share one speaker; ``mode`` pins the
    listener response mode; ``period`` snaps sinusoid frequencies onto the
    harmonic grid of that many frames so the dyad's behavior recurs exactly
    (a recurring gesture repertoire). The drawn mode and lag are appended to
    the sample id as ``:m<mode>:l<lag>``.
    """
    if length < 64:
        raise ContractError(f"synth_dyad: length must be >= 64, got {length}")
    if mode_count < 1:
        raise ContractError(f"synth_dyad: mode_count must be >= 1, got {mode_count}")
    rng = named_stream(seed, "synth")
    d_mot = d_m + 3
    scales = _channel_scales(d_m)

    sp_rng = rng if speaker_seed is None else named_stream(speaker_seed, "synth/speaker")
    if period is not None:
        k_lo = max(1, int(np.ceil(0.25 * period / fps)))
        k_hi = max(k_lo, int(np.floor(0.9 * period / fps)))
        harmonics = sp_rng.integers(k_lo, k_hi + 1, size=(d_mot, _N_SINES))
        freqs = harmonics * (fps / period)
    else:
        freqs = sp_rng.uniform(0.25, 0.9, size=(d_mot, _N_SINES))
    phases = sp_rng.uniform(0.0, TWO_PI, size=(d_mot, _N_SINES))
    amps = sp_rng.uniform(0.5, 1.0, size=(d_mot, _N_SINES))

    if lag is None:
        lag = int(rng.choice(_LAG_CHOICES))
    if mode is None:
        mode = int(rng.integers(0, mode_count))
    elif not 0 <= mode < mode_count:
        raise ContractError(f"synth_dyad: mode {mode} outside [0, {mode_count})")

    def clean_at(times: np.ndarray) -> np.ndarray:
        # times in frames; result (len(times), d_mot)
        arg = TWO_PI * freqs[None, :, :] * (times[:, None, None] / fps) + phases[None, :, :]
        return scales[None, :] * (amps[None, :, :] * np.sin(arg)).sum(axis=2)

    radius = _SMOOTH_DEFAULT + (mode % 3)
    head = lag + radius
    ext_times = np.arange(-head, length + radius, dtype=np.float64)
    ext_clean = clean_at(ext_times)
    ext_smooth = moving_average(ext_clean, radius)[radius:len(ext_times) - radius]
    # ext_smooth[i] is the smoothed value at frame i - lag.
    listener_clean = _mode_gain(mode) * ext_smooth[:length] + _mode_offset(mode, d_mot, scales)

    speaker_clean = clean_at(np.arange(length, dtype=np.float64))
    speaker_obs = speaker_clean + noise * scales * rng.standard_normal((length, d_mot))
    listener_obs = listener_clean + noise * scales * rng.standard_normal((length, d_mot))

    up_times = np.arange(length * rate_multiple, dtype=np.float64) / rate_multiple
    audio_clean = clean_at(up_times) @ _audio_map(d_a, d_mot)
    audio_obs = audio_clean + noise * rng.standard_normal(audio_clean.shape)

    if sample_id is None:
        sample_id = f"synth-{seed}"
    sample_id = f"{sample_id}:m{mode}:l{lag}"
    return DyadSample(
        speaker_motion=MotionSequence(speaker_obs[:, :d_m].astype(np.float32),
                                      wrap_angles(speaker_obs[:, d_m:]).astype(np.float32), fps),
        speaker_audio=AudioFeatureSequence(audio_obs.astype(np.float32), rate_multiple),
        listener_motion=MotionSequence(listener_obs[:, :d_m].astype(np.float32),
                                       wrap_angles(listener_obs[:, d_m:]).astype(np.float32), fps),
        id=sample_id,
    )


def synth_dataset(seed: int, n_samples: int, length: int, mode_count: int = 3,
                  **kwargs) -> list[DyadSample]:
    """n_samples independent synthetic dyads with per-sample derived seeds."""
    out = []
    for i in range(n_samples):
        sample_seed = stream_key(seed, f"sample/{i}") & 0x7FFFFFFFFFFFFFFF
        out.append(synth_dyad(sample_seed, length, mode_count,
                              sample_id=f"synth-{seed}-{i}", **kwargs))
    return out


# -- dataset file I/O -------------------------------------------------------------


class DyadDataset(list):
    """A list of DyadSample plus the dataset-level header fields."""

    def __init__(self, samples, d_m: int, d_a: int, fps: float, rate_multiple: int,
                 expr_stats: ExprStats):
        super().__init__(samples)
        self.d_m = d_m
        self.d_a = d_a
        self.fps = fps
        self.rate_multiple = rate_multiple
        self.expr_stats = expr_stats


def write_dyad_file(samples: list[DyadSample], path, expr_stats: ExprStats | None = None):
    """Write samples to `path` in the DYAD container format.

    Layout: magic "DYAD", version u16, header-length u32, JSON header
    (dims, fps, rate multiple, expression standardization vectors, per-sample
    offsets/lengths/ids), then per-sample little-endian f32 blocks in order
    (speaker_motion, speaker_audio, listener_motion). Values are stored raw;
    the standardization vectors describe the dataset, they are not applied.
    """
    if not samples:
        raise EmptyInput("write_dyad_file: no samples")
    d_m = samples[0].speaker_motion.d_m
    d_a = samples[0].speaker_audio.d_a
    fps = samples[0].speaker_motion.fps
    rate = samples[0].speaker_audio.rate_multiple
    for s in samples:
        if s.speaker_motion.d_m != d_m or s.listener_motion.d_m != d_m or s.speaker_audio.d_a != d_a:
            raise ContractError(f"write_dyad_file: sample {s.id!r} dims differ from the first sample")
    if expr_stats is None:
        expr_stats = ExprStats.fit(samples)

    recs = []
    blobs = []
    offset = 0
    for s in samples:
        block = b"".join([
            np.ascontiguousarray(s.speaker_motion.matrix(), dtype="<f4").tobytes(),
            np.ascontiguousarray(s.speaker_audio.features, dtype="<f4").tobytes(),
            np.ascontiguousarray(s.listener_motion.matrix(), dtype="<f4").tobytes(),
        ])
        recs.append({"id": s.id, "length": len(s), "audio_length": len(s.speaker_audio),
                     "offset": offset})
        blobs.append(block)
        offset += len(block)

    header = {
        "d_m": d_m, "d_a": d_a, "fps": fps, "rate_multiple": rate,
        "expr_mean": [float(x) for x in expr_stats.mean],
        "expr_std": [float(x) for x in expr_stats.std],
        "sample_count": len(samples),
        "samples": recs,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<H", _VERSION))
            f.write(struct.pack("<I", len(hbytes)))
            f.write(hbytes)
            for b in blobs:
                f.write(b)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_dyad_file(path, d_m: int | None = None, d_a: int | None = None) -> DyadDataset:
    """Read a DYAD container; optionally enforce expected dimensions."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if len(raw) < 10:
        raise FormatError(f"{path}: file of {len(raw)} bytes is too short for a DYAD header")
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected {_MAGIC!r}, got {raw[:4]!r})")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    (hlen,) = struct.unpack_from("<I", raw, 6)
    payload_start = 10 + hlen
    if len(raw) < payload_start:
        raise FormatError(f"{path}: truncated header at byte {len(raw)} (need {payload_start})")
    try:
        header = json.loads(raw[10:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed header JSON at byte 10: {e}") from e

    try:
        file_dm = int(header["d_m"])
        file_da = int(header["d_a"])
        fps = float(header["fps"])
        rate = int(header["rate_multiple"])
        stats = ExprStats(np.asarray(header["expr_mean"], dtype=np.float32),
                          np.asarray(header["expr_std"], dtype=np.float32))
        recs = header["samples"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: header missing or malformed field: {e}") from e
    if d_m is not None and d_m != file_dm:
        raise FormatError(f"{path}: d_m mismatch: file has {file_dm}, configured {d_m}")
    if d_a is not None and d_a != file_da:
        raise FormatError(f"{path}: d_a mismatch: file has {file_da}, configured {d_a}")

    d_mot = file_dm + 3
    samples = []
    for rec in recs:
        t = int(rec["length"])
        la = int(rec["audio_length"])
        lo = payload_start + int(rec["offset"])
        n_motion = t * d_mot
        n_audio = la * file_da
        hi = lo + 4 * (2 * n_motion + n_audio)
        if hi > len(raw):
            raise FormatError(f"{path}: truncated payload for sample {rec['id']!r} "
                              f"(need byte {hi}, have {len(raw)})")
        flat = np.frombuffer(raw[lo:hi], dtype="<f4")
        sp = flat[:n_motion].reshape(t, d_mot).astype(np.float32)
        au = flat[n_motion:n_motion + n_audio].reshape(la, file_da).astype(np.float32)
        li = flat[n_motion + n_audio:].reshape(t, d_mot).astype(np.float32)
        samples.append(DyadSample(
            MotionSequence(sp[:, :file_dm], sp[:, file_dm:], fps),
            AudioFeatureSequence(au, rate),
            MotionSequence(li[:, :file_dm], li[:, file_dm:], fps),
            id=str(rec["id"]),
        ))
    return DyadDataset(samples, file_dm, file_da, fps, rate, stats)


# -- windowing ---------------------------------------------------------------------


def window(sample: DyadSample, start: int, t: int) -> DyadSample:
    """Aligned slice of all three streams; the audio slice is rate x longer."""
    if t < 1 or start < 0 or start + t > len(sample):
        raise RangeError(f"window: [{start}, {start + t}) out of range for sample of "
                         f"length {len(sample)}")
    rate = sample.speaker_audio.rate_multiple
    a_lo, a_hi = start * rate, (start + t) * rate
    feats = sample.speaker_audio.features
    if a_hi > len(feats):
        short = a_hi - len(feats)
        if short >= rate:
            raise RangeError(f"window: audio stream too short ({len(feats)} frames, "
                             f"need {a_hi}) for sample {sample.id!r}")
        feats = np.pad(feats, ((0, short), (0, 0)))
    return DyadSample(
        sample.speaker_motion.slice(start, start + t),
        AudioFeatureSequence(feats[a_lo:a_hi], rate),
        sample.listener_motion.slice(start, start + t),
        id=f"{sample.id}[{start}:{start + t}]",
    )
