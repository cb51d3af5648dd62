"""Sequence-encoding VQ-VAE over listener-motion windows.

The encoder downsamples a length-T motion window by a factor of w through
conv+pool stages, refines it with a transformer, and projects to the code
dimension; quantization snaps each latent step to its nearest codebook row;
the decoder mirrors the encoder. Windows longer than the training length
are processed in trained-length segments so learned positional tables are
only ever used at trained offsets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, EmptyInput, ShapeError
from .nn import ConvDownsampler, ConvUpsampler, Linear, PositionTable, Transformer
from .params import AdamState, ParameterStore, adam_step, noam_lr, restore_store, save_checkpoint
from .rng import RngPool
from .tensor import Tensor, concat, embedding, narrow, no_grad, reshape, sq_norm, stop_gradient

__all__ = [
    "VqVaeConfig",
    "VqVaeModel",
    "TokenSequence",
    "quantize",
    "vq_loss",
    "tokenize",
    "train_vqvae",
    "VqVaeTrainReport",
]


@dataclass
class VqVaeConfig:
    frame_dim: int = 56          # d_m + 3
    window: int = 8              # motion frames per latent step (w)
    codebook_size: int = 200     # K
    code_dim: int = 256          # d_z
    hidden: int = 512
    heads: int = 8
    layers: int = 12
    conv_kernel: int = 5
    train_len: int = 32          # training window length in frames
    commit_weight: float = 0.25
    codebook_init: str = "latent"  # "latent" or "gaussian"

    def __post_init__(self):
        w = self.window
        if w < 2 or (w & (w - 1)) != 0:
            raise ContractError(f"window must be a power of two >= 2, got {w}")
        if self.train_len % w:
            raise ContractError(f"train_len {self.train_len} not divisible by window {w}")
        if self.commit_weight < 0:
            raise ContractError(f"commit_weight must be >= 0, got {self.commit_weight}")

    @property
    def stages(self) -> int:
        return int(self.window).bit_length() - 1

    @property
    def train_tokens(self) -> int:
        return self.train_len // self.window


@dataclass
class TokenSequence:
    """A sequence of codebook indices."""

    tokens: np.ndarray
    codebook_size: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.codebook_size):
            raise ContractError(
                f"TokenSequence: tokens outside [0, {self.codebook_size})")

    def __len__(self) -> int:
        return len(self.tokens)


class VqVaeModel:
    """Encoder, decoder, and codebook; owns its ParameterStore."""

    def __init__(self, cfg: VqVaeConfig, seed: int):
        self.cfg = cfg
        self.store = ParameterStore(seed)
        self.frozen = False
        rng = RngPool(seed).stream("init/vqvae")
        c = cfg
        self.enc_conv = ConvDownsampler(self.store, "enc.conv", c.frame_dim, c.hidden,
                                        c.stages, c.conv_kernel, rng)
        self.enc_pos = PositionTable(self.store, "enc", c.train_tokens, c.hidden, rng)
        self.enc_tf = Transformer(self.store, "enc.tf", c.hidden, c.heads, c.layers, rng)
        self.enc_out = Linear(self.store, "enc.out", c.hidden, c.code_dim, rng)
        self.codebook = self.store.add(
            "codebook.entries",
            (0.5 * rng.standard_normal((c.codebook_size, c.code_dim))).astype(np.float32))
        self.dec_in = Linear(self.store, "dec.in", c.code_dim, c.hidden, rng)
        self.dec_pos = PositionTable(self.store, "dec", c.train_tokens, c.hidden, rng)
        self.dec_tf = Transformer(self.store, "dec.tf", c.hidden, c.heads, c.layers, rng)
        self.dec_conv = ConvUpsampler(self.store, "dec.conv", c.hidden, c.frame_dim,
                                      c.stages, c.conv_kernel, rng)

    # -- persistence -------------------------------------------------------

    def freeze(self):
        self.frozen = True
        return self

    def save(self, path, step: int = 0):
        save_checkpoint(self.store, path, step=step,
                        meta={"kind": "vqvae", "config": asdict(self.cfg)})

    @classmethod
    def load(cls, path) -> "VqVaeModel":
        from .params import load_checkpoint

        values, seed, _step, meta = load_checkpoint(path)
        if meta.get("kind") != "vqvae":
            raise ContractError(f"{path}: not a vqvae checkpoint (kind={meta.get('kind')!r})")
        model = cls(VqVaeConfig(**meta["config"]), seed)
        model.store.load_values(values)
        return model

    # -- forward -----------------------------------------------------------

    def _check_input(self, x) -> tuple[Tensor, bool]:
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        squeezed = False
        if t.ndim == 2:
            t = reshape(t, (1,) + t.shape)
            squeezed = True
        if t.ndim != 3 or t.shape[2] != self.cfg.frame_dim:
            raise ShapeError(f"expected motion (B, T, {self.cfg.frame_dim}), got {t.shape}")
        if t.shape[1] % self.cfg.window:
            raise ShapeError(f"motion length {t.shape[1]} not divisible by window "
                             f"{self.cfg.window}")
        return t, squeezed

    def _encode_segment(self, x: Tensor) -> Tensor:
        h = self.enc_conv(x)
        h = h + self.enc_pos(h.shape[1])
        h = self.enc_tf(h)
        return self.enc_out(h)

    def encode(self, x) -> Tensor:
        """Motion (B, T, frame_dim) -> latents (B, T/w, code_dim).

        Windows longer than train_len are encoded in train_len segments.
        """
        t, squeezed = self._check_input(x)
        seg = self.cfg.train_len
        t_len = t.shape[1]
        if t_len <= seg:
            out = self._encode_segment(t)
        else:
            parts = []
            for lo in range(0, t_len, seg):
                chunk = narrow(t, 1, lo, min(seg, t_len - lo))
                parts.append(self._encode_segment(chunk))
            out = concat(parts, axis=1)
        if squeezed:
            out = reshape(out, out.shape[1:])
        return out

    def _decode_segment(self, z: Tensor) -> Tensor:
        h = self.dec_in(z)
        h = h + self.dec_pos(h.shape[1])
        h = self.dec_tf(h)
        return self.dec_conv(h)

    def decode(self, z) -> Tensor:
        """Latents (B, tau, code_dim) -> motion (B, tau*w, frame_dim)."""
        t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        squeezed = False
        if t.ndim == 2:
            t = reshape(t, (1,) + t.shape)
            squeezed = True
        if t.ndim != 3 or t.shape[2] != self.cfg.code_dim:
            raise ShapeError(f"expected latents (B, tau, {self.cfg.code_dim}), got {t.shape}")
        if t.shape[1] < 1:
            raise ShapeError(f"decode: need at least one latent step, got {t.shape}")
        seg = self.cfg.train_tokens
        tau = t.shape[1]
        if tau <= seg:
            out = self._decode_segment(t)
        else:
            parts = []
            for lo in range(0, tau, seg):
                chunk = narrow(t, 1, lo, min(seg, tau - lo))
                parts.append(self._decode_segment(chunk))
            out = concat(parts, axis=1)
        if squeezed:
            out = reshape(out, out.shape[1:])
        return out

    def decode_tokens(self, tokens: np.ndarray) -> np.ndarray:
        """Indices (tau,) -> motion (tau*w, frame_dim), no gradients."""
        tokens = np.asarray(tokens, dtype=np.int64)
        z = self.codebook.data[tokens]
        with no_grad():
            return self.decode(z).data


def quantize(codebook, latent) -> tuple[np.ndarray, np.ndarray]:
    """Snap each latent row to its nearest codebook row (Euclidean).

    Returns (z_q, indices). Ties break to the lowest index. Distances are
    accumulated in float64 so the result matches an exhaustive scan.
    """
    cb = codebook.data if isinstance(codebook, Tensor) else np.asarray(codebook)
    lat = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    if cb.ndim != 2 or cb.shape[0] < 1:
        raise ContractError(f"quantize: empty or malformed codebook, shape {getattr(cb, 'shape', None)}")
    if lat.shape[-1] != cb.shape[1]:
        raise ShapeError(f"quantize: latent dim {lat.shape} does not match codebook {cb.shape}")
    flat = lat.reshape(-1, cb.shape[1]).astype(np.float64)
    diff = flat[:, None, :] - cb.astype(np.float64)[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    idx = d2.argmin(axis=1).reshape(lat.shape[:-1])
    return cb[idx], idx


def tokenize(model: VqVaeModel, motion) -> TokenSequence:
    """Element-wise inverse lookup of the quantized encoding of one window."""
    arr = motion.data if isinstance(motion, Tensor) else np.asarray(motion)
    if arr.ndim != 2:
        raise ShapeError(f"tokenize: expected a single (T, frame_dim) window, got {arr.shape}")
    with no_grad():
        latent = model.encode(arr)
    _, idx = quantize(model.codebook, latent.data)
    return TokenSequence(idx, model.cfg.codebook_size)


def tokenize_batch(model: VqVaeModel, windows: np.ndarray) -> np.ndarray:
    """Indices (B, T/w) for a batch of windows."""
    with no_grad():
        latent = model.encode(np.asarray(windows, dtype=np.float32))
    _, idx = quantize(model.codebook, latent.data)
    return idx


def vq_loss(x, x_hat, latent, z_q, commit_weight: float = 0.25):
    """Reconstruction + codebook + commitment loss with stop-gradients.

    Each term is the per-sequence squared L2 norm averaged over the batch.
    Gradient routing: the codebook term updates only the codebook, the
    commitment term only the encoder, the reconstruction term the decoder
    (and the encoder through the straight-through path the caller builds).
    Returns (total, parts) where parts maps term name -> float.
    """
    if commit_weight < 0:
        raise ContractError(f"vq_loss: commit_weight must be >= 0, got {commit_weight}")
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.shape != x_hat.shape:
        raise ShapeError(f"vq_loss: x {xt.shape} vs x_hat {x_hat.shape}")
    if latent.shape != z_q.shape:
        raise ShapeError(f"vq_loss: latent {latent.shape} vs z_q {z_q.shape}")
    batch = xt.shape[0] if xt.ndim == 3 else 1
    recon = sq_norm(xt - x_hat) * (1.0 / batch)
    codebook_term = sq_norm(stop_gradient(latent) - z_q) * (1.0 / batch)
    commit = sq_norm(stop_gradient(z_q) - latent) * (1.0 / batch)
    total = recon + codebook_term + commit * commit_weight
    parts = {
        "reconstruction": float(recon.data),
        "codebook": float(codebook_term.data),
        "commitment": float(commit.data),
        "total": float(total.data),
    }
    return total, parts


def vqvae_training_step(model: VqVaeModel, x: np.ndarray):
    """Forward pass with straight-through quantization; returns (loss, parts, indices)."""
    xt = Tensor(np.asarray(x, dtype=np.float32))
    latent = model.encode(xt)
    _, idx = quantize(model.codebook, latent.data)
    z_q = embedding(model.codebook, idx)
    st = latent + stop_gradient(z_q - latent)
    x_hat = model.decode(st)
    total, parts = vq_loss(xt, x_hat, latent, z_q, model.cfg.commit_weight)
    return total, parts, idx


@dataclass
class VqVaeTrainReport:
    epochs: int
    steps: int
    loss_total: list[float]
    loss_reconstruction: list[float]
    loss_codebook: list[float]
    loss_commitment: list[float]
    usage: np.ndarray
    usage_fraction: float
    val_quant_l2_expression: float | None
    val_quant_l2_rotation: float | None


def _init_codebook_from_latents(model: VqVaeModel, windows: np.ndarray,
                                batch_size: int, rng: np.random.Generator):
    pool = []
    for lo in range(0, len(windows), batch_size):
        with no_grad():
            lat = model.encode(windows[lo:lo + batch_size])
        pool.append(lat.data.reshape(-1, model.cfg.code_dim))
    pool = np.concatenate(pool)
    k = model.cfg.codebook_size
    replace = len(pool) < k
    picks = rng.choice(len(pool), size=k, replace=replace)
    init = pool[picks].astype(np.float32)
    if replace:
        init += (0.01 * rng.standard_normal(init.shape)).astype(np.float32)
    model.codebook.data[...] = init


def usage_histogram(model: VqVaeModel, windows: np.ndarray, batch_size: int = 64) -> np.ndarray:
    counts = np.zeros(model.cfg.codebook_size, dtype=np.int64)
    for lo in range(0, len(windows), batch_size):
        idx = tokenize_batch(model, windows[lo:lo + batch_size])
        counts += np.bincount(idx.reshape(-1), minlength=model.cfg.codebook_size)
    return counts


def quantization_l2(model: VqVaeModel, windows: np.ndarray, d_m: int,
                    batch_size: int = 64) -> tuple[float, float]:
    """Mean per-window L2 error of decode(quantize(encode)), split expr/rotation."""
    errs_e, errs_r = [], []
    for lo in range(0, len(windows), batch_size):
        x = windows[lo:lo + batch_size]
        with no_grad():
            latent = model.encode(x)
            z_q, _ = quantize(model.codebook, latent.data)
            x_hat = model.decode(z_q).data
        diff = x_hat - x
        errs_e.append(np.sqrt((diff[:, :, :d_m] ** 2).sum(axis=(1, 2))))
        errs_r.append(np.sqrt((diff[:, :, d_m:] ** 2).sum(axis=(1, 2))))
    return float(np.concatenate(errs_e).mean()), float(np.concatenate(errs_r).mean())


def train_vqvae(model: VqVaeModel, train_windows: np.ndarray, *, epochs: int,
                batch_size: int = 32, base_lr: float = 2.0, warmup: int = 4000,
                val_windows: np.ndarray | None = None, d_m: int | None = None,
                rng_pool: RngPool | None = None, codebook_warmup_epochs: int = 1,
                log_every: int = 0) -> VqVaeTrainReport:
    """Optimize the VQ loss with Adam under a warmup + inverse-sqrt schedule.

    With "latent" codebook init, the first codebook_warmup_epochs run the
    autoencoder path only (no quantization); the codebook is then seeded
    from the warmed-up encoder's latent distribution. The epoch budget
    includes the warm-up epochs.
    """
    train_windows = np.asarray(train_windows, dtype=np.float32)
    if train_windows.ndim != 3 or len(train_windows) == 0:
        raise EmptyInput("train_vqvae: need a non-empty (N, T, frame_dim) window array")
    if model.frozen:
        raise ContractError("train_vqvae: model is frozen")
    if rng_pool is None:
        rng_pool = RngPool(model.store.rng_seed)
    shuffle = rng_pool.stream("vqvae/shuffle")
    warm_epochs = min(codebook_warmup_epochs, epochs) if model.cfg.codebook_init == "latent" else 0

    opt = AdamState()
    curves: dict[str, list[float]] = {k: [] for k in
                                      ("total", "reconstruction", "codebook", "commitment")}
    step = 0
    n = len(train_windows)
    for epoch in range(epochs):
        if epoch == warm_epochs and model.cfg.codebook_init == "latent":
            _init_codebook_from_latents(model, train_windows, batch_size,
                                        rng_pool.stream("vqvae/codebook-init"))
        warm = epoch < warm_epochs
        perm = shuffle.permutation(n)
        sums = {k: 0.0 for k in curves}
        batches = 0
        for lo in range(0, n, batch_size):
            x = train_windows[perm[lo:lo + batch_size]]
            if warm:
                xt = Tensor(x)
                out = model.decode(model.encode(xt))
                total = sq_norm(xt - out) * (1.0 / len(x))
                parts = {"reconstruction": float(total.data), "codebook": 0.0,
                         "commitment": 0.0, "total": float(total.data)}
                total.backward()
                model.codebook.grad = np.zeros_like(model.codebook.data)
            else:
                total, parts, _ = vqvae_training_step(model, x)
                total.backward()
            step += 1
            adam_step(model.store, opt, noam_lr(step, base_lr, warmup, model.cfg.hidden))
            model.store.zero_grads()
            for k in sums:
                sums[k] += parts[k]
            batches += 1
        for k in curves:
            curves[k].append(sums[k] / batches)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"vqvae epoch {epoch + 1}/{epochs}: total={curves['total'][-1]:.4f} "
                  f"recon={curves['reconstruction'][-1]:.4f}")

    usage = usage_histogram(model, train_windows)
    val_e = val_r = None
    if val_windows is not None and len(val_windows) and d_m is not None:
        val_e, val_r = quantization_l2(model, np.asarray(val_windows, dtype=np.float32), d_m)
    return VqVaeTrainReport(
        epochs=epochs,
        steps=step,
        loss_total=curves["total"],
        loss_reconstruction=curves["reconstruction"],
        loss_codebook=curves["codebook"],
        loss_commitment=curves["commitment"],
        usage=usage,
        usage_fraction=float((usage > 0).mean()),
        val_quant_l2_expression=val_e,
        val_quant_l2_rotation=val_r,
    )
