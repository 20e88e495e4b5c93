"""Transformer-encoder keypoint sequence predictor.

Flattened keypoint vectors are mapped into a latent space by a learned
matrix, summed with sinusoidal position codes, pushed through a post-norm
transformer-encoder stack, and mapped back to keypoint space by a second
learned matrix.  The parallel predictor emits all future latents in one
pass; the sequential variant owns one single-layer encoder per window
length and averages its output positions into the next latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tape, Tensor, ops
from .engine.nn import LayerNorm, Linear, Module
from .engine.optim import Adam
from .errors import ConfigError, ShapeError, TrainingDiverged


@dataclass(frozen=True)
class PredictorConfig:
    num_keypoints: int = 16
    d_model: int = 512
    d_k: int = 64
    d_v: int = 64
    d_inner: int = 2048
    n_head: int = 8
    num_layers: int = 6
    seq_len: int = 10
    dropout: float = 0.0
    representation: str = "latent"  # "latent" | "explicit"

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ConfigError("predictor.d_model", "must be even for position codes")
        if self.dropout != 0.0:
            raise ConfigError("predictor.dropout", "only 0.0 is supported")
        if self.representation not in ("latent", "explicit"):
            raise ConfigError("predictor.representation",
                              f"unknown value {self.representation!r}")
        if self.representation == "explicit" and self.d_model < 3 * self.num_keypoints:
            raise ConfigError("predictor.d_model",
                              "explicit representation needs d_model >= 3K")
        for name in ("d_k", "d_v", "d_inner", "n_head", "num_layers", "seq_len",
                     "num_keypoints"):
            if getattr(self, name) < 1:
                raise ConfigError(f"predictor.{name}", "must be >= 1")


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position codes: sin on even columns, cos on odd ones."""
    pos = np.arange(length)[:, None]
    i2 = np.arange(0, d_model, 2)
    angles = pos / np.power(10000.0, i2 / d_model)[None, :]
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention with per-head projections."""

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        d, h = cfg.d_model, cfg.n_head
        self.n_head = h
        self.d_k = cfg.d_k
        self.d_v = cfg.d_v
        self.wq = Linear(d, h * cfg.d_k, rng, bias=False)
        self.wk = Linear(d, h * cfg.d_k, rng, bias=False)
        self.wv = Linear(d, h * cfg.d_v, rng, bias=False)
        self.wo = Linear(h * cfg.d_v, d, rng, bias=False)

    def _split(self, x: Tensor, d_head: int) -> Tensor:
        b, l, _ = x.shape
        return ops.transpose(ops.reshape(x, (b, l, self.n_head, d_head)),
                             (0, 2, 1, 3))  # [B,h,l,d_head]

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, l, _ = x.shape
        q = self._split(self.wq(x), self.d_k)
        k = self._split(self.wk(x), self.d_k)
        v = self._split(self.wv(x), self.d_v)
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                         Tensor(1.0 / np.sqrt(self.d_k)))
        weights = ops.softmax(scores, axis=-1)  # rows sum to 1
        ctx = ops.matmul(weights, v)  # [B,h,l,d_v]
        merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)),
                             (b, l, self.n_head * self.d_v))
        out = self.wo(merged)
        return (out, weights) if return_weights else out


class EncoderLayer(Module):
    """Post-norm wiring: LN(x + MHA(x)) then LN(x + FFN(x))."""

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        self.attn = MultiHeadAttention(cfg, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn1 = Linear(cfg.d_model, cfg.d_inner, rng)
        self.ffn2 = Linear(cfg.d_inner, cfg.d_model, rng)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(ops.add(x, self.attn(x)))
        hidden = ops.relu(self.ffn1(x))
        return self.norm2(ops.add(x, self.ffn2(hidden)))


class TransformerEncoder(Module):
    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator,
                 num_layers: int | None = None):
        n = cfg.num_layers if num_layers is None else num_layers
        self.layers = [EncoderLayer(cfg, rng) for _ in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LatentMapper(Module):
    """Bias-free embed/unembed between [.., 3K] keypoints and [.., d_model].

    ``representation="explicit"`` pins both matrices to fixed identity
    padding (keypoints ride in the first 3K latent dimensions, untrained).
    """

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        d, k3 = cfg.d_model, 3 * cfg.num_keypoints
        if cfg.representation == "explicit":
            eye = np.zeros((d, k3))
            eye[:k3, :k3] = np.eye(k3)
            self.embed_w = Tensor(eye, requires_grad=False)
            self.unembed_w = Tensor(eye.T.copy(), requires_grad=False)
        else:
            bound = 1.0 / np.sqrt(k3)
            self.embed_w = Tensor(rng.uniform(-bound, bound, (d, k3)),
                                  requires_grad=True)
            bound = 1.0 / np.sqrt(d)
            self.unembed_w = Tensor(rng.uniform(-bound, bound, (k3, d)),
                                    requires_grad=True)

    def embed(self, flat: Tensor) -> Tensor:
        if flat.shape[-1] != self.embed_w.shape[1]:
            raise ShapeError(f"embed expects last axis {self.embed_w.shape[1]}, "
                             f"got {flat.shape}")
        return ops.matmul(flat, ops.transpose(self.embed_w))

    def unembed(self, latent: Tensor) -> Tensor:
        if latent.shape[-1] != self.unembed_w.shape[1]:
            raise ShapeError(f"unembed expects last axis {self.unembed_w.shape[1]}, "
                             f"got {latent.shape}")
        return ops.matmul(latent, ops.transpose(self.unembed_w))


class ParallelPredictor(Module):
    """One encoder pass maps t observed latents to the next t latents."""

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        self.config = cfg
        self.mapper = LatentMapper(cfg, rng)
        self.encoder = TransformerEncoder(cfg, rng)

    def predict_latent(self, q_seq: Tensor, add_positions: bool = True) -> Tensor:
        """[B, t, d_model] observed latents -> [B, t, d_model] future latents."""
        t = self.config.seq_len
        if q_seq.ndim != 3 or q_seq.shape[1] != t:
            raise ShapeError(f"predictor expects [B, {t}, d], got {q_seq.shape}")
        if add_positions:
            pe = positional_encoding(t, self.config.d_model)
            q_seq = ops.add(q_seq, Tensor(pe[None]))
        return self.encoder(q_seq)

    def __call__(self, flat_seq: Tensor, add_positions: bool = True) -> Tensor:
        """[B, t, 3K] observed keypoints -> [B, t, 3K] predicted keypoints."""
        q = self.mapper.embed(flat_seq)
        return self.mapper.unembed(self.predict_latent(q, add_positions))


class SequentialPredictor(Module):
    """Per-horizon-step encoders over growing windows, averaged per step.

    Step i consumes every prior latent (observed plus already predicted,
    window length t+i), runs its own single-layer encoder, and averages the
    output positions into the next latent.  All steps share one mapper so
    predictions can feed back as inputs.
    """

    def __init__(self, cfg: PredictorConfig, horizon: int,
                 rng: np.random.Generator, layers_per_step: int = 1):
        self.config = cfg
        self.horizon = horizon
        self.mapper = LatentMapper(cfg, rng)
        self.encoders = [TransformerEncoder(cfg, rng, num_layers=layers_per_step)
                         for _ in range(horizon)]

    def window_length(self, step: int) -> int:
        return self.config.seq_len + step

    def predict_next_latent(self, q_window: Tensor, step: int) -> Tensor:
        """[B, t+step, d] -> [B, 1, d]: encoder output averaged over positions."""
        want = self.window_length(step)
        if q_window.ndim != 3 or q_window.shape[1] != want:
            raise ShapeError(
                f"sequential step {step} expects [B, {want}, d], got {q_window.shape}"
            )
        pe = positional_encoding(want, self.config.d_model)
        out = self.encoders[step](ops.add(q_window, Tensor(pe[None])))
        return ops.mean(out, axis=1, keepdims=True)


def predictor_loss(real: Tensor, pred: Tensor) -> Tensor:
    """Mean squared error between keypoint vectors of identical shape."""
    if real.shape != pred.shape:
        raise ShapeError(f"loss operands differ: {real.shape} vs {pred.shape}")
    diff = ops.sub(real, pred)
    return ops.mean(ops.mul(diff, diff))


# ---------------------------------------------------------------------------
# training


@dataclass
class PredictorTrainConfig:
    epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 0


def detect_sequences(detector, sequences: list[np.ndarray],
                     batch_frames: int = 64) -> list[np.ndarray]:
    """Run the frozen detector over whole sequences -> [T, 3K] arrays."""
    from .keypoints import flatten_keypoints

    out = []
    for seq in sequences:
        chunks = []
        for start in range(0, len(seq), batch_frames):
            frames = Tensor(seq[start:start + batch_frames])
            chunks.append(flatten_keypoints(detector.detect(frames)).numpy())
        out.append(np.concatenate(chunks, axis=0))
    return out


def _window_batches(tracks: list[np.ndarray], window: int, batch_size: int,
                    rng: np.random.Generator):
    """Random-start windows, one per track per epoch, grouped into batches."""
    order = rng.permutation(len(tracks))
    windows = []
    for idx in order:
        track = tracks[idx]
        start = int(rng.integers(0, len(track) - window + 1))
        windows.append(track[start:start + window])
    for begin in range(0, len(windows), batch_size):
        yield np.stack(windows[begin:begin + batch_size])


def train_predictor(keypoint_tracks: list[np.ndarray], config: PredictorConfig,
                    train: PredictorTrainConfig,
                    seed: int) -> tuple[ParallelPredictor, list[float]]:
    """Fit the parallel predictor on [T, 3K] keypoint tracks (T >= 2t)."""
    t = config.seq_len
    for track in keypoint_tracks:
        if len(track) < 2 * t:
            raise ShapeError(f"track length {len(track)} < 2*seq_len ({2 * t})")
    model = ParallelPredictor(config, np.random.default_rng([seed, 2]))
    rng = np.random.default_rng([seed, 3])
    opt = Adam(
        ((n, p) for n, p in model.named_params() if p.requires_grad),
        lr=train.lr, beta1=train.beta1, beta2=train.beta2,
    )
    history = []
    for epoch in range(train.epochs):
        total, count = 0.0, 0
        for batch in _window_batches(keypoint_tracks, 2 * t, train.batch_size, rng):
            inputs = Tensor(batch[:, :t])
            target = Tensor(batch[:, t:])
            with Tape() as tape:
                pred = model(inputs)
                loss = predictor_loss(target, pred)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"predictor loss became {value} at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            total += value * len(batch)
            count += len(batch)
        history.append(total / count)
        if train.log_every and (epoch + 1) % train.log_every == 0:
            print(f"[predictor] epoch {epoch + 1}/{train.epochs} "
                  f"loss {history[-1]:.6f}")
    return model, history


def train_sequential(keypoint_tracks: list[np.ndarray], config: PredictorConfig,
                     horizon: int, train: PredictorTrainConfig,
                     seed: int) -> tuple[SequentialPredictor, list[float]]:
    """Fit the per-step encoders (teacher-forced on detector keypoints).

    Every step's window plus its one-frame target must fit the tracks:
    length >= seq_len + horizon.
    """
    t = config.seq_len
    for track in keypoint_tracks:
        if len(track) < t + horizon:
            raise ShapeError(
                f"track length {len(track)} < seq_len + horizon ({t + horizon})"
            )
    model = SequentialPredictor(config, horizon, np.random.default_rng([seed, 4]))
    rng = np.random.default_rng([seed, 5])
    opt = Adam(
        ((n, p) for n, p in model.named_params() if p.requires_grad),
        lr=train.lr, beta1=train.beta1, beta2=train.beta2,
    )
    history = []
    for epoch in range(train.epochs):
        total, count = 0.0, 0
        for batch in _window_batches(keypoint_tracks, t + horizon,
                                     train.batch_size, rng):
            with Tape() as tape:
                losses = []
                for step in range(horizon):
                    window = Tensor(batch[:, :t + step])
                    target = Tensor(batch[:, t + step:t + step + 1])
                    q = model.mapper.embed(window)
                    q_next = model.predict_next_latent(q, step)
                    pred = model.mapper.unembed(q_next)
                    losses.append(predictor_loss(target, pred))
                loss = ops.mul(ops.sum(ops.concat(
                    [ops.reshape(l, (1,)) for l in losses], axis=0)),
                    Tensor(1.0 / horizon))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"sequential loss became {value} at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            total += value * len(batch)
            count += len(batch)
        history.append(total / count)
        if train.log_every and (epoch + 1) % train.log_every == 0:
            print(f"[sequential] epoch {epoch + 1}/{train.epochs} "
                  f"loss {history[-1]:.6f}")
    return model, history
