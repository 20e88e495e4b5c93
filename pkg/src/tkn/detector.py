"""Unsupervised keypoint autoencoder.

An n-layer Conv/GroupNorm/LeakyReLU encoder turns a frame into a stack of
feature maps; a 1x1 projection plus spatial softmax and grid expectation
turns the last map into K keypoint triples; rendered Gaussian bumps plus the
source frame's skip stack drive a mirrored transposed-conv decoder that
reconstructs the target frame.  Trained end-to-end with a mean-squared
reconstruction loss on (source, target) frame pairs from the same sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tape, Tensor, ops
from .engine.nn import Conv2d, ConvTranspose2d, GroupNorm, Module
from .engine.optim import Adam
from .errors import ConfigError, ShapeError, TrainingDiverged
from .keypoints import Keypoints, gaussian_maps, spatial_expectation


@dataclass(frozen=True)
class DetectorConfig:
    height: int = 64
    width: int = 64
    channels_in: int = 3
    num_layers: int = 6
    channels: tuple[int, ...] = (16, 32, 32, 64, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 1, 1, 1)
    kernel_size: int = 3
    num_keypoints: int = 16
    sigma: float = 0.1
    norm_groups: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        if len(self.channels) != self.num_layers:
            raise ConfigError("detector.channels",
                              f"expected {self.num_layers} entries, got {len(self.channels)}")
        if len(self.strides) != self.num_layers:
            raise ConfigError("detector.strides",
                              f"expected {self.num_layers} entries, got {len(self.strides)}")
        if self.num_keypoints < 1:
            raise ConfigError("detector.num_keypoints", "must be >= 1")
        if self.sigma <= 0:
            raise ConfigError("detector.sigma", "must be > 0")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("detector.kernel_size", "must be odd and positive")
        for i, c in enumerate(self.channels):
            if c % self.norm_groups != 0:
                raise ConfigError(f"detector.channels[{i}]",
                                  f"{c} not divisible by norm_groups={self.norm_groups}")
        sizes = self.spatial_sizes()
        if min(sizes[-1]) < 2:
            raise ConfigError("detector.strides",
                              f"final feature map {sizes[-1]} too small for coordinate grids")
        # mirrored upsampling must be able to hit the encoder sizes exactly
        for j, (op_h, op_w) in enumerate(self._output_paddings()):
            s = self.strides[self.num_layers - 1 - j]
            if op_h != op_w:
                raise ConfigError("detector",
                                  f"decoder layer {j} needs different output paddings "
                                  f"per axis {(op_h, op_w)}; use equal H/W downsampling")
            if not 0 <= op_h < max(s, 1):
                raise ConfigError("detector.strides",
                                  f"decoder layer {j} cannot mirror encoder sizes "
                                  f"(needs output padding {op_h} with stride {s})")

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """(H_i, W_i) for i = 0 (input) .. num_layers."""
        k, p = self.kernel_size, self.kernel_size // 2
        sizes = [(self.height, self.width)]
        for s in self.strides:
            h, w = sizes[-1]
            sizes.append(((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1))
        return sizes

    def _output_paddings(self) -> list[tuple[int, int]]:
        k, p = self.kernel_size, self.kernel_size // 2
        sizes = self.spatial_sizes()
        pads = []
        for j in range(self.num_layers):  # decoder layer j maps size[n-j] -> size[n-j-1]
            s = self.strides[self.num_layers - 1 - j]
            src = sizes[self.num_layers - j]
            dst = sizes[self.num_layers - j - 1]
            base_h = (src[0] - 1) * s - 2 * p + k
            base_w = (src[1] - 1) * s - 2 * p + k
            pads.append((dst[0] - base_h, dst[1] - base_w))
        return pads

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.spatial_sizes()[-1]


class _EncoderLayer(Module):
    def __init__(self, c_in, c_out, cfg: DetectorConfig, stride, rng):
        self.conv = Conv2d(c_in, c_out, cfg.kernel_size, stride, rng, bias=False)
        self.norm = GroupNorm(c_out, cfg.norm_groups)
        self.slope = cfg.leaky_slope

    def __call__(self, x):
        return ops.leaky_relu(self.norm(self.conv(x)), self.slope)


class _DecoderLayer(Module):
    def __init__(self, c_in, c_out, cfg: DetectorConfig, stride, out_pad, rng,
                 final: bool):
        self.final = final
        self.deconv = ConvTranspose2d(c_in, c_out, cfg.kernel_size, stride,
                                      out_pad, rng, bias=final)
        if not final:
            self.norm = GroupNorm(c_out, cfg.norm_groups)
        self.slope = cfg.leaky_slope

    def __call__(self, x):
        return self._finish(self.deconv(x))

    def split_call(self, per_frame, shared):
        """Same layer applied to concat(per_frame, shared) with ``shared``
        identical for every batch element, so its half of the convolution
        runs once and broadcasts.  Exact up to float reassociation.
        """
        dc = self.deconv
        c_p = per_frame.shape[1]
        w_p = ops.slice_axis(dc.w, 0, 0, c_p)
        w_s = ops.slice_axis(dc.w, 0, c_p, dc.w.shape[0])
        moving = ops.conv2d_transpose(per_frame, w_p, None, stride=dc.stride,
                                      padding=dc.padding,
                                      output_padding=dc.output_padding)
        static = ops.conv2d_transpose(shared, w_s, getattr(dc, "b", None),
                                      stride=dc.stride, padding=dc.padding,
                                      output_padding=dc.output_padding)
        return self._finish(ops.add(moving, static))

    def _finish(self, y):
        if self.final:
            return ops.sigmoid(y)  # bounded [0, 1] pixel range
        return ops.leaky_relu(self.norm(y), self.slope)


class KeypointDetector(Module):
    """Encoder + coordinate generation + heatmap rendering + decoder."""

    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        self.config = config
        n = config.num_layers
        chans = (config.channels_in,) + config.channels
        self.encoder = [
            _EncoderLayer(chans[i], chans[i + 1], config, config.strides[i], rng)
            for i in range(n)
        ]
        self.project = Conv2d(config.channels[-1], config.num_keypoints, 1, 1, rng)
        out_pads = config._output_paddings()
        self.decoder = []
        for j in range(n):
            # decoder layer j consumes its predecessor concatenated with the
            # mirrored encoder output, so its input width is twice that
            # encoder layer's output width (first layer: keypoint heatmap + h_n)
            c_in = (config.num_keypoints + config.channels[-1] if j == 0
                    else 2 * config.channels[n - j - 1])
            c_out = config.channels[n - j - 2] if j < n - 1 else config.channels_in
            stride = config.strides[n - 1 - j]
            self.decoder.append(_DecoderLayer(c_in, c_out, config, stride,
                                              out_pads[j][0], rng, final=(j == n - 1)))

    # -- forward pieces -----------------------------------------------------

    def encode(self, frames: Tensor) -> list[Tensor]:
        """[B, C, H, W] -> per-layer feature stack (all retained for skips)."""
        cfg = self.config
        if frames.ndim != 4 or frames.shape[1:] != (cfg.channels_in, cfg.height, cfg.width):
            raise ShapeError(
                f"encoder expects [B, {cfg.channels_in}, {cfg.height}, {cfg.width}], "
                f"got {frames.shape}"
            )
        stack = []
        h = frames
        for layer in self.encoder:
            h = layer(h)
            stack.append(h)
        return stack

    def coordinate_generation(self, h_n: Tensor) -> Keypoints:
        """Final feature map -> K keypoint triples with coords in [-1, 1].

        The 1x1 projection compresses channels to K; intensity is the plain
        spatial mean of each projected channel; coordinates are the grid
        expectation of the spatially softmaxed channel.
        """
        b = h_n.shape[0]
        k = self.config.num_keypoints
        hn, wn = h_n.shape[2], h_n.shape[3]
        z = self.project(h_n)  # [B,K,Hn,Wn]
        v = ops.mean(z, axis=(2, 3))
        weights = ops.reshape(ops.softmax(ops.reshape(z, (b, k, hn * wn)), axis=2),
                              (b, k, hn, wn))
        x, y = spatial_expectation(weights)
        assert float(np.abs(x.data).max(initial=0.0)) <= 1.0 + 1e-9
        assert float(np.abs(y.data).max(initial=0.0)) <= 1.0 + 1e-9
        return Keypoints(x, y, v)

    def heatmap_generation(self, points: Keypoints) -> Tensor:
        hn, wn = self.config.feature_size
        return gaussian_maps(points, hn, wn, self.config.sigma)

    def detect(self, frames: Tensor) -> Keypoints:
        """Frames -> keypoints (encode + coordinate generation)."""
        return self.coordinate_generation(self.encode(frames)[-1])

    def decode(self, heat: Tensor, source_stack: list[Tensor]) -> Tensor:
        """Keypoint heatmap + source skip stack -> reconstructed frames."""
        if heat.shape[2:] != source_stack[-1].shape[2:]:
            raise ShapeError(
                f"heatmap spatial size {heat.shape[2:]} does not match "
                f"final feature map {source_stack[-1].shape[2:]}"
            )
        n = self.config.num_layers
        d = ops.concat([heat, source_stack[-1]], axis=1)
        for j, layer in enumerate(self.decoder):
            d = layer(d)
            if j < n - 1:
                d = ops.concat([d, source_stack[n - j - 2]], axis=1)
        return d

    def decode_shared_background(self, heat: Tensor,
                                 single_stack: list[Tensor]) -> Tensor:
        """Decode a heatmap batch against one frame's skip stack.

        Equivalent to :meth:`decode` with the stack replicated across the
        batch, but the static half of each layer's convolution runs once.
        """
        if any(s.shape[0] != 1 for s in single_stack):
            raise ShapeError("shared-background decode expects a batch-1 stack")
        n = self.config.num_layers
        d = heat
        for j, layer in enumerate(self.decoder):
            d = layer.split_call(d, single_stack[n - j - 1])
        return d

    def reconstruct(self, source: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
        """Rebuild ``target`` from its keypoints plus ``source``'s skip stack.

        Returns ``(reconstruction, loss)`` where the loss is the mean squared
        pixel error.
        """
        if source.shape != target.shape:
            raise ShapeError(f"source {source.shape} and target {target.shape} differ")
        b = source.shape[0]
        both = self.encode(ops.concat([source, target], axis=0))
        source_stack = [ops.slice_axis(h, 0, 0, b) for h in both]
        target_top = ops.slice_axis(both[-1], 0, b, 2 * b)
        points = self.coordinate_generation(target_top)
        heat = self.heatmap_generation(points)
        recon = self.decode(heat, source_stack)
        diff = ops.sub(target, recon)
        loss = ops.mean(ops.mul(diff, diff))
        return recon, loss


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    max_pair_gap: int = 10
    log_every: int = 0  # epochs between progress prints; 0 = silent


def sample_frame_pairs(sequences: list[np.ndarray], rng: np.random.Generator,
                       max_gap: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """One (source, target) pair per sequence, gap uniform in [1, max_gap]."""
    pairs = []
    for seq in sequences:
        t = len(seq)
        gap = int(rng.integers(1, min(max_gap, t - 1) + 1))
        src = int(rng.integers(0, t - gap))
        pairs.append((seq[src], seq[src + gap]))
    return pairs


def train_detector(sequences: list[np.ndarray], config: DetectorConfig,
                   train: TrainConfig, seed: int) -> tuple[KeypointDetector, list[float]]:
    """Fit the autoencoder on frame pairs; returns model + per-epoch mean loss.

    Deterministic for a fixed seed.  Aborts with :class:`TrainingDiverged`
    if the loss goes non-finite.
    """
    detector = KeypointDetector(config, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    opt = Adam(detector.named_params(), lr=train.lr,
               beta1=train.beta1, beta2=train.beta2)
    history = []
    for epoch in range(train.epochs):
        order = rng.permutation(len(sequences))
        pairs = sample_frame_pairs([sequences[i] for i in order], rng,
                                   train.max_pair_gap)
        total, count = 0.0, 0
        for start in range(0, len(pairs), train.batch_size):
            chunk = pairs[start:start + train.batch_size]
            src = Tensor(np.stack([p[0] for p in chunk]))
            tgt = Tensor(np.stack([p[1] for p in chunk]))
            with Tape() as tape:
                _, loss = detector.reconstruct(src, tgt)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"detector loss became {value} at epoch {epoch}, batch {start}"
                )
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
            total += value * len(chunk)
            count += len(chunk)
        history.append(total / count)
        if train.log_every and (epoch + 1) % train.log_every == 0:
            print(f"[detector] epoch {epoch + 1}/{train.epochs} "
                  f"loss {history[-1]:.6f}")
    return detector, history
