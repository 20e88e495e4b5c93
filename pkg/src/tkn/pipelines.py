"""Inference pipelines: parallel, sequential, and streaming prediction.

The parallel pipeline encodes all observed frames as one batch, runs the
predictor once, and decodes every future frame against the last observed
frame's skip stack — one encoder batch, one predictor pass, one decoder
batch, whatever the horizon.  The sequential pipeline loops: each step
predicts one latent (averaged over its encoder's output positions), decodes
it against the previous predicted frame's stack, and re-encodes the result
for the next step.  Pass counts are instrumented on the pipeline.

A pipeline instance is single-threaded; share the underlying models
read-only across instances if you need concurrency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .detector import KeypointDetector
from .engine import Tensor, ops
from .engine.tensor import precision
from .errors import ShapeError
from .keypoints import flatten_keypoints, unflatten_keypoints
from .predictor import ParallelPredictor, SequentialPredictor


@dataclass
class PredictionRequest:
    frames: np.ndarray  # [t, C, H, W]
    horizon: int
    mode: str = "parallel"  # "parallel" | "sequential"
    seed: int | None = None  # reserved; inference is deterministic


@dataclass
class PassCounters:
    encoder_batches: int = 0
    predictor_passes: int = 0
    decoder_batches: int = 0

    def reset(self) -> None:
        self.encoder_batches = 0
        self.predictor_passes = 0
        self.decoder_batches = 0


@dataclass
class StreamStep:
    window_start: int  # absolute index of the window's first input frame
    frames: np.ndarray  # [m, C, H, W] predicted frames
    correction_delta: float | None  # mean |diff| vs. previous overlapping pass


class Pipeline:
    def __init__(self, detector: KeypointDetector,
                 parallel: ParallelPredictor | None = None,
                 sequential: SequentialPredictor | None = None):
        self.detector = detector
        self.parallel = parallel
        self.sequential = sequential
        self.counters = PassCounters()
        self.dtype = np.dtype(np.float64)

    def cast(self, dtype) -> "Pipeline":
        """Switch inference precision (float32 is the fast opt-in mode)."""
        self.dtype = np.dtype(dtype)
        for model in (self.detector, self.parallel, self.sequential):
            if model is not None:
                for _, t in model.named_params():
                    t.data = t.data.astype(self.dtype, copy=False)
        return self

    # -- shared pieces ------------------------------------------------------

    def _check_frames(self, frames: np.ndarray, expect: int) -> np.ndarray:
        frames = np.asarray(frames, dtype=self.dtype)
        cfg = self.detector.config
        want = (expect, cfg.channels_in, cfg.height, cfg.width)
        if frames.shape != want:
            raise ShapeError(f"expected input frames {want}, got {frames.shape}")
        return frames

    def _decode(self, heat: Tensor, stack_arrays: list[np.ndarray]) -> np.ndarray:
        self.counters.decoder_batches += 1
        out = self.detector.decode(heat, [Tensor(a) for a in stack_arrays])
        return out.numpy()

    # -- parallel -----------------------------------------------------------

    def predict_parallel(self, frames: np.ndarray) -> np.ndarray:
        """t observed frames -> the next t frames, three batched passes total."""
        if self.parallel is None:
            raise ValueError("pipeline has no parallel predictor")
        t = self.parallel.config.seq_len
        frames = self._check_frames(frames, t)

        with precision(self.dtype):
            self.counters.encoder_batches += 1
            stack = self.detector.encode(Tensor(frames))
            points = self.detector.coordinate_generation(stack[-1])
            k3 = 3 * points.x.shape[1]
            flat = ops.reshape(flatten_keypoints(points), (1, t, k3))

            self.counters.predictor_passes += 1
            pred = self.parallel(flat)  # [1, t, 3K]

            pred_points = unflatten_keypoints(ops.reshape(pred, (t, pred.shape[-1])))
            heat = self.detector.heatmap_generation(pred_points)
            # all outputs borrow the last observed frame's background
            self.counters.decoder_batches += 1
            last = [Tensor(h.data[t - 1:t]) for h in stack]
            return self.detector.decode_shared_background(heat, last).numpy()

    # -- sequential ---------------------------------------------------------

    def predict_sequential(self, frames: np.ndarray, horizon: int) -> np.ndarray:
        """Frame-by-frame prediction: one predictor pass and decode per step."""
        if self.sequential is None:
            raise ValueError("pipeline has no sequential predictor")
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")
        if horizon > self.sequential.horizon:
            raise ValueError(
                f"sequential predictor supports horizon <= {self.sequential.horizon}, "
                f"got {horizon}"
            )
        t = self.sequential.config.seq_len
        frames = self._check_frames(frames, t)

        with precision(self.dtype):
            self.counters.encoder_batches += 1
            stack = self.detector.encode(Tensor(frames))
            points = self.detector.coordinate_generation(stack[-1])
            flat = flatten_keypoints(points)  # [t, 3K]
            latents = self.sequential.mapper.embed(flat).numpy()  # [t, d]
            prev_stack = [h.data[t - 1:t] for h in stack]

            outputs = []
            for step in range(horizon):
                self.counters.predictor_passes += 1
                q_next = self.sequential.predict_next_latent(
                    Tensor(latents[None]), step
                )  # [1, 1, d]
                flat_next = self.sequential.mapper.unembed(q_next)
                pts = unflatten_keypoints(
                    ops.reshape(flat_next, (1, flat_next.shape[-1])))
                heat = self.detector.heatmap_generation(pts)
                frame = self._decode(heat, prev_stack)
                outputs.append(frame[0])

                self.counters.encoder_batches += 1
                new_stack = self.detector.encode(Tensor(frame))
                prev_stack = [h.data for h in new_stack]
                latents = np.concatenate([latents, q_next.numpy()[0]], axis=0)
            return np.stack(outputs)

    # -- dispatch -----------------------------------------------------------

    def run(self, request: PredictionRequest) -> np.ndarray:
        if request.mode == "parallel":
            t = self.parallel.config.seq_len if self.parallel else None
            if request.horizon != t:
                raise ValueError(
                    f"parallel mode predicts exactly {t} frames, requested {request.horizon}"
                )
            return self.predict_parallel(request.frames)
        if request.mode == "sequential":
            return self.predict_sequential(request.frames, request.horizon)
        raise ValueError(f"unknown mode {request.mode!r}")

    # -- streaming ----------------------------------------------------------

    def stream_predict(self, frame_source, t: int, m: int, rate_ratio: float,
                       mode: str = "parallel"):
        """Sliding-window prediction with periodic correction.

        ``rate_ratio`` is prediction rate over camera rate: each pass the
        window slides by the ``m / rate_ratio`` frames that arrived while
        predicting (must divide evenly; an infinite ratio degenerates to
        advancing one frame per arrival).  Yields :class:`StreamStep` with
        the mean absolute pixel delta against the previous pass on
        overlapping predictions.  Ends cleanly when the source runs dry.
        """
        if rate_ratio <= 0:
            raise ValueError(f"rate_ratio must be > 0, got {rate_ratio}")
        if math.isinf(rate_ratio):
            advance = 1
        else:
            advance = m / rate_ratio
            if abs(advance - round(advance)) > 1e-9 or round(advance) < 1:
                raise ValueError(
                    f"m / rate_ratio must be a positive integer frame count, "
                    f"got {m}/{rate_ratio}"
                )
            advance = int(round(advance))

        source = iter(frame_source)
        buffer: list[np.ndarray] = []
        start = 0
        prev: dict[int, np.ndarray] = {}
        while True:
            while len(buffer) < t and _pull(source, buffer):
                pass
            if len(buffer) < t:
                return  # source exhausted before a full window
            window = np.stack(buffer[:t])
            preds = (self.predict_parallel(window) if mode == "parallel"
                     else self.predict_sequential(window, m))
            base = start + t
            overlap = [i for i in range(base, base + m) if i in prev]
            delta = None
            if overlap:
                delta = float(np.mean([np.abs(prev[i] - preds[i - base]).mean()
                                       for i in overlap]))
            yield StreamStep(start, preds, delta)
            prev = {base + j: preds[j] for j in range(m)}
            for _ in range(advance):
                if not _pull(source, buffer):
                    return
            del buffer[:advance]
            start += advance


def _pull(source, buffer: list[np.ndarray]) -> bool:
    try:
        buffer.append(np.asarray(next(source), dtype=np.float64))
        return True
    except StopIteration:
        return False
