"""Image quality metrics, cost accounting, and the timing harness.

SSIM uses the canonical 11x11 Gaussian window (sigma 1.5) with constants
C1=(0.01)^2, C2=(0.03)^2 on unit pixel range, averaged over valid window
positions and channels.  PSNR is 20*log10(1/sqrt(MSE)) capped at 100 dB for
(near-)identical frames.  The FLOPs ledger counts the GEMM work of each
layer (multiply+add = 2 operations; norms/activations/biases excluded);
parameter counts include every tensor.  All functions leave their inputs
untouched.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .detector import DetectorConfig
from .errors import ShapeError
from .predictor import PredictorConfig

_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _gaussian_kernel() -> np.ndarray:
    half = _WINDOW // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * _SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _validate_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"frames differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"expected [C,H,W] or [H,W] frames, got {a.shape}")
    return a, b


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, (_WINDOW, _WINDOW))
    return np.tensordot(win, _KERNEL, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity between two frames on [0, 1] pixel range."""
    a, b = _validate_pair(a, b)
    if a.shape[1] < _WINDOW or a.shape[2] < _WINDOW:
        raise ShapeError(f"frames must be at least {_WINDOW}x{_WINDOW}, got {a.shape}")
    values = []
    for ca, cb in zip(a, b):
        mu_a = _windowed_mean(ca)
        mu_b = _windowed_mean(cb)
        var_a = _windowed_mean(ca * ca) - mu_a * mu_a
        var_b = _windowed_mean(cb * cb) - mu_b * mu_b
        cov = _windowed_mean(ca * cb) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
        den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on unit range, capped at 100."""
    a, b = _validate_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return float(min(100.0, 20.0 * np.log10(1.0 / np.sqrt(mse))))


# ---------------------------------------------------------------------------
# FLOPs / parameter ledger


@dataclass(frozen=True)
class LayerCost:
    name: str
    flops: int  # GEMM operations for one forward pass (mul+add = 2)
    params: int


def ledger_totals(ledger: list[LayerCost]) -> tuple[int, int]:
    return (sum(c.flops for c in ledger), sum(c.params for c in ledger))


def conv_cost(name: str, c_in: int, c_out: int, kernel: int,
              out_h: int, out_w: int, bias: bool = True) -> LayerCost:
    flops = 2 * kernel * kernel * c_in * c_out * out_h * out_w
    return LayerCost(name, flops, kernel * kernel * c_in * c_out + (c_out if bias else 0))


def linear_cost(name: str, d_in: int, d_out: int, positions: int = 1,
                bias: bool = True) -> LayerCost:
    return LayerCost(name, 2 * positions * d_in * d_out,
                     d_in * d_out + (d_out if bias else 0))


def detector_costs(cfg: DetectorConfig) -> list[LayerCost]:
    """Per-frame forward cost of encoder, projection, and decoder."""
    sizes = cfg.spatial_sizes()
    n, k = cfg.num_layers, cfg.kernel_size
    chans = (cfg.channels_in,) + cfg.channels
    ledger = []
    for i in range(n):
        h, w = sizes[i + 1]
        ledger.append(conv_cost(f"encoder{i}/conv", chans[i], chans[i + 1], k, h, w,
                                bias=False))
        ledger.append(LayerCost(f"encoder{i}/norm", 0, 2 * chans[i + 1]))
    hn, wn = sizes[-1]
    ledger.append(conv_cost("project", cfg.channels[-1], cfg.num_keypoints, 1, hn, wn))
    for j in range(n):
        c_in = (cfg.num_keypoints + cfg.channels[-1] if j == 0
                else 2 * cfg.channels[n - j - 1])
        c_out = cfg.channels[n - j - 2] if j < n - 1 else cfg.channels_in
        in_h, in_w = sizes[n - j]
        # transposed conv GEMM spans the input positions
        ledger.append(conv_cost(f"decoder{j}/deconv", c_in, c_out, k, in_h, in_w,
                                bias=(j == n - 1)))
        if j < n - 1:
            ledger.append(LayerCost(f"decoder{j}/norm", 0, 2 * c_out))
    return ledger


def predictor_costs(cfg: PredictorConfig, length: int | None = None,
                    num_layers: int | None = None,
                    include_mapper: bool = True) -> list[LayerCost]:
    """Cost of one encoder-stack pass over ``length`` positions."""
    l = cfg.seq_len if length is None else length
    layers = cfg.num_layers if num_layers is None else num_layers
    d, h = cfg.d_model, cfg.n_head
    k3 = 3 * cfg.num_keypoints
    ledger = []
    if include_mapper:
        ledger.append(linear_cost("mapper/embed", k3, d, positions=l, bias=False))
    for i in range(layers):
        ledger.append(linear_cost(f"layer{i}/wq", d, h * cfg.d_k, l, bias=False))
        ledger.append(linear_cost(f"layer{i}/wk", d, h * cfg.d_k, l, bias=False))
        ledger.append(linear_cost(f"layer{i}/wv", d, h * cfg.d_v, l, bias=False))
        ledger.append(LayerCost(f"layer{i}/attention",
                                2 * l * l * cfg.d_k * h + 2 * l * l * cfg.d_v * h, 0))
        ledger.append(linear_cost(f"layer{i}/wo", h * cfg.d_v, d, l, bias=False))
        ledger.append(LayerCost(f"layer{i}/norm1", 0, 2 * d))
        ledger.append(linear_cost(f"layer{i}/ffn1", d, cfg.d_inner, l))
        ledger.append(linear_cost(f"layer{i}/ffn2", cfg.d_inner, d, l))
        ledger.append(LayerCost(f"layer{i}/norm2", 0, 2 * d))
    if include_mapper:
        ledger.append(linear_cost("mapper/unembed", d, k3, positions=l, bias=False))
    return ledger


def pipeline_costs(det_cfg: DetectorConfig, pred_cfg: PredictorConfig,
                   mode: str, horizon: int,
                   sequential_layers: int = 1) -> list[LayerCost]:
    """Ledger for one full prediction pass of the chosen mode.

    Parallel: t encodes + one predictor pass + t decodes.  Sequential:
    t initial encodes, then per step one single-layer pass over the grown
    window, one decode, one re-encode.  Parameter entries appear once per
    distinct layer (frame counts scale only the flops column).
    """
    t = pred_cfg.seq_len
    det = detector_costs(det_cfg)

    def scale(ledger, factor, tag):
        return [LayerCost(f"{tag}/{c.name}", c.flops * factor, c.params)
                for c in ledger]

    if mode == "parallel":
        return scale(det, t + horizon, "detector") + scale(
            predictor_costs(pred_cfg), 1, "predictor")
    if mode == "sequential":
        ledger = scale(det, t + 2 * horizon, "detector")
        for step in range(horizon):
            step_cost = predictor_costs(pred_cfg, length=t + step,
                                        num_layers=sequential_layers,
                                        include_mapper=(step == 0))
            ledger += scale(step_cost, 1, f"step{step}")
        return ledger
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# timing harness


@dataclass
class BenchmarkResult:
    median_ms: float
    p95_ms: float
    fps: float
    repetitions: int
    frames_per_run: int

    @property
    def latency_seconds(self) -> float:
        return self.median_ms / 1000.0


def benchmark(run, frames_per_run: int, repetitions: int = 100,
              warmup: int = 10, threads: int | None = 1) -> BenchmarkResult:
    """Median/p95 latency of ``run()`` plus fps from the same timings.

    Warm-up executions are not timed.  ``threads`` pins the BLAS pools (via
    threadpoolctl when available) for comparability; the CLI exposes this
    through the ``TKN_BENCH_THREADS`` environment variable.  ``None`` leaves
    the pools alone.
    """
    if repetitions < 2:
        raise ValueError(f"repetitions={repetitions} is an insufficient sample; need >= 2")
    if frames_per_run < 1:
        raise ValueError("frames_per_run must be >= 1")

    def measure():
        for _ in range(warmup):
            run()
        times = np.empty(repetitions)
        for i in range(repetitions):
            start = time.perf_counter()
            run()
            times[i] = time.perf_counter() - start
        return times

    if threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            times = measure()
        else:
            with threadpool_limits(limits=threads):
                times = measure()
    else:
        times = measure()

    median_ms = float(np.median(times) * 1000.0)
    p95_ms = float(np.percentile(times, 95) * 1000.0)
    fps = frames_per_run / (median_ms / 1000.0)
    return BenchmarkResult(median_ms, p95_ms, fps, repetitions, frames_per_run)


def benchmark_pair(run_a, run_b, frames_a: int, frames_b: int,
                   repetitions: int = 100, warmup: int = 10,
                   threads: int | None = 1) -> tuple[BenchmarkResult, BenchmarkResult]:
    """Time two pipelines with interleaved runs (a, b, a, b, ...).

    Interleaving exposes both sides to the same background load, which makes
    their latency *ratio* far more stable on shared machines than two
    back-to-back :func:`benchmark` calls.
    """
    if repetitions < 2:
        raise ValueError(f"repetitions={repetitions} is an insufficient sample; need >= 2")

    def measure():
        for _ in range(warmup):
            run_a()
            run_b()
        ta = np.empty(repetitions)
        tb = np.empty(repetitions)
        for i in range(repetitions):
            begin = time.perf_counter()
            run_a()
            mid = time.perf_counter()
            run_b()
            ta[i] = mid - begin
            tb[i] = time.perf_counter() - mid
        return ta, tb

    if threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            ta, tb = measure()
        else:
            with threadpool_limits(limits=threads):
                ta, tb = measure()
    else:
        ta, tb = measure()

    def pack(times, frames):
        median_ms = float(np.median(times) * 1000.0)
        return BenchmarkResult(median_ms, float(np.percentile(times, 95) * 1000.0),
                               frames / (median_ms / 1000.0), repetitions, frames)

    return pack(ta, frames_a), pack(tb, frames_b)


# ---------------------------------------------------------------------------
# evaluation report


@dataclass
class PredictionReport:
    ssim: float
    psnr: float
    latency_ms: dict  # {"median": ..., "p95": ...}
    fps: float
    flops: int
    params: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PredictionReport":
        return cls(**json.loads(text))


def evaluate_pipeline(pipeline, sequences: list[np.ndarray], mode: str,
                      horizon: int, repetitions: int = 30,
                      warmup: int = 5) -> PredictionReport:
    """Score predictions against held-out futures and time the pipeline."""
    if mode == "parallel":
        t = pipeline.parallel.config.seq_len
        pred_cfg = pipeline.parallel.config
    else:
        t = pipeline.sequential.config.seq_len
        pred_cfg = pipeline.sequential.config

    ssim_scores, psnr_scores = [], []
    for seq in sequences:
        if len(seq) < t + horizon:
            raise ShapeError(f"sequence length {len(seq)} < t + horizon = {t + horizon}")
        preds = (pipeline.predict_parallel(seq[:t]) if mode == "parallel"
                 else pipeline.predict_sequential(seq[:t], horizon))
        truth = seq[t:t + horizon]
        ssim_scores.append(np.mean([ssim(p, g) for p, g in zip(preds, truth)]))
        psnr_scores.append(np.mean([psnr(p, g) for p, g in zip(preds, truth)]))

    probe = sequences[0][:t]
    run = (lambda: pipeline.predict_parallel(probe)) if mode == "parallel" else (
        lambda: pipeline.predict_sequential(probe, horizon))
    bench = benchmark(run, frames_per_run=horizon, repetitions=repetitions,
                      warmup=warmup)
    flops, params = ledger_totals(
        pipeline_costs(pipeline.detector.config, pred_cfg, mode, horizon))
    return PredictionReport(
        ssim=float(np.mean(ssim_scores)),
        psnr=float(np.mean(psnr_scores)),
        latency_ms={"median": bench.median_ms, "p95": bench.p95_ms},
        fps=bench.fps,
        flops=flops,
        params=params,
    )
