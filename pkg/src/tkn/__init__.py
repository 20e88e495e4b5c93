"""Keypoint-based real-time video prediction.

Subpackages and modules:

- :mod:`tkn.engine` — dense tensors, forward operators, reverse-mode autodiff
- :mod:`tkn.keypoints` — coordinate/heatmap conversions shared by the models
- :mod:`tkn.detector` — unsupervised keypoint autoencoder and its trainer
- :mod:`tkn.predictor` — transformer-encoder keypoint sequence predictor
- :mod:`tkn.pipelines` — parallel, sequential, and streaming inference
- :mod:`tkn.data` — synthetic sprite video generator and sequence files
- :mod:`tkn.metrics` — SSIM/PSNR, FLOPs/parameter ledger, latency harness
- :mod:`tkn.checkpoint` — binary checkpoint format
- :mod:`tkn.cli` — command-line interface
"""

__version__ = "0.1.0"
