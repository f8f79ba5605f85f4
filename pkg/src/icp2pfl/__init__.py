"""Serverless ring federated continual learning for low-dose CT denoising.

The building blocks, bottom up:

* :mod:`icp2pfl.nn`            residual conv denoiser with a hand-written backward pass
* :mod:`icp2pfl.data`          synthetic phantom institutions
* :mod:`icp2pfl.metrics`       PSNR, SSIM, MSE
* :mod:`icp2pfl.continual`     QP gradient correction
* :mod:`icp2pfl.controller`    performance scoring and sequencing
* :mod:`icp2pfl.proto`         wire format, node state machine, transports
* :mod:`icp2pfl.orchestrator`  end-to-end runs and baselines
"""
from .config import ExperimentConfig, parse_config
from .continual import TrainConfig
from .data import make_institutions
from .nn import Arch, Denoiser
from .orchestrator import (RunReport, run_centralized, run_fedavg, run_icp2pfl, run_method,
                           run_sequential)

__version__ = "0.1.0"

__all__ = [
    "Arch", "Denoiser", "ExperimentConfig", "RunReport", "TrainConfig", "make_institutions",
    "parse_config", "run_centralized", "run_fedavg", "run_icp2pfl", "run_method",
    "run_sequential",
]
