"""Slice-ensemble volumetric super-resolution with test-time adaptation."""

from .errors import BundleLoadError, ContractViolation, DataError, NumericAbort
from .volume import DegradeSpec, SliceStack, Volume
from .models import ModelBundle, NetConfig, load_bundle, save_bundle
from .train import TrainPlan, train_main, train_srn
from .adapt import AdaptPlan, adapt
from .infer import MethodVariant, SRResult, run_ablation_suite, sr_full, sr_through_plane
from .metrics import EvalReport, psnr, ssim

__all__ = [
    "AdaptPlan",
    "BundleLoadError",
    "ContractViolation",
    "DataError",
    "DegradeSpec",
    "EvalReport",
    "MethodVariant",
    "ModelBundle",
    "NetConfig",
    "NumericAbort",
    "SRResult",
    "SliceStack",
    "TrainPlan",
    "Volume",
    "adapt",
    "load_bundle",
    "psnr",
    "run_ablation_suite",
    "save_bundle",
    "sr_full",
    "sr_through_plane",
    "ssim",
    "train_main",
    "train_srn",
]
