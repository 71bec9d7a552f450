"""Symmetric INT8 quantization-aware training with a selective kurtosis regularizer."""

from .autodiff import Tape, Var, backward, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .kure import KurtosisReport, kure_penalty, kurtosis, kurtosis_grad, kurtosis_report
from .model import ModelConfig, QatState, forward, generate_pretrained_like, init_params
from .pipeline import RunRecord, SyntheticTask, TrainConfig, ab_experiment, evaluate, run_pipeline
from .quant import (ActCalibrator, QTensor, calibrate, compute_scale_maxabs, dequantize,
                    fake_quant, int8_matmul, quantize)
from .tensor import Normal, StudentT, Uniform, make_rng, rand_tensor

__version__ = "0.1.0"
