"""Fit-Hand: a compact multi-scale attention CNN for static hand gestures,
built on a small numpy autodiff core."""

from .attention import attention_fuse, deviation, midrange
from .checkpoint import load_checkpoint, save_checkpoint
from .data import augment, histogram_equalize, load_dataset, resize_and_normalize, split, SplitPlan, synth_dataset
from .finefeat import FineFeatSpec, finefeat_forward, finefeat_param_count
from .gradcheck import grad_check
from .network import VARIANTS, audit_parameters, build_fithand, build_variant, dump_mean_activations, effective_kernel
from .ops import ConvSpec, conv2d, cross_entropy_loss, dense, kl_divergence_loss, l2_normalize, lrn, sgd_step
from .tensor import GradTape, Tensor, precision
from .train import Metrics, TrainConfig, evaluate, train

__version__ = "0.1.0"
