"""Adversarially-robust transfer learning at desk scale.

A small numpy-backed toolkit: tape-based reverse-mode differentiation,
a layer zoo with an extractor/sub-model split, L-infinity FGSM/PGD
attacks, adversarial source training with a feature-distance penalty,
non-expansive and feature-anchored fine-tuning, batch-norm freeze
policies, bit-exact checkpoints, and a CLI that runs sweeps and renders
CSV + SVG reports.
"""

from .attacks import AttackConfig, fgsm, pgd, project_linf, robust_accuracy
from .data import Dataset, load_cifar_binary, load_idx, stratified_subset, synth_blobs, synth_patterns
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .layers import (
    BatchNorm,
    Block,
    Conv2D,
    Dense,
    Flatten,
    ForwardCtx,
    GlobalAvgPool,
    MaxPool2,
    Network,
    ReLU,
    ResidualBlock,
    build_network,
    conv_weight_as_matrix,
    residual_aggregate,
    split,
)
from .rng import RngState
from .tensor import Tape, Tensor, finite_diff_check, forward_eval, reverse_grad
from .training import (
    FDMConfig,
    Schedule,
    SGD,
    TrainConfig,
    fdm_loss,
    lr_at_epoch,
    train_adversarial,
    train_source_cartl,
    train_standard,
)
from .transfer import (
    BnPolicy,
    SpectralState,
    TransferConfig,
    apply_bn_policy,
    bake_spectral,
    empirical_lipschitz_probe,
    finetune,
    lwf_finetune,
    neft_finetune,
    neft_normalize,
    per_layer_bound_product,
    power_iteration,
    svd_spectral_norm,
    vanilla_finetune,
)

__version__ = "0.1.0"
