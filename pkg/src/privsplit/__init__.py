"""Layer-partitioned privacy-preserving CNN training with a
reconstruction-attack auditor.

The package splits a small CNN at its first (quantized) activation: an
edge party computes the first convolution plus a step-wise activation
and ships only those activations, while a trainer fits the remaining
layers on that metadata. The inversion module measures how much of the
raw input an attacker holding the metadata and first-layer weights can
reconstruct by solving the convolution as patch-wise linear systems.
"""

from .activations import (
    StepWiseConfig,
    relu,
    sigmoid,
    sigmoid_inverse,
    step_wise,
    step_wise_pseudo_inverse,
    tanh_inverse,
)
from .datasets import (
    LabeledDataset,
    export_image_grid,
    load_cifar10,
    load_mnist,
)
from .inversion import (
    PatchSystem,
    ReconstructionReport,
    build_patch_system,
    check_uniqueness_equivalence,
    invert_conv_layer,
    invert_relu_system,
    solve_patch,
)
from .network import (
    TrainConfig,
    backward,
    build_reference_model,
    evaluate,
    forward,
    load_checkpoint,
    save_checkpoint,
    sgd_momentum_step,
    split_reference_model,
    train_model,
)
from .protocol import MetadataBatch, SessionConfig
from .split import edge_process, handshake, trainer_process
from .tensor import ConvSpec, Tensor, conv2d, matmul, pool2d

__version__ = "0.1.0"
