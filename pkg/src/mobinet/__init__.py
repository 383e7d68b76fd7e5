"""mobinet: a 1-bit binary CNN toolkit.

Dense/bit-packed tensors with xnor-popcount kernels, binary depth-wise
separable blocks with skip connections and K-dependency grouping, a
desk-scale training engine with the latent-weight update rule, a bit-exact
1-bit model format, and an op/param/memory meter.
"""

__version__ = "0.1.0"

from .bitpack import BitTensor, pack_row, unpack_row, xnor_popcount_dot
from .binarize import binarize_filter, optimal_scale, sign_binarize, ste_grad, weight_gradient
from .kernels import BinaryConvLayer, KDependency, avg_pool, binary_conv, float_conv
from .network import NetworkConfig, build_network, desk_config

__all__ = [
    "BitTensor",
    "pack_row",
    "unpack_row",
    "xnor_popcount_dot",
    "sign_binarize",
    "optimal_scale",
    "binarize_filter",
    "ste_grad",
    "weight_gradient",
    "BinaryConvLayer",
    "KDependency",
    "float_conv",
    "binary_conv",
    "avg_pool",
    "NetworkConfig",
    "build_network",
    "desk_config",
    "__version__",
]
