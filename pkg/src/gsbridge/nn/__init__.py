"""Small numpy neural-network engine with hand-written backward passes."""
from .functional import (
    dense_conv3d_bwd,
    dense_conv3d_fwd,
    dense_transpose_conv3d_bwd,
    dense_transpose_conv3d_fwd,
    sparse_conv3d_bwd,
    sparse_conv3d_fwd,
)
from .kernel_map import (
    conv_neighbors,
    downsample_coordinates,
    generate_coordinates,
    kernel_offsets,
    transpose_neighbors,
)
from .layers import (
    CapacityError,
    DenseConv3d,
    DenseResBlock,
    DenseTransposeConv3d,
    GenerativeTransposeConv3d,
    GroupNorm,
    Linear,
    Module,
    Parameter,
    PointwiseMLP,
    SiLU,
    SparseConv3d,
    SparseResBlock,
    SparseTransposeConv3d,
    SparseUNet,
    TimeEmbedding,
    gen_sparse_transpose_conv3d,
    prune,
    prune_backward,
    sparse_conv3d,
)
from .optim import ParameterStore, adam_step, cosine_lr

__all__ = [
    "CapacityError", "DenseConv3d", "DenseResBlock", "DenseTransposeConv3d",
    "GenerativeTransposeConv3d", "GroupNorm", "Linear", "Module", "Parameter",
    "ParameterStore", "PointwiseMLP", "SiLU", "SparseConv3d", "SparseResBlock",
    "SparseTransposeConv3d", "SparseUNet", "TimeEmbedding", "adam_step", "conv_neighbors", "cosine_lr",
    "dense_conv3d_bwd", "dense_conv3d_fwd", "dense_transpose_conv3d_bwd",
    "dense_transpose_conv3d_fwd", "downsample_coordinates", "gen_sparse_transpose_conv3d",
    "generate_coordinates", "kernel_offsets", "prune", "prune_backward", "sparse_conv3d",
    "sparse_conv3d_bwd", "sparse_conv3d_fwd", "transpose_neighbors",
]
