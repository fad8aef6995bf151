"""Sub-1-bit LLM weight compression.

Row-wise binarization with alternating refinement, a Hamming-space
codebook over the sign stream, an optional salient-residual overlay,
an invertible sign-flip + Kronecker activation transform, and a
table-lookup matmul kernel that consumes the compressed form directly.
"""

from .binarize import (
    BinarizeConfig,
    BinarizedRowSet,
    SalientOverlay,
    SplitGrouping,
    arb_refine,
    binarization_objective,
    binarize_rowwise,
    residual_binarize,
    row_center,
    search_split_points,
    select_salient,
)
from .codebook import (
    BinaryCodebook,
    BinaryVectorSet,
    CodebookResult,
    optimize_codebook,
    reconstruct,
    weight_to_vector,
)
from .container import (
    BtcqContainer,
    deserialize,
    read_layer,
    read_weights,
    section_layout,
    serialize,
    write_layer,
    write_weights,
)
from .errors import (
    BadMagicError,
    ConfigError,
    ContainerError,
    CorruptIndexError,
    DomainError,
    IntegrityError,
    ShapeError,
    SingularTransformError,
    TruncatedError,
    UnsupportedVersionError,
)
from .lutgemm import (
    ActivationLut,
    LutGemmPlan,
    bench_lut_vs_dense,
    build_activation_lut,
    lut_gemm,
    make_plan,
    sign_gemm,
)
from .matrix import PackedBinaryMatrix, hamming_distance, hamming_matrix
from .pipeline import (
    FitConfig,
    QuantizeConfig,
    QuantizedLayer,
    TransformFitResult,
    btc_quantize,
    dequantize,
    effective_bits,
    fit_transform,
    layer_matmul,
    nm_mask_bits,
    plan_from_layer,
)
from .transform import (
    AuxLossConfig,
    TransformPair,
    apply_transform,
    balance_loss,
    block_objective,
    equivalence_check,
    gram_similarity_loss,
    identity_pair,
    inverse_transform_weight,
    jacobi_eigvalsh,
    kronecker_split,
    optimize_P,
    optimize_sign_flips,
    transform_matrix,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationLut",
    "AuxLossConfig",
    "BadMagicError",
    "BinarizeConfig",
    "BinarizedRowSet",
    "BinaryCodebook",
    "BinaryVectorSet",
    "BtcqContainer",
    "CodebookResult",
    "ConfigError",
    "ContainerError",
    "CorruptIndexError",
    "DomainError",
    "FitConfig",
    "IntegrityError",
    "LutGemmPlan",
    "PackedBinaryMatrix",
    "QuantizeConfig",
    "QuantizedLayer",
    "SalientOverlay",
    "ShapeError",
    "SingularTransformError",
    "SplitGrouping",
    "TransformFitResult",
    "TransformPair",
    "TruncatedError",
    "UnsupportedVersionError",
    "apply_transform",
    "arb_refine",
    "balance_loss",
    "bench_lut_vs_dense",
    "binarization_objective",
    "binarize_rowwise",
    "block_objective",
    "btc_quantize",
    "build_activation_lut",
    "dequantize",
    "deserialize",
    "effective_bits",
    "equivalence_check",
    "fit_transform",
    "gram_similarity_loss",
    "hamming_distance",
    "hamming_matrix",
    "identity_pair",
    "inverse_transform_weight",
    "jacobi_eigvalsh",
    "kronecker_split",
    "layer_matmul",
    "lut_gemm",
    "make_plan",
    "nm_mask_bits",
    "optimize_P",
    "optimize_codebook",
    "optimize_sign_flips",
    "plan_from_layer",
    "read_layer",
    "read_weights",
    "reconstruct",
    "residual_binarize",
    "row_center",
    "search_split_points",
    "section_layout",
    "select_salient",
    "serialize",
    "sign_gemm",
    "transform_matrix",
    "weight_to_vector",
    "write_layer",
    "write_weights",
]
