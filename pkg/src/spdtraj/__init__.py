"""Covariance descriptors on the SPD manifold, trajectory kernels and SVM
classification over them.
"""

from .align import (
    Alignment,
    Trajectory,
    alignment_cost,
    build_trajectory,
    delannoy_number,
    dtw_dissimilarity,
    dtw_proximity_matrix,
    enumerate_alignments,
    gak_gram,
    gak_similarity,
    resample_trajectory,
)
from .covdesc import (
    CovDescriptor,
    compute_covariance,
    descriptor_set,
    extract_features,
    extract_region_features,
    map_pixel,
    resize_maps,
)
from .errors import (
    DegenerateRegionError,
    FormatError,
    NumericalError,
    SpdtrajError,
    ValidationError,
)
from .fusion import (
    FusionConfig,
    feature_concat,
    kernel_weighted_sum,
    late_product,
    late_weighted_sum,
    search_weights,
    simplex_grid,
)
from .pipeline import (
    EvalReport,
    ModelBundle,
    RunConfig,
    assign_subject_folds,
    run_training,
)
from .spdcore import (
    KernelMatrix,
    PsdCheck,
    SpdPoint,
    check_psd,
    gram_matrix,
    lerm_distance,
    load_matrix_csv,
    matrix_exp,
    matrix_log,
    rbf_kernel,
    save_matrix_csv,
)
from .svm import KernelSVC, PpfSVC, load_model, save_model
from .tensorio import (
    DatasetManifest,
    FeatureTensor,
    ManifestEntry,
    RegionMask,
    read_manifest,
    read_mask,
    read_tensor,
    synth_generate,
    write_manifest,
    write_mask,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Alignment",
    "CovDescriptor",
    "DatasetManifest",
    "DegenerateRegionError",
    "EvalReport",
    "FeatureTensor",
    "FormatError",
    "FusionConfig",
    "KernelMatrix",
    "KernelSVC",
    "ManifestEntry",
    "ModelBundle",
    "NumericalError",
    "PpfSVC",
    "PsdCheck",
    "RegionMask",
    "RunConfig",
    "SpdPoint",
    "SpdtrajError",
    "Trajectory",
    "ValidationError",
    "alignment_cost",
    "assign_subject_folds",
    "build_trajectory",
    "check_psd",
    "compute_covariance",
    "delannoy_number",
    "descriptor_set",
    "dtw_dissimilarity",
    "dtw_proximity_matrix",
    "enumerate_alignments",
    "extract_features",
    "extract_region_features",
    "feature_concat",
    "gak_gram",
    "gak_similarity",
    "gram_matrix",
    "kernel_weighted_sum",
    "late_product",
    "late_weighted_sum",
    "lerm_distance",
    "load_matrix_csv",
    "load_model",
    "map_pixel",
    "matrix_exp",
    "matrix_log",
    "rbf_kernel",
    "read_manifest",
    "read_mask",
    "read_tensor",
    "resample_trajectory",
    "resize_maps",
    "run_training",
    "save_matrix_csv",
    "save_model",
    "search_weights",
    "simplex_grid",
    "synth_generate",
    "write_manifest",
    "write_mask",
    "write_tensor",
]
