"""Desk-scale post-training pruning toolkit for toy decoder transformers.

Public surface: matrix kernels (linalg), the toy model and its bit-exact
container format (model, container_io), calibration statistics
(calibration), saliency scores (scoring), mask selection (sparsity), the
compensation solver (solver), attention fidelity and Q/K/V searches
(attention), evaluation metrics and reports (evaluation), and the pipeline
with its estimator facade (pipeline). The `d2prune` console script fronts
the batch workflow.
"""

from .attention import (
    AttnFidelity,
    QkvUpdateConfig,
    argmin_candidate,
    attn_kl,
    outlier_ratio,
    search_nonuniform,
    search_uniform,
)
from .calibration import (
    CalibStats,
    Corpus,
    LayerStats,
    ScaleSpec,
    accumulate,
    activation_shift_report,
    gen_corpus,
    scaled_norm,
)
from .errors import (
    BadMagicError,
    ConfigError,
    D2PruneError,
    FormatError,
    InputError,
    MetadataError,
    NumericalError,
    ShapeError,
    SingularHessianError,
    TruncatedTensorError,
    VersionError,
)
from .evaluation import (
    TOOLKIT_VERSION,
    EvalResult,
    RunReport,
    emit_report,
    logit_divergence,
    perplexity,
    read_report,
)
from .linalg import damped_inverse, l2_norm_cols, matmul, softmax_rows
from .model import (
    ForwardTrace,
    ModelConfig,
    WeightContainer,
    forward,
    generate_weights,
    load,
    save,
)
from .pipeline import D2Pruner, PruneSettings, prune_model, run
from .scoring import (
    PRESETS,
    DualParams,
    SaliencyMatrix,
    coupled_params,
    score_d2,
    score_magnitude,
    score_sparsegpt,
    score_wanda,
)
from .solver import LayerPruneResult, compensate_column, prune_layer
from .sparsity import PruneMask, SparsityPattern, select_mask, verify

__version__ = TOOLKIT_VERSION
