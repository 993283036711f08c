"""Tall-wide factor imputation of missing panel data, with inference and treatment effects."""
from .apc import FactorModel, RankDeficiencyWarning, estimate_apc, ic_values, select_r, soft_threshold_apc
from .em import EmInfo, impute_em
from .errors import (
    CollinearLoadings,
    DegenerateDof,
    DegenerateSeries,
    EmptySeries,
    EstimationError,
    FbiError,
    InputError,
    InsufficientData,
    InvalidInput,
    MaskedInput,
    NoBalancedBlock,
    OrderConditionError,
    ParseError,
    RankError,
    SingularDesign,
    SingularSubBlock,
    StateError,
)
from .numerics import SvdResult, ols, sign_normalize, thin_svd
from .panel import (
    BAL,
    MISS,
    TALL,
    WIDE,
    BlockPartition,
    Panel,
    check_order_conditions,
    load_csv,
    partition_blocks,
    rescale,
    unscale,
    write_csv,
)
from .refit import (
    CellInference,
    VarianceComponents,
    block_error_summary,
    cell_inference,
    compute_B_matrices,
    estimate_variance_components,
    panel_inference,
    reestimate,
    update,
)
from .treatment import (
    TreatmentPanel,
    TreatmentResult,
    att_tw,
    att_variance_t,
    estimate_ife_beta,
    individual_effect_inference,
    sigma_e_hat,
    unit_average_effect_inference,
)
from .tw import ImputedPanel, TwEstimate, classify_cell, impute_tw

__version__ = "0.1.0"
