"""selmix: Monte Carlo selective inference for mixed and additive models.

After a data-driven model selection step (information-criterion search,
backward elimination, or any user-supplied deterministic procedure), naive
p-values and confidence intervals for the selected effects are invalid.
This package computes post-selection inference by conditioning on the
selection event: the response is decomposed along the tested direction,
resampled, and the selection procedure is re-run on every rebuilt response;
only congruent samples (those reproducing the original selection) enter the
importance-weighted test.
"""

from .direction import (
    TestDirection,
    conditional,
    group,
    lm_marginal,
    spline_pointwise,
)
from .engine import (
    CongruencyDraw,
    EngineError,
    InferenceResult,
    LowCongruencyError,
    ProposalSpec,
    ci_from_draw,
    ci_mixture,
    draw_congruency,
    ess_from_draw,
    group_mixture,
    group_pvalue,
    mixture_preset,
    null_centered,
    obs_centered,
    pvalue_from_draw,
    selective_ci,
    selective_pvalue,
    truncated_chi_pvalue,
    truncated_normal_pvalue,
)
from .mmfit import (
    FitError,
    FitResult,
    caic,
    fit_model,
    fit_reml,
    plugin_covariance,
    solve_blup,
)
from .modelcore import CovarianceModel, ErrorCov, ModelSpec, RanefBlock
from .selection import (
    BackwardEliminationProcedure,
    CaicSelectProcedure,
    CustomProcedure,
    HierarchicalCaicProcedure,
    SelectionOutcome,
    SelectionProcedure,
    backward_pvalue,
    caic_select,
)
from .simharness import (
    Arm,
    generate_am52,
    generate_lmm51,
    ks_uniform,
    run_am52_study,
    run_lmm_study,
    summarize_am52,
    summarize_lmm,
)
from .splines import (
    SmoothTerm,
    build_additive_model,
    build_basis,
    fit_pls,
    smooth_term,
    tensor_product,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
