"""scoreflow: curve-supported targets, analytic diffusion and
flow-matching fields, Lyapunov analysis, and perturbation-response
diagnostics for generative-model dynamics."""

__version__ = "0.1.0"

from .manifold import (
    CurveManifold,
    QuadratureRule,
    build_curve,
    curve_config,
    curve_from_config,
    point_target,
    project_to_manifold,
    quadrature_nodes,
    sample_target,
)
from .schedule_score import (
    DriftModel,
    NoiseSchedule,
    PosteriorMoments,
    cfm_field,
    cosine_beta,
    field_dump,
    posterior_moments,
    reverse_drift,
    score,
    score_hessian,
    score_jacobian,
)
from .dynamics import (
    DivergenceError,
    PerturbationSpec,
    RecordFlags,
    TrajectoryBundle,
    em_step,
    ode_step,
    run_paths,
    simulate,
    step_hessian,
    step_jacobian,
)
from .lyapunov import (
    LyapunovReport,
    cauchy_green_top,
    ftle,
    inhomogeneous_response,
    init_frame,
    qr_push,
)
from .analysis import (
    AlignmentRecord,
    CoordinateMean,
    SmoothedDiskMass,
    alignment_scan,
    kde_grid,
    le_gap,
    response_consistency,
    support_shift,
    tangent_estimate_error,
    theorem_diagnostics,
)
