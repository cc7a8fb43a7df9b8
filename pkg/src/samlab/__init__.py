"""samlab: a desk-scale sharpness-aware optimization laboratory."""

__version__ = "0.1.0"

from .params import LayoutEntry, ParamLayout, ParamVector
from .autodiff import NonFiniteError, Tensor
from .diffops import (
    DiffFunction,
    FunctionFamily,
    dense_hessian,
    finite_diff_grad,
    grad,
    hvp,
    quadratic,
    value_and_grad,
)
from .models import (
    FactorizationProblem,
    ModelSpec,
    alpha_scaled_loss,
    count_linear_segments,
    factorization_loss,
    mlp_forward,
    mlp_init,
)
from .optim import (
    ConvergenceConstants,
    OptimizerConfig,
    Schedule,
    convergence_bound,
    minibatch_sam_step,
    optimal_step_size,
    sam_step,
    sgd_step,
    train,
)
from .stability import (
    HessianEnsemble,
    StabilityReport,
    ensemble_from_model,
    hessian_moments,
    necessary_conditions,
    nonuniformity,
    simulate_linearized_sam,
    stability_matrix,
    stability_matrix_lmax,
    stability_report,
)
from .landscape import (
    TrajectoryBundle,
    empirical_alpha,
    empirical_beta,
    implicit_reg_objective,
    lemma_checks,
    pca_project,
    perturbation_gap,
    sharpness_lmax,
)
from .data import (
    Dataset,
    SparsityMask,
    gen_4d_target,
    gen_teacher_student,
    inject_label_noise,
    load_mnist_idx,
    random_mask,
    snip_mask,
)
from .record import RunRecord, load_run, save_run

__all__ = [name for name in dir() if not name.startswith("_")]
