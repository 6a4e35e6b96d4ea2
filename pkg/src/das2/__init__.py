"""Deep adaptive sampling (DAS2) for surrogate models of parametric ODEs.

A residual-trained neural surrogate is refined in stages: a normalizing flow
is fit to the squared residual and new collocation points are drawn from it.
"""
from .autodiff import Dual, ShapeError, Tape, Var, check_gradient, grad_input, grad_params
from .flow import (
    BoxDomain,
    FlowModel,
    SamplingStarvation,
    flow_forward,
    flow_init,
    flow_inverse,
    flow_logpdf,
    flow_sample,
    train_flow,
)
from .nets import Ansatz, Surrogate, branch_trunk_init, mlp_init
from .problems import OpLearnCheb, ParamODE, make_problem, marginal_residual, rk45_oracle
from .sampling import TrainingSet, cutoff_h, halton_sample, rar_select, refine_training_set
from .trainer import (
    AdaptiveConfig,
    FlowSpec,
    RunRecord,
    SurrogateSpec,
    Validator,
    build_flow,
    build_surrogate,
    das2_joint,
    das2_marginal,
    empirical_loss,
    evaluate_grid,
    full_set_loss,
    marginal_loss,
    product_points,
    run,
    run_adaptive,
    run_baseline,
)

__all__ = [
    "Dual",
    "ShapeError",
    "Tape",
    "Var",
    "check_gradient",
    "grad_input",
    "grad_params",
    "BoxDomain",
    "FlowModel",
    "SamplingStarvation",
    "flow_forward",
    "flow_init",
    "flow_inverse",
    "flow_logpdf",
    "flow_sample",
    "train_flow",
    "Ansatz",
    "Surrogate",
    "branch_trunk_init",
    "mlp_init",
    "OpLearnCheb",
    "ParamODE",
    "make_problem",
    "marginal_residual",
    "rk45_oracle",
    "TrainingSet",
    "cutoff_h",
    "halton_sample",
    "rar_select",
    "refine_training_set",
    "AdaptiveConfig",
    "FlowSpec",
    "RunRecord",
    "SurrogateSpec",
    "Validator",
    "build_flow",
    "build_surrogate",
    "das2_joint",
    "das2_marginal",
    "empirical_loss",
    "evaluate_grid",
    "full_set_loss",
    "marginal_loss",
    "product_points",
    "run",
    "run_adaptive",
    "run_baseline",
]

__version__ = "0.1.0"
