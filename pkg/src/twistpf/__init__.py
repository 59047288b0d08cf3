"""Twisted particle filters with learned twisting functions.

Estimates normalizing constants of discretized state-space models with a
family of particle filters: plain bootstrap, fully adapted, iterated
auxiliary, and filters twisted by functions trained on path-measure
divergences. Exact references (Kalman, closed-form optimal twists,
finite-state enumeration) validate every stochastic piece.
"""

from .core import (DegenerateEnsembleError, EvaluationError, FeynmanKacModel,
                   GaussianKernel, RejectionSamplingError, SeedSpec,
                   gaussian_em_kernel, simulate_chain, simulate_paths)
from .models import (Dataset, LinearGaussianSpec, Lorenz96Spec, Ngm78Spec,
                     build_model, generate_dataset, model_id_of,
                     spec_from_fields)
from .filtering import (ALWAYS, FilterReport, ResamplePolicy, adaptive,
                        ess_relative, fa_apf_twist, run_bpf, run_replicates,
                        run_tpf)
from .twisting import (ConstantTwist, GaussianTwist, NNTwist, TwistFunction,
                       identity_twist, load_twist_params, save_twist_params,
                       simulate_twisted_paths)
from .losses import (GaussianTableTwist, LossEstimate, NetworkTwist,
                     TabularTwist, TrainConfig, TrainingTrace, chain_model,
                     loss_ce, loss_re, loss_rece, train_tppf)
from .iapf import DiagGaussianTwist, IapfConfig, run_iapf
from .oracle import (FiniteChain, KalmanResult, LgmOptimalTwist, chi_square,
                     check_dv_principle, check_em_kernel_convergence,
                     check_variance_bounds, check_zdis_trend, enumerate_chain,
                     kalman_log_z, kl_divergence, lgm_optimal_twist,
                     relative_variance, twisted_path_law)
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"
