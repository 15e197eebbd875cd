"""Training-free diffusion guidance on closed-form models.

Gaussian mixtures and Gaussian trajectory priors stand in for a trained
backbone, so scores, Tweedie estimates and exact guidance terms are all
available in closed form and every guidance method can be checked against
an oracle.
"""

from .analysis import (coupling_tv, discretization_order, estimate_grad_lipschitz,
                       estimate_lipschitz, q_function, resampling_contraction, tv_estimate,
                       two_stage_metrics, accumulated_gradient_probe)
from .errors import (CapabilityError, ConfigError, InputError, InsufficientDataError,
                     NumericalError, OrderingError, SingularTimeError, TFGuideError)
from .guidance import (AugmentationSet, GuidanceConfig, ResamplingPlan, guided_update,
                       lgd_mc_grad, random_aug_grad, resample_sweep, smoothed_loss_grad,
                       tweedie_guidance_grad)
from .losses import (ComponentLogLoss, GuidanceLoss, QuadraticTarget, RuggedLoss, StepLoss,
                     loss_from_dict)
from .motion import (MotionCondition, TrajectoryPrior, guided_motion_sample, motion_loss,
                     trajectory_score)
from .oracles import (MixtureModel, PosteriorMoments, exact_guidance_grad, finite_diff_grad,
                      marginal_log_density, posterior_cov, posterior_mean, score)
from .sampler import SampleTrace, sample
from .schedule import NoiseSchedule, ddim_step, forward_noise, make_schedule

__version__ = "0.1.0"
