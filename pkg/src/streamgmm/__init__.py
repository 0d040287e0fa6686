"""streamgmm: streaming generalized method of moments for dependent data.

Batch-wise explicit parameter updates with constant-size summaries,
recursive long-run variance weighting, online over-identification and
structural-stability tests, wavelet-moment models with an online Haar
pyramid, and a seeded experiment harness.
"""

from .core import (Batch, ImplicitConfig, MomentModel, OgmmState, Weighting,
                   init_state, split_batch, update_batch,
                   update_batch_implicit)
from .inference import (AnomalyMonitor, AnomalySnapshot, ConfidenceRegion,
                        TestReport, anomaly_full, anomaly_restricted,
                        anomaly_unrestricted, chisq_cdf, chisq_quantile,
                        confidence_region, contrast_interval,
                        marginal_interval, normal_quantile, sargan_hansen)
from .lrv import (KernelLrv, WelfordAccumulator, bartlett_lrv, pd_adjust,
                  sprime_sequence)
from .modwt import ModwtState, modwt_init, modwt_push, wavelet_observations
from .moments import (IvMoment, LeqrEstimator, OlsMoment,
                      SmoothedQuantileMoment, WaveletMoment,
                      ar1_wavelet_variance, quantile_bandwidth, smooth_cdf,
                      smooth_pdf)
from .offline import (fit_wavelet_model, initial_quantile_fit, linear_gmm,
                      tsls, twostep_gmm, twostep_linear_iv)
from .sgmm import SgmmEstimator, select_learning_rate
from .simgen import (SimModel, batch_stream, generate, gmwm_signal,
                     moment_model, theta_star)
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"
