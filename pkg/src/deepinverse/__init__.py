"""Compressive-sensing image recovery: a learned convolutional inverse map
and the classical iterative solvers it is compared against."""

from .baselines import (SolverConfig, SparsityBasis, amp_recover, dct2, idct2, iht_recover,
                        tv_recover)
from .errors import (DeepInverseError, DimensionError, DivergenceError, DomainError,
                     FormatError, NumericError, ShapeMismatchError)
from .metrics import RecoveryResult, nmse, psnr, success
from .network import (Architecture, InferenceNet, NetworkParams, TrainConfig, forward,
                      init_params, load_params, save_params, train)
from .sensing import MeasurementEnsemble, gen_ensemble, load_ensemble, measure, proxy, save_ensemble

__version__ = "0.1.0"
