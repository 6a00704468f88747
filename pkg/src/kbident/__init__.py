"""Noise-robust grey-box identification of nonlinear ODE systems.

Two small neural networks -- one for the state mean, one for the state
covariance -- are trained so that their outputs and exact time derivatives
satisfy the extended Kalman-Bucy filter equations of a parametric state-space
model.  The unknown physical parameters are optimized jointly with the
network weights, which avoids repeated numerical ODE solves and tolerates
heavy measurement noise and small model errors.
"""

from .errors import (ConfigError, KbidentError, NumericalError,
                     UnsupportedMeasurementError)
from .model import (DoublePendulumParams, MeasurementSeries, NoiseSpec,
                    ParamSpec, StateSpaceModel, double_pendulum, dp_rhs,
                    load_measurements, measure, pendulum_energy,
                    save_measurements, scalar_linear, simulate)
from .nets import CovNet, MeanNet, MlpConfig, assemble_psd, init_weights
from .ekbf import (FilterMatrices, KbinnLossConfig, LossBreakdown, kalman_gain,
                   linearize, loss_l1, loss_l2, loss_l3, loss_pinn, loss_total,
                   propagate_moments)
from .train import (IdentResult, NetConfigs, ParamTransform, TrainConfig,
                    TrainReport, adam_step, extrapolate_tail, identify)
from .bench import (StudyConfig, StudyResult, baseline_identify,
                    export_showcase, run_frequency_sweep, run_study)

__version__ = "0.1.0"
