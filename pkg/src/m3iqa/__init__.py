"""Quality prediction from logit-sequence features with an xLSTM head."""
from .estimator import XLSTMRegressor
from .metrics import MetricsReport, plcc, rough_accuracy, srcc
from .predictor import PredictorConfig, param_count

__version__ = "0.1.0"
__all__ = ["XLSTMRegressor", "MetricsReport", "PredictorConfig", "param_count",
           "plcc", "rough_accuracy", "srcc"]
