"""Component-wise gradient boosting with coupled selection across multiply imputed datasets."""

__version__ = "0.1.0"

from .boosting import BoostFit, SquaredErrorLoss, predict, run_cwgb, run_miboost
from .crossval import CvConfig, CvCurve, miboost_cv
from .data import MissingDataset, CompletedDataset, load_csv
from .imputation import mice_apply, mice_fit

__all__ = [
    "BoostFit", "CompletedDataset", "CvConfig", "CvCurve", "MissingDataset", "SquaredErrorLoss",
    "load_csv", "mice_apply", "mice_fit", "miboost_cv", "predict", "run_cwgb", "run_miboost",
]
