"""Effect estimators and the multiple-imputation combining rules."""

from .combine import BootstrapEstimate, CombinedEstimate, NU_CAP, rubin_combine
from .common import EmptyCellError, ReplicateError
from .msm import PositivityReport, WeightError, WeightSet, check_positivity, msm_estimate, msm_weights
from .naive import baseline_adjusted_estimate, naive_estimate
from .missing import impute_missing_outcomes
from .pencomp import pencomp_estimate
from .proposed import Completion, complete_panel, draw_monotone_survival, proposed_estimate
