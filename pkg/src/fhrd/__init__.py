"""Small-area estimation under the Fay-Herriot random dispersion model."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BootstrapError,
    ConvergenceError,
    DataValidationError,
    DomainError,
    FHRDError,
    NoRootError,
    NumericalError,
    QuadratureError,
    SingularDesignError,
)
from .estimation import FitOptions, FitResult, fit, fit_batch  # noqa: E402
from .model import AreaData, AreaRecord, ModelParams  # noqa: E402
from .prediction import BenchmarkWeights, QuadratureOptions, benchmark_cab, predict, predict_aeb  # noqa: E402
from .sampling import Design, RngSeed, generate_fhrd  # noqa: E402
from .uncertainty import MseReport, mse_aeb, mse_cab  # noqa: E402
