"""Multi-output Bayesian quadrature."""
from mobq.core import Dataset, Design, Rng, UniformBox, UniformSphere
from mobq.kernels import LMC, Matern, ProcessConvolution, Separable, SphereSobolev32, SquaredExponential, Sum, WhiteNoise
from mobq.posterior import BQModel, BQPosterior, fit, integral_posterior, worst_case_error

__version__ = "0.1.0"

__all__ = [
    "BQModel", "BQPosterior", "Dataset", "Design", "LMC", "Matern", "ProcessConvolution", "Rng", "Separable",
    "SphereSobolev32", "SquaredExponential", "Sum", "UniformBox", "UniformSphere", "fit", "integral_posterior",
    "worst_case_error", "WhiteNoise",
]
