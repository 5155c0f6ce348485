"""Large volatility matrix prediction with a projected tensor factor structure.

Daily integrated volatility matrices estimated from noisy high-frequency
prices are stacked into an order-3 tensor (asset x asset x day).  A Tucker
factor model with a sieve-projected time mode captures the low-rank common
dynamics, adaptive thresholding recovers the sparse idiosyncratic part, and
the fitted model extrapolates one day ahead conditional on low-frequency
covariates.  Simulation, baseline predictors, evaluation metrics, and a
minimum-variance portfolio backtest round out the pipeline.
"""

from voltensor.tensor_core import (
    TuckerFactors,
    VolTensor,
    fold,
    leading_left_singular_vectors,
    matricize,
    mode_product,
    slice_eigenvalues,
    tucker_reconstruct,
)

__all__ = [
    "TuckerFactors",
    "VolTensor",
    "fold",
    "leading_left_singular_vectors",
    "matricize",
    "mode_product",
    "slice_eigenvalues",
    "tucker_reconstruct",
]

__version__ = "0.1.0"
