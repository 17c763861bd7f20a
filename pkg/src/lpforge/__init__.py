"""lpforge: l^p-constrained single-step adversarial training with adaptive norm selection."""
from .numkernel import INF, DomainError, UnsupportedPrimitive, dual_exponent, lp_norm, primal_exponent

__version__ = "0.1.0"

__all__ = ["INF", "DomainError", "UnsupportedPrimitive", "dual_exponent", "lp_norm",
           "primal_exponent", "__version__"]
