"""Scale simulation estimators for compositional count surveys."""
from ._accel import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
