"""Optional numba acceleration.

Set ``SCALESIM_NUMBA=0`` to force the pure-numpy kernels. When numba is not
importable the numpy path is used silently.
"""
import os

JIT_OPTIONS = {
    "nogil": True,
    "cache": True,
}


def _env_enabled():
    return os.environ.get("SCALESIM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


USE_NUMBA = HAS_NUMBA and _env_enabled()


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
