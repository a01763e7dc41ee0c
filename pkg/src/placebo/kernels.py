"""Backend selection for the fitting kernels.

The compiled extension is used when it was built; setting ``PLACEBO_PURE_PYTHON=1``
forces the numpy fallback.
"""

import os

BACKEND = "python"

if os.environ.get("PLACEBO_PURE_PYTHON", "") not in ("", "0"):
    from placebo._kernels_py import irls_logit, wls
else:
    try:
        from placebo._kernels import irls_logit, wls

        BACKEND = "cython"
    except ImportError:  # extension not built
        from placebo._kernels_py import irls_logit, wls

__all__ = ["BACKEND", "irls_logit", "wls"]
