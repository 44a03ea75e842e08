"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when the
extension is not built or ``OWDISC_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""

import os

BACKEND = "python"

if os.environ.get("OWDISC_PURE_PYTHON", "0") in ("", "0"):
    try:
        from owdisc._ckernels import (  # noqa: F401
            accumulate,
            assign_nearest,
            minibatch_update,
            nms_keep,
        )

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from owdisc._pykernels import (  # noqa: F401
        accumulate,
        assign_nearest,
        minibatch_update,
        nms_keep,
    )

__all__ = ["BACKEND", "accumulate", "assign_nearest", "minibatch_update", "nms_keep"]
