"""Kernel backend selection.

The expression tape has a compiled evaluator (``_tape_cy``, built from Cython
at install time) and a pure-Python twin (``_tape_py``).  The compiled one is
preferred; set ``SWEEPCTRL_BACKEND=python`` to force the fallback, e.g. for
debugging or to run the benchmark comparison.  Both produce bit-identical
results.
"""

import os

_forced = os.environ.get("SWEEPCTRL_BACKEND", "").strip().lower()

if _forced == "python":
    from . import _tape_py as _impl
elif _forced == "cython":
    from . import _tape_cy as _impl  # raises if the extension is missing
else:
    try:
        from . import _tape_cy as _impl
    except ImportError:
        from . import _tape_py as _impl

NAME = _impl.NAME
evaluate = _impl.evaluate
penalty_rhs_jac = _impl.penalty_rhs_jac


def available_backends():
    names = []
    try:
        from . import _tape_cy  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    names.append("python")
    return names
