"""Backend selection for the training kernel.

The compiled extension is used when it imports; set ``OMBA_BACKEND=python``
to force the pure-Python fallback (``OMBA_BACKEND=compiled`` makes a missing
extension an error instead of a silent fallback).
"""

import logging
import os

from . import _kernel_py

log = logging.getLogger(__name__)

_choice = os.environ.get("OMBA_BACKEND", "auto").lower()
_compiled = None
if _choice != "python":
    try:
        from . import _kernel as _compiled
    except ImportError as exc:
        if _choice == "compiled":
            raise
        log.info("compiled kernel unavailable (%s); using pure-Python fallback", exc)

BACKENDS = {"python": _kernel_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get(name=None):
    """Kernel module by name; ``None`` means the import-time default."""
    name = name or BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
