"""Hot per-step kernels with compiled/pure backend selection.

The compiled extension (``_kernels``) is preferred; if it is missing the
pure-numpy module is used instead. ``BACKEND`` names the active one.
"""

from __future__ import annotations

from types import ModuleType

from . import _kernels_py

try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None

_active: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND = "compiled" if _compiled is not None else "python"


def backends() -> dict[str, ModuleType]:
    """All importable kernel backends, keyed by name."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


project_topk = _active.project_topk
gae = _active.gae
running_drawdown = _active.running_drawdown
step_accounting = _active.step_accounting
