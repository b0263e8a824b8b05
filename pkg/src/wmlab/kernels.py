"""Backend selection for the hot kernels.

The compiled ``wmlab._core`` extension is used when it imports; otherwise the
numpy implementation in ``wmlab._core_py`` is used. Set ``WMLAB_PURE_PYTHON=1``
to force the fallback. Both backends return identical results.
"""
import os

from wmlab import _core_py

BACKEND = "python"
_impl = _core_py

if not os.environ.get("WMLAB_PURE_PYTHON"):
    try:
        from wmlab import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _core_py

feistel = _impl.feistel
generate = _impl.generate
exp_cost = _impl.exp_cost
exp_edit_cost = _impl.exp_edit_cost

# scalar and vectorised helpers are cheap enough to share
mix64 = _core_py.mix64
prf = _core_py.prf
unit = _core_py.unit
context_hash = _core_py.context_hash
green_seed = _core_py.green_seed
class_token = _core_py.class_token
sirlite_signs = _core_py.sirlite_signs
xi_values = _core_py.xi_values
pack_context = _core_py.pack_context
MASK64 = _core_py.MASK64

MODE_NONE = _core_py.MODE_NONE
MODE_GREEN = _core_py.MODE_GREEN
MODE_SIRLITE = _core_py.MODE_SIRLITE
MODE_EXP = _core_py.MODE_EXP
SAMPLER_MULTINOMIAL = _core_py.SAMPLER_MULTINOMIAL
SAMPLER_GREEDY = _core_py.SAMPLER_GREEDY


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed (order-sensitive)."""
    h = 0x5EED5EED5EED5EED
    for p in parts:
        h = mix64(h ^ (int(p) & MASK64))
    return h


def backends():
    """Return the available backend modules by name."""
    found = {"python": _core_py}
    try:
        from wmlab import _core

        found["cython"] = _core
    except ImportError:  # pragma: no cover
        pass
    return found

SALT_GREEN = _core_py.SALT_GREEN
SALT_SIR = _core_py.SALT_SIR
SALT_CLASS = _core_py.SALT_CLASS
