"""Kernel backend selection.

The compiled ``_core`` extension is used when importable; otherwise (or when
``MFEIG_PURE_PYTHON=1`` is set) the numpy implementations in ``_pycore`` are
used. Both backends expose the same functions.
"""

import os

from . import _pycore

BACKEND = "python"
_impl = _pycore
if os.environ.get("MFEIG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pycore

philox4x32 = _impl.philox4x32
philox_uniforms = _impl.philox_uniforms
philox_normals = _impl.philox_normals
prior_draws = _impl.prior_draws
monomial_features = _impl.monomial_features
nested_log_evidence = _impl.nested_log_evidence
nested_log_evidence_monomial = _impl.nested_log_evidence_monomial
relaxed_minimize = _impl.relaxed_minimize

__all__ = [
    "BACKEND",
    "philox4x32",
    "philox_uniforms",
    "philox_normals",
    "prior_draws",
    "monomial_features",
    "nested_log_evidence",
    "nested_log_evidence_monomial",
    "relaxed_minimize",
]
