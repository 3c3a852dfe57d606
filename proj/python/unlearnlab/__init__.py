"""Desk-scale laboratory for studying faithful vs. superficial unlearning.

The heavy lifting lives in the C++ extension; this package re-exports the
pipeline commands and score arithmetic.
"""

from unlearnlab._core import (
    ConfigError,
    ConvergenceError,
    NumericError,
    __version__,
    config_keys,
    evaluate,
    generate,
    ma_from,
    score_from,
    sweep,
    train,
    unlearn_eval,
)

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "NumericError",
    "__version__",
    "config_keys",
    "evaluate",
    "generate",
    "ma_from",
    "score_from",
    "sweep",
    "train",
    "unlearn_eval",
]
