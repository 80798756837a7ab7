"""THIN: exogenous tree-gated deep ensembles with a dispelling objective.

Thin wrapper over the C++ core (``thin._core``): f64 tensors, the soft
decision-tree gate, the training losses, run-identity digests, and the
finite-difference gradient battery. Heavy lifting (dataset generation,
training, evaluation, batteries) lives in the ``thin`` command-line tool.
"""

from thin._core import (  # noqa: F401
    GateTree,
    Tensor,
    __version__,
    add,
    config_identity,
    cross_entropy,
    dispel_loss,
    gradcheck_battery,
    matmul,
    mix_logits,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    run_digest,
    sigmoid,
)

__all__ = [
    "GateTree",
    "Tensor",
    "__version__",
    "add",
    "config_identity",
    "cross_entropy",
    "dispel_loss",
    "gradcheck_battery",
    "matmul",
    "mix_logits",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "run_digest",
    "sigmoid",
]
