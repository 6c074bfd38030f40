"""Minimal dense-array compute core: graphs, autodiff, rng, serialization."""

from .graph import (
    SQRT_GUARD_EPS,
    Graph,
    GraphError,
    ShapeMismatch,
    Var,
    assert_finite,
    backward,
    concat,
    forward_eval,
    l2_normalize,
    softmax,
)
from .gradcheck import grad_check
from .rng import SeededRng
from .serial import (
    SerializationError,
    config_digest,
    dumps_array,
    load_checkpoint,
    loads_array,
    read_array,
    save_checkpoint,
    write_array,
)

__all__ = [
    "SQRT_GUARD_EPS",
    "Graph",
    "GraphError",
    "ShapeMismatch",
    "Var",
    "assert_finite",
    "backward",
    "concat",
    "forward_eval",
    "l2_normalize",
    "softmax",
    "grad_check",
    "SeededRng",
    "SerializationError",
    "config_digest",
    "dumps_array",
    "load_checkpoint",
    "loads_array",
    "read_array",
    "save_checkpoint",
    "write_array",
]
