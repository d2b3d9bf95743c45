from .autodiff import (
    JacobianResult,
    PassCounter,
    finite_difference,
    input_jacobian,
    jacobian_l1,
    second_order_grad,
)
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .optim import AdamState, adam_step
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    div,
    exp,
    forward_op,
    getitem,
    grad,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    op_kinds,
    parameter,
    relu,
    reshape,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)
