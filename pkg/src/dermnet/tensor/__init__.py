from .core import Tape, Tensor, ShapeError, apply_op, backward, current_tape
from .gradcheck import grad_check
from .ops import (
    activation,
    add,
    concat,
    concat_channels,
    conv2d,
    crop2d,
    dense,
    div,
    exp,
    global_avg_pool,
    log,
    log_softmax,
    max_pool2d,
    mean,
    mul,
    neg,
    pad2d,
    relu,
    reshape,
    sigmoid,
    slice_channels,
    softmax,
    sub,
    upsample_nearest2x,
)
from .params import GROUPS, Parameter, ParameterSet, he_normal
from .checkpoint import CheckpointError, CheckpointTensor, load_checkpoint, save_checkpoint

