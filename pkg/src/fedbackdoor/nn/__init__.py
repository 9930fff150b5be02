from .model import (
    BN_EPS,
    BN_MOMENTUM,
    BatchNorm,
    BnStats,
    Conv2d,
    Dense,
    FlatVector,
    Flatten,
    ModelArch,
    ModelState,
    ReLU,
    ShapeError,
    accuracy,
    backprop,
    backward,
    cross_entropy,
    cross_entropy_grad,
    flatten,
    forward,
    get_bn_stats,
    init_state,
    mlp,
    num_params,
    predict,
    set_bn_stats,
    sgd_step,
    small_cnn,
    softmax,
    state_from_flat,
    train_step,
    unflatten,
)
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
