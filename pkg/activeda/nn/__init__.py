from activeda.nn.grad import (
    GradientSet,
    OptimState,
    backward,
    clip_gradients,
    global_norm,
    grad_reverse,
    sgd_step,
)
from activeda.nn.net import (
    DANet,
    NetDims,
    NetParams,
    dump_checkpoint,
    forward_classifier,
    forward_discriminator,
    forward_features,
    load_checkpoint,
    make_net,
    predict_numpy,
)
