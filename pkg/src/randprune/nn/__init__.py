from .gradcheck import gradient_check, relative_error
from .layers import (AddSkip, BatchNorm2d, ChannelGate, Conv2d, GlobalAvgPool, Layer, Linear, MaxPool2d,
                     Parameter, ReLU, ShapeError, layer_forward_backward)
from .losses import kl_rows, log_softmax, loss_cross_entropy, loss_distill, loss_kl, softmax
from .network import Network, make_layer, recalibrate_bn
from .optim import NonFiniteGradient, sgd_step, step_decay
