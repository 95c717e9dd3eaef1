"""Edge detection by collaborative learning of a recurrent and a non-recurrent network.

The trained artifact is a single non-recurrent network whose parameters are
the weighted collapse of several sampled networks, so inference costs one
forward pass.
"""

from .data import AnnotatedImage, DatasetSplit, load_bsds_style, split_train_val, synth_generate
from .ensemble import collapse_params, confidence_fuse, momentum_update, solve_weights
from .evaluate import EvalConfig, EvalReport, evaluate_model, nms_thin, ods_ois
from .nets import NetConfig, forward, init_params, net_config, param_count, predict
from .params import ParameterVector, load_parameters, save_parameters
from .train import TrainConfig, efficient_config, toy_config, train_collaborative, train_efficient

__version__ = "0.1.0"
