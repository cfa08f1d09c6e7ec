"""Stochastic layer selection ensembles for segmentation uncertainty."""
from .net import (
    LayerBank,
    NetConfig,
    SelectionMask,
    StochasticSegNet,
    count_parameters,
    count_submodels,
    enumerate_selections,
    load_checkpoint,
    sample_selection,
    save_checkpoint,
)
from .evaluation import paired_t_test, pixel_rejection_curve, random_rejection_baseline, vanilla_ensemble_predict
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, pixel_uncertainty_loss, train, train_stage1, train_stage2
from .uncertainty import (
    PredictionSampleStack,
    UncertaintyMap,
    entropy_map,
    mc_predict,
    normalize_uncertainty,
    variance_map,
)

__version__ = "0.1.0"
