"""Semi-supervised categorical GAN for affect recognition.

The package pairs a self-contained reverse-mode autodiff engine with the
GAN family built on it: a vanilla MLP pair and a convolutional pair whose
discriminator also predicts facial action units, valence/arousal, exclusive
classes or all of them jointly.  `CategoricalGan` and `VanillaGan` expose
the training loop through a scikit-learn estimator surface; the `catgan`
command line drives dataset building, training, checkpoint sweeps and
sample generation.
"""

from .estimators import CategoricalGan, VanillaGan, head_from_name
from .models import (GanModel, HeadVariant, LabelBatch, build_categorical,
                     build_vanilla, load_checkpoint, save_checkpoint)
from .tensor import Tensor, set_default_dtype
from .training import (ArrayDataset, TrainConfig, TrainingDiverged,
                       evaluate_checkpoints, train, update_target)

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset", "CategoricalGan", "GanModel", "HeadVariant",
    "LabelBatch", "Tensor", "TrainConfig", "TrainingDiverged", "VanillaGan",
    "build_categorical", "build_vanilla", "evaluate_checkpoints",
    "head_from_name", "load_checkpoint", "save_checkpoint",
    "set_default_dtype", "train", "update_target",
]
