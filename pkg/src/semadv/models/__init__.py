"""Synthetic corpus generation plus the trainable denoisers and classifiers."""

from .corpus import (ShapeCorpusSpec, ShapeDataset, gen_corpus, render_shape,
                     DEFAULT_LEAVES, DEFAULT_FAMILIES)
from .nets import DenoiserNet, ClassifierNet, MlpDenoiserNet, time_features, param_count
from .train import (Adam, train_denoiser, train_classifier, train_mlp_denoiser,
                    train_classifier_images, classifier_accuracy, classify)
from .checkpoint import save_model, load_model, checkpoint_digest
