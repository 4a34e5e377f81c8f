"""Adversarially-trained autoencoder defense: library and experiment CLI."""

from . import autodiff, attacks, data, evaluation, models, training
from .attacks import (AdversarialBatch, AttackConfig, cw_l2, fgsm,
                      latent_match, pgd_linf, pgd_with_recon_loss)
from .autodiff import (AdamState, GradientMap, Tensor, adam_step, backward,
                       forward, grad_check, no_grad, precision)
from .data import (CorruptionSpec, LabeledDataset, batches, corrupt,
                   digits_dataset, load_idx, synth_dataset, write_idx)
from .evaluation import (EvaluationReport, emit_report, eval_clean,
                         eval_corruption, eval_cw, eval_pgd, eval_transfer)
from .models import (Pipeline, build_autoencoder, build_classifier, freeze,
                     load_checkpoint, param_digest, save_checkpoint, stack)
from .training import (EnsembleSpec, TrainingConfig, aaa_loss, aaa_train,
                       adversarial_train, lr_on_plateau, train_natural)

__version__ = "0.1.0"
