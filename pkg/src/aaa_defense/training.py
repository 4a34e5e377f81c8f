"""Training regimes: natural, adversarial (min-max), and autoencoder
adversarial training over an ensemble of frozen native classifiers.

The autoencoder regime generates each batch's adversarial examples with
PGD against the full stacked pipeline (the adaptive adversary), then
updates only the autoencoder parameters. Loss variants:

  Lx   mean cross-entropy of the classifier on reconstructed adversarials
  Lm   mean per-example squared reconstruction error against the naturals
  Lxm  Lx + lambda * Lm
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as mm
from .attacks import AttackConfig, pgd_linf
from .autodiff import Tensor
from .data import batches

LOSS_KINDS = ("natural", "Lx", "Lm", "Lxm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.001
    loss_kind: str = "natural"
    lam: object = "auto"          # float, or "auto" to balance magnitudes
    attack: AttackConfig | None = None
    attack_warmup_epochs: int = 0  # linear epsilon ramp over the first epochs
    patience: int = 5
    decay_factor: float = 0.1
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise TrainingError(f"unknown loss kind {self.loss_kind!r}")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be at least 1")
        if self.patience < 1:
            raise TrainingError("patience must be at least 1")
        if isinstance(self.lam, (int, float)) and self.lam < 0:
            raise TrainingError("lambda must be non-negative")


@dataclass
class EnsembleSpec:
    members: list
    policy: str = "uniform-per-batch"

    def __post_init__(self):
        if not self.members:
            raise TrainingError("ensemble must have at least one member")
        shapes = {(m.input_shape, m.output_shape) for m in self.members}
        if len(shapes) > 1:
            raise TrainingError("ensemble members disagree on shapes")
        if self.policy != "uniform-per-batch":
            raise TrainingError(f"unknown selection policy {self.policy!r}")


def lr_on_plateau(history, current_lr, patience, factor):
    """Decay the learning rate when the best validation loss is ``patience``
    epochs old. ``history`` is the per-epoch validation-loss list so far."""
    if patience < 1 or not 0 < factor < 1:
        raise TrainingError("need patience >= 1 and 0 < factor < 1")
    if len(history) <= patience:
        return current_lr
    best_idx = int(np.argmin(history))
    if len(history) - 1 - best_idx >= patience:
        return current_lr * factor
    return current_lr


def _attack_seed(base_seed, epoch, batch_idx):
    return int(np.random.SeedSequence(
        [base_seed, epoch, batch_idx, 0xA77]).generate_state(1)[0])


def _epoch_attack(cfg, epoch, batch_idx):
    """Per-batch attack config; epsilon ramps linearly over warmup epochs so
    short-budget min-max training does not stall at the uniform predictor."""
    acfg = dataclasses.replace(cfg.attack,
                               seed=_attack_seed(cfg.seed, epoch, batch_idx))
    if cfg.attack_warmup_epochs > 0 and epoch < cfg.attack_warmup_epochs:
        scale = (epoch + 1) / (cfg.attack_warmup_epochs + 1)
        acfg = dataclasses.replace(acfg, epsilon=cfg.attack.epsilon * scale)
    return acfg


def _split_train_val(data, val_fraction):
    # fixed split: the last fraction of the set, before any shuffling
    n = len(data)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        return data, None
    return (data.subset(np.arange(n - n_val), split="train"),
            data.subset(np.arange(n - n_val, n), split="val"))


def _clean_metrics(model, dataset, batch_size=256):
    logits = mm.forward_numpy(model, dataset.images, batch_size)
    losses = ad.cross_entropy_per_example(logits, dataset.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return float(losses.mean()), 100.0 * acc


def _check_finite(loss_val, context):
    if not np.isfinite(loss_val):
        raise TrainingError(f"training diverged: non-finite loss in {context}")


def _train_classifier(model, data, cfg, adversarial):
    if not any(p.requires_grad for p in model.parameters()):
        raise TrainingError("model has no trainable parameters")
    if len(data) == 0:
        raise TrainingError("empty dataset")
    if adversarial and cfg.attack is None:
        raise TrainingError("adversarial training needs a train-time attack")
    train, val = _split_train_val(data, cfg.val_fraction)
    params = model.parameters()
    state = ad.AdamState(lr=cfg.lr)
    history = []
    val_losses = []
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        state.lr = lr
        ep_loss, ep_correct, seen = 0.0, 0, 0
        for i, (xb, yb) in enumerate(batches(train, cfg.batch_size,
                                             shuffle=True,
                                             seed=(cfg.seed, epoch))):
            if adversarial:
                xb = pgd_linf(model, xb, yb,
                              _epoch_attack(cfg, epoch, i)).adversarial
            x = Tensor(xb)
            logits = model(x)
            loss = ad.softmax_cross_entropy(logits, yb)
            _check_finite(loss.item(), f"epoch {epoch} batch {i}")
            ep_loss += loss.item() * len(yb)
            ep_correct += int((np.argmax(logits.data, 1) == yb).sum())
            seen += len(yb)
            grads = ad.backward(loss)
            ad.adam_step(params, grads, state)
        record = {"epoch": epoch, "lr": lr,
                  "train_loss": ep_loss / seen,
                  "train_acc": 100.0 * ep_correct / seen}
        if val is not None:
            vl, va = _clean_metrics(model, val)
            record["val_loss"], record["val_acc"] = vl, va
            val_losses.append(vl)
            lr = lr_on_plateau(val_losses, lr, cfg.patience, cfg.decay_factor)
        history.append(record)
    return model, history


def train_natural(model, data, cfg):
    """Minimize mean cross-entropy by Adam over shuffled batches."""
    if cfg.loss_kind != "natural":
        raise TrainingError("train_natural requires loss_kind == 'natural'")
    return _train_classifier(model, data, cfg, adversarial=False)


def adversarial_train(model, data, cfg):
    """Each batch is replaced by PGD adversarial examples against the
    current model before the cross-entropy update (outer minimization)."""
    return _train_classifier(model, data, cfg, adversarial=True)


def aaa_loss(batch, adv_images, ae, native_clf, lam, kind):
    """Scalar training loss for the stacked autoencoder defense.

    ``batch`` is the natural (images, labels) pair, ``adv_images`` the
    matching adversarial images from the pipeline's inner maximization.
    """
    x, y = batch
    adv = adv_images.adversarial if hasattr(adv_images, "adversarial") \
        else adv_images
    if adv.shape != x.shape:
        raise TrainingError(
            f"adversarial batch shape {adv.shape} != natural {x.shape}")
    recon = ae(Tensor(adv))
    if kind == "Lm":
        diff = ad.sub(recon, Tensor(x))
        return ad.mean(ad.sum_along(ad.mul(diff, diff), axis=(1, 2, 3)))
    j = ad.softmax_cross_entropy(native_clf(ad.clamp01(recon)), y)
    if kind == "Lx":
        return j
    if kind == "Lxm":
        diff = ad.sub(recon, Tensor(x))
        lm = ad.mean(ad.sum_along(ad.mul(diff, diff), axis=(1, 2, 3)))
        return ad.add(j, ad.mul(lm, float(lam)))
    raise TrainingError(f"aaa_loss: unsupported kind {kind!r}")


def aaa_train(ae, ensemble, data, cfg):
    """Adversarially train the autoencoder against an ensemble of frozen
    native classifiers; classifier parameters are bit-identical at exit."""
    if isinstance(ensemble, list):
        ensemble = EnsembleSpec(ensemble)
    for m in ensemble.members:
        if not mm.is_frozen(m):
            raise TrainingError("every ensemble member must be frozen")
    if not any(p.requires_grad for p in ae.parameters()):
        raise TrainingError("autoencoder has no trainable parameters")
    if cfg.attack is None:
        raise TrainingError("aaa_train needs a train-time attack config")
    if cfg.loss_kind not in ("Lx", "Lm", "Lxm"):
        raise TrainingError("aaa_train needs loss_kind in {Lx, Lm, Lxm}")
    if len(data) == 0:
        raise TrainingError("empty dataset")

    train, val = _split_train_val(data, cfg.val_fraction)
    params = ae.parameters()
    state = ad.AdamState(lr=cfg.lr)
    pipelines = [mm.stack(ae, m) for m in ensemble.members]
    auto_lam = cfg.lam == "auto" and cfg.loss_kind == "Lxm"
    lam = 1.0 if auto_lam else (float(cfg.lam) if cfg.loss_kind == "Lxm"
                                else 0.0)
    j_sum, m_sum, n_obs = 0.0, 0.0, 0
    history, val_losses = [], []
    lr = cfg.lr
    for epoch in range(cfg.epochs):
        state.lr = lr
        ep_loss, seen = 0.0, 0
        for i, (xb, yb) in enumerate(batches(train, cfg.batch_size,
                                             shuffle=True,
                                             seed=(cfg.seed, epoch))):
            pick = int(np.random.default_rng(
                [cfg.seed, epoch, i, 0xE5]).integers(len(ensemble.members)))
            pipeline = pipelines[pick]
            adv = pgd_linf(pipeline, xb, yb,
                           _epoch_attack(cfg, epoch, i)).adversarial
            if auto_lam and epoch == 0:
                # balance the two loss magnitudes on first-epoch averages
                with ad.no_grad():
                    recon = ad.clamp01(ae(Tensor(adv)))
                    jv = float(ad.cross_entropy_per_example(
                        pipeline.classifier(recon).data, yb).mean())
                    mv = float(((recon.data - xb) ** 2)
                               .reshape(len(yb), -1).sum(axis=1).mean())
                j_sum, m_sum, n_obs = j_sum + jv, m_sum + mv, n_obs + 1
                lam = float(j_sum / max(m_sum, 1e-12))
            loss = aaa_loss((xb, yb), adv, ae, pipeline.classifier,
                            lam, cfg.loss_kind)
            _check_finite(loss.item(), f"epoch {epoch} batch {i}")
            ep_loss += loss.item() * len(yb)
            seen += len(yb)
            grads = ad.backward(loss)
            ad.adam_step(params, grads, state)
        record = {"epoch": epoch, "lr": lr, "lambda": lam,
                  "train_loss": ep_loss / seen}
        if val is not None:
            # plateau signal: the same loss on clean validation inputs
            vl = 0.0
            for xb, yb in batches(val, cfg.batch_size):
                with ad.no_grad():
                    vloss = aaa_loss((xb, yb), xb, ae, pipelines[0].classifier,
                                     lam, cfg.loss_kind)
                vl += vloss.item() * len(yb)
            vl /= len(val)
            record["val_loss"] = vl
            val_losses.append(vl)
            lr = lr_on_plateau(val_losses, lr, cfg.patience, cfg.decay_factor)
        history.append(record)
    ae.meta["lambda"] = lam
    ae.meta["loss_kind"] = cfg.loss_kind
    ae.meta["ensemble_digests"] = [mm.param_digest(m)
                                   for m in ensemble.members]
    return ae, history
