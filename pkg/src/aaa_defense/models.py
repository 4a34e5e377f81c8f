"""Classifier and autoencoder architectures, stacking, and checkpoints.

All models are built from the autodiff op set. Classifiers end in raw
logits; autoencoders end in a sigmoid so reconstructions live in [0,1].
The checkpoint format is a fixed little-endian binary layout (magic
"AAACKPT1") with an optional trailing JSON metadata block carrying build
arguments and training provenance.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ModelError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# -- layers ------------------------------------------------------------------


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Layer:
    def params(self):
        return []

    def param_names(self):
        return []


class Conv2d(Layer):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        self.weight = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)

    def params(self):
        return [self.weight, self.bias]

    def param_names(self):
        return ["weight", "bias"]


class ConvTranspose2d(Layer):
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, output_padding=0):
        self.stride, self.padding = stride, padding
        self.output_padding = output_padding
        self.weight = Tensor(_he_uniform(rng, (cin, cout, k, k), cin * k * k),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return ad.transpose_conv2d(x, self.weight, self.bias,
                                   stride=self.stride, padding=self.padding,
                                   output_padding=self.output_padding)

    def params(self):
        return [self.weight, self.bias]

    def param_names(self):
        return ["weight", "bias"]


class Dense(Layer):
    def __init__(self, rng, nin, nout):
        self.weight = Tensor(_he_uniform(rng, (nin, nout), nin),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(nout), requires_grad=True)

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def params(self):
        return [self.weight, self.bias]

    def param_names(self):
        return ["weight", "bias"]


class Activation(Layer):
    def __init__(self, op_kind):
        self.op_kind = op_kind

    def __call__(self, x):
        return ad.forward(self.op_kind, x)


# -- model -------------------------------------------------------------------


class Model:
    """An ordered parameterized computation with per-parameter trainability."""

    def __init__(self, arch_id, input_shape, output_shape):
        self.arch_id = arch_id
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)
        self.meta = {}
        self.layers = []

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in zip(layer.param_names(), layer.params()):
                out.append((f"layer{i}.{name}", p))
        return out

    def num_trainable(self):
        return sum(p.size for p in self.parameters() if p.requires_grad)


class Sequential(Model):
    def __init__(self, arch_id, input_shape, output_shape, layers):
        super().__init__(arch_id, input_shape, output_shape)
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SequentialAutoencoder(Sequential):
    """Encoder/decoder split at ``encoder_len`` layers; no skip connections."""

    def __init__(self, arch_id, input_shape, layers, encoder_len):
        super().__init__(arch_id, input_shape, input_shape, layers)
        self.encoder_len = encoder_len

    def encode(self, x):
        for layer in self.layers[:self.encoder_len]:
            x = layer(x)
        return ad.flatten(x)


class UNetAutoencoder(Model):
    """2-level encoder/decoder with one skip concatenation per level."""

    def __init__(self, rng, input_shape):
        super().__init__("unet-ae", input_shape, input_shape)
        c = input_shape[0]
        self.enc1 = Conv2d(rng, c, 16, 3, stride=1, padding=1)
        self.enc2 = Conv2d(rng, 16, 32, 3, stride=2, padding=1)
        self.bottleneck = Conv2d(rng, 32, 64, 3, stride=2, padding=1)
        self.up2 = ConvTranspose2d(rng, 64, 32, 3, stride=2, padding=1,
                                   output_padding=1)
        self.dec2 = Conv2d(rng, 64, 32, 3, stride=1, padding=1)
        self.up1 = ConvTranspose2d(rng, 32, 16, 3, stride=2, padding=1,
                                   output_padding=1)
        self.dec1 = Conv2d(rng, 32, c, 3, stride=1, padding=1)
        self.layers = [self.enc1, self.enc2, self.bottleneck, self.up2,
                       self.dec2, self.up1, self.dec1]

    def forward(self, x):
        e1 = ad.relu(self.enc1(x))
        e2 = ad.relu(self.enc2(e1))
        b = ad.relu(self.bottleneck(e2))
        u2 = ad.relu(self.up2(b))
        d2 = ad.relu(self.dec2(ad.concat_channels(u2, e2)))
        u1 = ad.relu(self.up1(d2))
        return ad.sigmoid(self.dec1(ad.concat_channels(u1, e1)))

    def encode(self, x):
        e1 = ad.relu(self.enc1(x))
        e2 = ad.relu(self.enc2(e1))
        return ad.flatten(ad.relu(self.bottleneck(e2)))


class ResNetTiny(Model):
    """Reduced residual classifier: stem, two residual blocks, pool, dense."""

    def __init__(self, rng, input_shape, num_classes):
        super().__init__("resnet-tiny", input_shape, (num_classes,))
        c, h, w = input_shape
        self.stem = Conv2d(rng, c, 16, 3, stride=1, padding=1)
        self.block1 = [Conv2d(rng, 16, 16, 3, stride=1, padding=1),
                       Conv2d(rng, 16, 16, 3, stride=1, padding=1)]
        self.block2 = [Conv2d(rng, 16, 16, 3, stride=1, padding=1),
                       Conv2d(rng, 16, 16, 3, stride=1, padding=1)]
        self.head = Dense(rng, 16 * (h // 4) * (w // 4), num_classes)
        self.layers = [self.stem, *self.block1, *self.block2, self.head]

    def forward(self, x):
        h = ad.relu(self.stem(x))
        for block in (self.block1, self.block2):
            r = ad.relu(block[0](h))
            r = block[1](r)
            h = ad.max_pool2x2(ad.relu(ad.add(h, r)))
        return self.head(ad.flatten(h))


CLASSIFIER_ARCHS = ("madry-mnist", "cnn-small", "mlp", "resnet-tiny",
                    "vgg-tiny", "dnn-small")
AUTOENCODER_ARCHS = ("conv-ae", "unet-ae")


def _check_conv_input(arch_id, input_shape, div):
    if len(input_shape) != 3:
        raise ModelError(f"{arch_id}: expected a [C,H,W] input shape, "
                         f"got {input_shape}")
    _, h, w = input_shape
    if h % div or w % div:
        raise ModelError(f"{arch_id}: spatial dims must be divisible by "
                         f"{div}, got {(h, w)}")


def build_classifier(arch_id, num_classes, input_shape, seed=0):
    """Construct an initialized trainable classifier with logit output."""
    input_shape = tuple(input_shape)
    rng = np.random.default_rng([seed, 0xC1A55])
    if arch_id == "madry-mnist":
        _check_conv_input(arch_id, input_shape, 4)
        c, h, w = input_shape
        layers = [
            Conv2d(rng, c, 32, 5, padding=2), Activation("relu"),
            Activation("max_pool2x2"),
            Conv2d(rng, 32, 64, 5, padding=2), Activation("relu"),
            Activation("max_pool2x2"),
            Activation("flatten"),
            Dense(rng, 64 * (h // 4) * (w // 4), 1024), Activation("relu"),
            Dense(rng, 1024, num_classes),
        ]
        model = Sequential(arch_id, input_shape, (num_classes,), layers)
    elif arch_id == "cnn-small":
        _check_conv_input(arch_id, input_shape, 2)
        c, h, w = input_shape
        layers = [
            Conv2d(rng, c, 16, 3, padding=1), Activation("relu"),
            Activation("max_pool2x2"),
            Activation("flatten"),
            Dense(rng, 16 * (h // 2) * (w // 2), 128), Activation("relu"),
            Dense(rng, 128, num_classes),
        ]
        model = Sequential(arch_id, input_shape, (num_classes,), layers)
    elif arch_id == "mlp":
        d = int(np.prod(input_shape))
        layers = [
            Activation("flatten"),
            Dense(rng, d, 512), Activation("relu"),
            Dense(rng, 512, 256), Activation("relu"),
            Dense(rng, 256, num_classes),
        ]
        model = Sequential(arch_id, input_shape, (num_classes,), layers)
    elif arch_id == "resnet-tiny":
        _check_conv_input(arch_id, input_shape, 4)
        model = ResNetTiny(rng, input_shape, num_classes)
    elif arch_id == "vgg-tiny":
        _check_conv_input(arch_id, input_shape, 4)
        c, h, w = input_shape
        layers = [
            Conv2d(rng, c, 16, 3, padding=1), Activation("relu"),
            Conv2d(rng, 16, 16, 3, padding=1), Activation("relu"),
            Activation("max_pool2x2"),
            Conv2d(rng, 16, 32, 3, padding=1), Activation("relu"),
            Conv2d(rng, 32, 32, 3, padding=1), Activation("relu"),
            Activation("max_pool2x2"),
            Activation("flatten"),
            Dense(rng, 32 * (h // 4) * (w // 4), 128), Activation("relu"),
            Dense(rng, 128, num_classes),
        ]
        model = Sequential(arch_id, input_shape, (num_classes,), layers)
    elif arch_id == "dnn-small":
        _check_conv_input(arch_id, input_shape, 4)
        c, h, w = input_shape
        layers = [
            Conv2d(rng, c, 16, 3, padding=1), Activation("relu"),
            Activation("max_pool2x2"),
            Conv2d(rng, 16, 32, 3, padding=1), Activation("relu"),
            Activation("max_pool2x2"),
            Conv2d(rng, 32, 32, 3, padding=1), Activation("relu"),
            Conv2d(rng, 32, 32, 3, padding=1), Activation("relu"),
            Activation("flatten"),
            Dense(rng, 32 * (h // 4) * (w // 4), num_classes),
        ]
        model = Sequential(arch_id, input_shape, (num_classes,), layers)
    else:
        raise ModelError(f"unknown classifier arch_id {arch_id!r}")
    model.meta["num_classes"] = num_classes
    model.meta["seed"] = seed
    return model


def build_autoencoder(kind, input_shape, seed=0):
    """Construct an autoencoder whose output shape equals its input shape."""
    input_shape = tuple(input_shape)
    rng = np.random.default_rng([seed, 0xAE])
    if kind == "conv-ae":
        _check_conv_input(kind, input_shape, 4)
        c = input_shape[0]
        layers = [
            Conv2d(rng, c, 32, 3, stride=2, padding=1), Activation("relu"),
            Conv2d(rng, 32, 64, 3, stride=2, padding=1), Activation("relu"),
            ConvTranspose2d(rng, 64, 32, 3, stride=2, padding=1,
                            output_padding=1), Activation("relu"),
            ConvTranspose2d(rng, 32, c, 3, stride=2, padding=1,
                            output_padding=1), Activation("sigmoid"),
        ]
        model = SequentialAutoencoder(kind, input_shape, layers, encoder_len=4)
    elif kind == "unet-ae":
        _check_conv_input(kind, input_shape, 4)
        model = UNetAutoencoder(rng, input_shape)
    else:
        raise ModelError(f"unknown autoencoder kind {kind!r}")
    model.meta["seed"] = seed
    return model


def freeze(model):
    """Mark every parameter non-trainable; forward behavior is unchanged."""
    for p in model.parameters():
        p.requires_grad = False
    return model


def is_frozen(model):
    return all(not p.requires_grad for p in model.parameters())


# -- pipeline ----------------------------------------------------------------


class Pipeline:
    """Stacked defense: classifier applied to the clamped AE reconstruction."""

    def __init__(self, autoencoder, classifier):
        if autoencoder.output_shape != autoencoder.input_shape:
            raise ModelError("autoencoder must preserve its input shape")
        if autoencoder.output_shape != classifier.input_shape:
            raise ModelError(
                f"autoencoder output {autoencoder.output_shape} does not "
                f"match classifier input {classifier.input_shape}")
        self.autoencoder = autoencoder
        self.classifier = classifier
        self.input_shape = autoencoder.input_shape
        self.output_shape = classifier.output_shape

    def forward(self, x):
        return self.classifier(ad.clamp01(self.autoencoder(x)))

    def __call__(self, x):
        return self.forward(x)

    def parameters(self):
        return self.autoencoder.parameters() + self.classifier.parameters()


def stack(autoencoder, classifier):
    return Pipeline(autoencoder, classifier)


# -- prediction helpers ------------------------------------------------------


def forward_numpy(model, images, batch_size=256):
    """Forward a [N,...] numpy batch without recording; returns logits."""
    outs = []
    with ad.no_grad():
        for i in range(0, images.shape[0], batch_size):
            outs.append(model(Tensor(images[i:i + batch_size])).data)
    return np.concatenate(outs, axis=0)


def predict(model, images, batch_size=256):
    """Argmax class predictions; ties break to the lowest class index."""
    return np.argmax(forward_numpy(model, images, batch_size), axis=1)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"AAACKPT1"
CHECKPOINT_VERSION = 1


def _checkpoint_payload(model):
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    arch = model.arch_id.encode()
    out.append(struct.pack("<I", len(arch)))
    out.append(arch)
    named = model.named_parameters()
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(np.ascontiguousarray(
            p.data, dtype="<f4").tobytes())
    return b"".join(out)


def param_digest(model):
    """SHA-256 over arch id and fp32 parameter records."""
    return hashlib.sha256(_checkpoint_payload(model)).hexdigest()


def _json_scalar(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"checkpoint metadata value of type "
                    f"{type(o).__name__} is not JSON serializable")


def save_checkpoint(model, path):
    """Write the model atomically; parameters are stored as fp32."""
    payload = _checkpoint_payload(model)
    meta = dict(model.meta)
    meta["input_shape"] = list(model.input_shape)
    meta["frozen"] = is_frozen(model)
    mb = json.dumps(meta, sort_keys=True, default=_json_scalar).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", len(mb)))
        f.write(mb)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf, self.off = buf, 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def remaining(self):
        return len(self.buf) - self.off


_DEFAULT_INPUT_SHAPES = {
    "madry-mnist": (1, 28, 28), "cnn-small": (1, 28, 28), "mlp": (1, 28, 28),
    "resnet-tiny": (3, 32, 32), "vgg-tiny": (3, 32, 32),
    "dnn-small": (3, 32, 32), "conv-ae": (1, 28, 28), "unet-ae": (3, 32, 32),
}


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; bit-identical parameter round trip."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    arch_id = r.take(r.u32()).decode()
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        vals = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = vals
    meta = {}
    if r.remaining() >= 4:
        meta = json.loads(r.take(r.u32()).decode())

    input_shape = tuple(meta.get("input_shape",
                                 _DEFAULT_INPUT_SHAPES.get(arch_id, ())))
    if arch_id in AUTOENCODER_ARCHS:
        model = build_autoencoder(arch_id, input_shape,
                                  seed=meta.get("seed", 0))
    elif arch_id in CLASSIFIER_ARCHS:
        num_classes = meta.get("num_classes")
        if num_classes is None:
            last = [t for n, t in sorted(tensors.items()) if n.endswith("bias")]
            num_classes = int(last[-1].shape[0]) if last else 10
        model = build_classifier(arch_id, num_classes, input_shape,
                                 seed=meta.get("seed", 0))
    else:
        raise CheckpointError(f"{path}: unknown architecture id {arch_id!r}")

    named = dict(model.named_parameters())
    if set(named) != set(tensors):
        raise CheckpointError(f"{path}: parameter records do not match "
                              f"architecture {arch_id!r}")
    for name, vals in tensors.items():
        p = named[name]
        if p.data.shape != vals.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: {vals.shape} vs "
                f"{p.data.shape}")
        p.data = vals.astype(p.data.dtype)
    if meta.get("frozen"):
        freeze(model)
    model.meta.update({k: v for k, v in meta.items()
                       if k not in ("input_shape", "frozen")})
    return model
