"""Encoder / up-sampling decoder / per-pixel classifier segmentation net.

Data flows encoder -> decoder -> classifier.  ``embed`` returns the decoder
output (the alignment locus), ``classify`` maps embeddings to per-pixel class
probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .container import read_container, write_container, ContainerError
from .numerics import ContractViolation, RngStream, Tensor


class ShapeError(ContractViolation):
    pass


@dataclass
class ModelConfig:
    input_channels: int = 3
    width: int = 64
    height: int = 64
    num_classes: int = 5
    embed_dim: int = 16
    encoder_channels: list = field(default_factory=lambda: [16, 32])
    downsample_factor: int = 4
    skip_connections: bool = False

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2")
        if self.embed_dim < 2:
            raise ContractViolation("embed_dim must be >= 2")
        if self.downsample_factor != 2 ** len(self.encoder_channels):
            raise ContractViolation(
                f"downsample_factor {self.downsample_factor} does not match "
                f"{len(self.encoder_channels)} stride-2 encoder stages")
        if self.width % self.downsample_factor or self.height % self.downsample_factor:
            raise ContractViolation("width and height must be divisible by downsample_factor")

    def to_dict(self):
        return asdict(self)


class SegmentationModel:
    """phi = classifier(decoder(encoder(x))) with all parameters in ``params``.

    Parameter layout (channels-last convs, weights ``kh x kw x C_in x C_out``):

    * ``enc{i}.w/.b``  - 3x3 stride-2 convs, ReLU after each
    * ``dec{i}.w/.b``  - nearest x2 upsample then 3x3 conv; ReLU on all but the last
    * ``cls.w/.b``     - 1x1 classifier, ``embed_dim x num_classes``
    """

    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else self._init_params(RngStream(seed, "model-init"))
        for p in self.params.values():
            p.requires_grad = True

    def _layer_shapes(self):
        cfg = self.config
        shapes = {}
        cin = cfg.input_channels
        for i, c in enumerate(cfg.encoder_channels):
            shapes[f"enc{i}.w"] = (3, 3, cin, c)
            shapes[f"enc{i}.b"] = (c,)
            cin = c
        # decoder mirrors the encoder back up to full resolution; with skip
        # connections each stage also sees the encoder map (or, last, the
        # input image) at its output resolution
        outs = list(reversed(cfg.encoder_channels[:-1])) + [cfg.embed_dim]
        skips = list(reversed([cfg.input_channels] + cfg.encoder_channels[:-1]))
        for i, c in enumerate(outs):
            if cfg.skip_connections:
                cin += skips[i]
            shapes[f"dec{i}.w"] = (3, 3, cin, c)
            shapes[f"dec{i}.b"] = (c,)
            cin = c
        shapes["cls.w"] = (cfg.embed_dim, cfg.num_classes)
        shapes["cls.b"] = (cfg.num_classes,)
        return shapes

    def _init_params(self, rng):
        params = {}
        for name, shape in self._layer_shapes().items():
            if name.endswith(".b"):
                params[name] = Tensor(np.zeros(shape))
            else:
                fan_in = int(np.prod(shape[:-1]))
                params[name] = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        return params

    def parameters(self, include_classifier=True):
        names = self.param_names()
        if not include_classifier:
            names = [n for n in names if not n.startswith("cls.")]
        return [self.params[n] for n in names]

    def param_names(self):
        return list(self._layer_shapes())

    def copy(self):
        return SegmentationModel(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    # -- forward -------------------------------------------------------------------
    def _check_images(self, images):
        cfg = self.config
        expected = (cfg.height, cfg.width, cfg.input_channels)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape B x {expected}, got {tuple(images.shape)}")

    def embed(self, images):
        """Per-pixel embeddings ``B x H x W x embed_dim`` as a taped Tensor."""
        x = nx.as_tensor(images)
        self._check_images(x)
        p = self.params
        n_enc = len(self.config.encoder_channels)
        feats = [x]
        for i in range(n_enc):
            x = nx.relu(nx.conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2, padding=1))
            feats.append(x)
        for i in range(n_enc):
            x = nx.upsample_nearest(x, 2)
            if self.config.skip_connections:
                x = nx.concat([x, feats[n_enc - 1 - i]], axis=-1)
            x = nx.conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1, padding=1)
            if i < n_enc - 1:
                x = nx.relu(x)
        return x

    def logits(self, embeddings):
        z = nx.as_tensor(embeddings)
        if z.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"embedding dim {z.shape[-1]} != {self.config.embed_dim}")
        return nx.pixel_linear(z, self.params["cls.w"], self.params["cls.b"])

    def classify(self, embeddings):
        """Per-pixel class probabilities (softmax over the last axis)."""
        return nx.softmax(self.logits(embeddings), axis=-1)

    def forward(self, images):
        return self.classify(self.embed(images))

    __call__ = forward

    def predict(self, images, batch_size=32):
        """Argmax labels and max probabilities, evaluated without keeping a tape."""
        labels, conf = [], []
        for s in range(0, len(images), batch_size):
            logits = self.logits(Tensor(self.embed(images[s : s + batch_size]).data)).data
            probs = nx.softmax(Tensor(logits)).data
            labels.append(probs.argmax(axis=-1))
            conf.append(probs.max(axis=-1))
        return np.concatenate(labels).astype(np.int64), np.concatenate(conf)

    def embed_array(self, images, batch_size=32):
        return np.concatenate([self.embed(images[s : s + batch_size]).data
                               for s in range(0, len(images), batch_size)])


def embed(model, images):
    return model.embed(images)


def classify(model, embeddings):
    return model.classify(embeddings)


# -- checkpoints -----------------------------------------------------------------------

MODEL_KIND = "sfsmodel"


def save_checkpoint(model, path, gmm=None, extra=None):
    """Write ``model`` (and optionally a fitted GMM) to a ``.sfsmodel`` file."""
    arrays = {f"model/{k}": model.params[k].data for k in model.param_names()}
    header = {"model_config": model.config.to_dict()}
    if gmm is not None:
        header["gmm"] = gmm.header()
        arrays.update({f"gmm/{k}": v for k, v in gmm.arrays().items()})
    if extra:
        header["extra"] = extra
    write_container(path, MODEL_KIND, header, arrays)


def load_checkpoint(path, config=None, with_gmm=False):
    """Load a model checkpoint; ``config`` (if given) must match the stored shapes."""
    header, arrays = read_container(path, MODEL_KIND)
    stored = ModelConfig(**header["model_config"])
    cfg = config if config is not None else stored
    skeleton = SegmentationModel.__new__(SegmentationModel)
    skeleton.config = cfg
    params = {}
    for name, shape in skeleton._layer_shapes().items():
        key = f"model/{name}"
        if key not in arrays:
            raise ShapeError(f"checkpoint lacks parameter {name}")
        if tuple(arrays[key].shape) != tuple(shape):
            raise ShapeError(f"parameter {name}: checkpoint shape {arrays[key].shape} != expected {shape}")
        params[name] = Tensor(arrays[key])
    model = SegmentationModel(cfg, params)
    if not with_gmm:
        return model
    if "gmm" not in header:
        raise ContainerError(f"{path} has no GMM section; run the fit-gmm stage first")
    from .internal_dist import GmmParams

    gmm = GmmParams.from_parts(header["gmm"], {k[4:]: v for k, v in arrays.items() if k.startswith("gmm/")})
    return model, gmm


def checkpoint_extra(path):
    """The free-form ``extra`` header section of a checkpoint (scalars only)."""
    from .container import read_header

    header, _ = read_header(path)
    return header.get("extra", {})
