"""Small CNN binary classifier: conv blocks, one hidden dense layer, 2 logits."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import FormatError, ShapeError, ValidationError
from .rng import Rng
from .tensor import Tensor

KERNEL, PAD, STRIDE, POOL = 3, 1, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (1, 32, 32)
    conv_filters: tuple = (8, 16)
    hidden: int = 32
    activation: str = "relu"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValidationError(f"input_shape must be C×H×W, got {self.input_shape}")
        if not self.conv_filters or min(self.conv_filters) < 1:
            raise ValidationError("at least one conv block with ≥1 filter is required")
        if self.hidden < 1:
            raise ValidationError("hidden width must be positive")
        if self.activation not in ("relu", "softplus"):
            raise ValidationError(f"unknown activation {self.activation!r}")
        T.resolve_dtype(self.dtype)
        h, w = self.input_shape[1:]
        for _ in self.conv_filters:
            if h < POOL or w < POOL:
                raise ValidationError(f"input {self.input_shape} too small for {len(self.conv_filters)} pooling stages")
            h, w = h // POOL, w // POOL

    @property
    def feature_shape(self):
        h, w = self.input_shape[1:]
        for _ in self.conv_filters:
            h, w = h // POOL, w // POOL
        return (self.conv_filters[-1], h, w)

    def param_shapes(self):
        """Parameter shapes in checkpoint order."""
        shapes = []
        c = self.input_shape[0]
        for f in self.conv_filters:
            shapes += [(f, c, KERNEL, KERNEL), (f,)]
            c = f
        flat = math.prod(self.feature_shape)
        shapes += [(flat, self.hidden), (self.hidden,), (self.hidden, 2), (2,)]
        return shapes

    def param_count(self):
        return sum(math.prod(s) for s in self.param_shapes())

    def to_json(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: list = field(default_factory=list)

    def forward(self, x):
        return forward(self, x)

    def parameters(self):
        return list(self.params)

    def state(self):
        return ad.checkpoint_params(self.params)

    def load_state(self, flat):
        ad.restore_params(self.params, flat)


def init_model(cfg, zero=False):
    """He-normal weights, zero biases, drawn from the ``init`` substream of ``cfg.seed``."""
    r = Rng(cfg.seed).substream("init")
    dtype = T.resolve_dtype(cfg.dtype)
    params = []
    for shape in cfg.param_shapes():
        if len(shape) == 1 or zero:
            arr = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
            std = math.sqrt(2.0 / fan_in)
            arr = (r.normal_array(math.prod(shape)) * std).reshape(shape).astype(dtype)
        params.append(ad.lift(Tensor._wrap(arr), requires_grad=True))
    return Model(cfg, params)


def _act(cfg):
    return ad.relu if cfg.activation == "relu" else ad.softplus


def forward(m, x):
    """Two logits (healthy, non-healthy) for one C×H×W input node."""
    cfg = m.config
    if x.shape != cfg.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {cfg.input_shape}")
    act = _act(cfg)
    p = m.params
    h = x
    for i in range(len(cfg.conv_filters)):
        h = act(ad.conv2d(h, p[2 * i], p[2 * i + 1], STRIDE, PAD))
        h = ad.maxpool2d(h, POOL, POOL)
    k = 2 * len(cfg.conv_filters)
    w1, b1, w2, b2 = p[k:k + 4]
    h = ad.reshape(h, (1, math.prod(h.shape)))
    h = act(ad.add(ad.matmul(h, w1), ad.reshape(b1, (1, cfg.hidden))))
    z = ad.add(ad.matmul(h, w2), ad.reshape(b2, (1, 2)))
    return ad.reshape(z, (2,))


def softmax(logits):
    """Numeric softmax of a logits array (last axis)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def probabilities(z):
    """Differentiable (p0, p1) from a 2-logit node.

    For two classes softmax reduces to p1 = sigmoid(z1 - z0).
    """
    d = ad.sub(ad.take(z, 1), ad.take(z, 0))
    return ad.sigmoid(ad.scale(d, -1.0)), ad.sigmoid(d)


def predict_scores(m, images):
    """Softmax probability of the non-healthy class for each image."""
    scores = np.empty(len(images))
    with ad.no_grad():
        for i, img in enumerate(images):
            z = forward(m, ad.constant(img)).value.data
            scores[i] = softmax(z)[1]
    return scores


# --- checkpoint file ---------------------------------------------------------

def save_checkpoint(path, m, extra=None):
    """JSON header line with the config, then every parameter as a GMT1 tensor."""
    header = {"model_config": m.config.to_json()}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        T.write_tensors(fh, [p.value for p in m.params])


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(buf[:nl])
        cfg = ModelConfig.from_json(header["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from exc
    pos = nl + 1
    params = []
    for shape in cfg.param_shapes():
        t, pos = T.decode_tensor(buf, pos)
        if t.shape != shape:
            raise FormatError(f"{path}: parameter shape {t.shape}, expected {shape}")
        params.append(ad.lift(t, requires_grad=True))
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after parameters")
    return Model(cfg, params), header
