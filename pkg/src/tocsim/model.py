"""Split network: on-device encoder (theta) and server-side inferencer (phi)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import ChannelConfig, power_normalize, transmit
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_dims: tuple = (256, 128)
    feature_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigError("must be a positive even integer", key="model.feature_dim")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer widths must be >= 1", key="model.hidden_dims")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.feature_dim]


@dataclass(frozen=True)
class ReceiverSpec:
    feature_dim: int = 32
    hidden_dims: tuple = (128,)
    num_classes: int = 20

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", key="model.num_classes")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigError("must be a positive even integer", key="model.feature_dim")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer widths must be >= 1", key="model.receiver_hidden_dims")

    @property
    def dims(self) -> list[int]:
        return [self.feature_dim, *self.hidden_dims, self.num_classes]


def init_mlp(dims, rng: np.random.Generator) -> list[Tensor]:
    """He-uniform weights scaled by fan-in, zero biases: [W0, b0, W1, b1, ...]."""
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return params


def mlp_forward(x: Tensor, params) -> Tensor:
    """Linear -> ReLU -> ... -> Linear (no activation on the output layer)."""
    if len(params) % 2:
        raise DimensionError("parameter list must alternate weights and biases")
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {i}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def encode(x: Tensor, theta, power: float = 1.0) -> Tensor:
    return power_normalize(mlp_forward(x, theta), power)


def infer(zhat: Tensor, phi) -> Tensor:
    return mlp_forward(zhat, phi)


def predict(logits: Tensor | np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=1)


def forward_pair(x, x_aug, theta, channel: ChannelConfig, rng, rng_aug=None):
    """Siamese pass of two views through one encoder and independent channel draws."""
    x, x_aug = ad.as_tensor(x), ad.as_tensor(x_aug)
    if x.shape != x_aug.shape:
        raise DimensionError(f"views differ in shape: {x.shape} vs {x_aug.shape}")
    rng_aug = rng if rng_aug is None else rng_aug
    zhat = transmit(encode(x, theta, channel.power), channel, rng)
    zhat_aug = transmit(encode(x_aug, theta, channel.power), channel, rng_aug)
    return zhat, zhat_aug


@dataclass
class SplitModel:
    """Encoder parameters theta, receiver parameters phi, and the link between them."""

    encoder_spec: EncoderSpec
    channel: ChannelConfig
    theta: list = field(default_factory=list)
    receiver_spec: ReceiverSpec | None = None
    phi: list | None = None

    @classmethod
    def create(cls, encoder_spec: EncoderSpec, channel: ChannelConfig, rng) -> "SplitModel":
        return cls(encoder_spec, channel, init_mlp(encoder_spec.dims, rng))

    def attach_receiver(self, spec: ReceiverSpec, rng):
        """Fresh random inferencer; any previous phi is discarded."""
        if spec.feature_dim != self.encoder_spec.feature_dim:
            raise ConfigError("receiver feature_dim must match the encoder", key="model.feature_dim")
        self.receiver_spec = spec
        self.phi = init_mlp(spec.dims, rng)

    def encode(self, x) -> Tensor:
        return encode(ad.as_tensor(x), self.theta, self.channel.power)

    def infer(self, zhat) -> Tensor:
        if self.phi is None:
            raise ConfigError("no receiver attached")
        return infer(zhat, self.phi)

    def forward(self, x, rng) -> Tensor:
        return self.infer(transmit(self.encode(x), self.channel, rng))

    def forward_pair(self, x, x_aug, rng, rng_aug=None):
        return forward_pair(x, x_aug, self.theta, self.channel, rng, rng_aug)

    def theta_arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.theta]

    def copy(self) -> "SplitModel":
        clone = lambda ps: None if ps is None else [Tensor(p.data, requires_grad=True) for p in ps]
        return SplitModel(self.encoder_spec, self.channel, clone(self.theta), self.receiver_spec, clone(self.phi))
