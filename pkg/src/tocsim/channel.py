"""Wireless link between the edge device and the server.

Features leave the encoder as real vectors of even width ``k``; the first
``k/2`` coordinates are the in-phase parts and the last ``k/2`` the
quadrature parts of ``k/2`` complex channel symbols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateInputError, DimensionError

AWGN = "AWGN"
RAYLEIGH = "Rayleigh"
CHANNEL_KINDS = (AWGN, RAYLEIGH)


def snr_to_sigma(snr_db: float, power: float = 1.0) -> float:
    """Complex noise variance sigma_n^2 = P / 10^(snr_db / 10)."""
    if not power > 0:
        raise ConfigError("power must be positive", key="channel.power")
    return power / 10.0 ** (snr_db / 10.0)


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = AWGN
    snr_db: float = 10.0
    power: float = 1.0
    equalize: bool = True
    eq_epsilon: float = 1e-3

    def __post_init__(self):
        kind = _canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not self.power > 0:
            raise ConfigError("must be positive", key="channel.power")
        if math.isnan(self.snr_db):
            raise ConfigError("must be a number", key="channel.snr_db")
        if self.equalize and not self.eq_epsilon > 0:
            raise ConfigError("must be positive when equalize is on", key="channel.eq_epsilon")

    @property
    def noise_variance(self) -> float:
        return snr_to_sigma(self.snr_db, self.power)

    @property
    def label(self) -> str:
        snr = f"{self.snr_db:g}"
        return f"{self.kind}_{snr}dB"


def _canonical_kind(kind: str) -> str:
    for name in CHANNEL_KINDS:
        if str(kind).lower() == name.lower():
            return name
    raise ConfigError(f"unknown channel kind {kind!r}", key="channel.kind")


def _check_even(k: int):
    if k < 2 or k % 2:
        raise DimensionError(f"feature width must be even and >= 2, got {k}")


def power_normalize(z: Tensor, power: float = 1.0) -> Tensor:
    """Rescale every row so that (1/k)||row||^2 == power."""
    if z.ndim != 2:
        raise DimensionError("power_normalize expects [batch, k]")
    k = z.shape[1]
    _check_even(k)
    sq = ad.tsum(ad.mul(z, z), axis=1, keepdims=True)
    if (sq.data == 0).any():
        raise DegenerateInputError("cannot power-normalise a zero feature row")
    inv_norm = ad.reciprocal(ad.sqrt(sq))
    return ad.mul_rows(z, ad.scale(inv_norm, math.sqrt(k * power)))


@dataclass(frozen=True)
class ComplexFeature:
    re: Tensor
    im: Tensor

    @property
    def energy(self) -> float:
        return float((self.re.data**2).sum() + (self.im.data**2).sum())


def pack_complex(z: Tensor) -> ComplexFeature:
    if z.ndim != 2:
        raise DimensionError("pack_complex expects [batch, k]")
    k = z.shape[1]
    if k % 2:
        raise DimensionError(f"odd feature width {k} cannot be paired into complex symbols")
    m = k // 2

    def half(lo, hi):
        def vjp(g):
            full = np.zeros(z.shape)
            full[:, lo:hi] = g
            return (full,)

        return ad.apply("pack_complex", z.data[:, lo:hi].copy(), (z,), vjp)

    return ComplexFeature(half(0, m), half(m, k))


def unpack_complex(c: ComplexFeature) -> Tensor:
    if c.re.shape != c.im.shape:
        raise DimensionError("real and imaginary parts differ in shape")
    m = c.re.shape[1]
    data = np.concatenate([c.re.data, c.im.data], axis=1)
    return ad.apply("unpack_complex", data, (c.re, c.im), lambda g: (g[:, :m], g[:, m:]))


@dataclass(frozen=True)
class ChannelRealization:
    """One draw of fading and noise, kept for inspection in tests."""

    gain: np.ndarray  # complex [batch, k/2]; ones for AWGN
    noise: np.ndarray  # complex [batch, k/2]


def draw_realization(shape: tuple, cfg: ChannelConfig, rng: np.random.Generator) -> ChannelRealization:
    batch, k = shape
    _check_even(k)
    m = k // 2
    if cfg.kind == RAYLEIGH:
        h = rng.normal(0.0, math.sqrt(0.5), size=(batch, m)) + 1j * rng.normal(
            0.0, math.sqrt(0.5), size=(batch, m)
        )
    else:
        h = np.ones((batch, m), dtype=complex)
    std = math.sqrt(cfg.noise_variance / 2.0)
    n = rng.normal(0.0, std, size=(batch, m)) + 1j * rng.normal(0.0, std, size=(batch, m))
    return ChannelRealization(h, n)


def transmit(
    z: Tensor,
    cfg: ChannelConfig,
    rng: np.random.Generator,
    realization: ChannelRealization | None = None,
) -> Tensor:
    """Pass power-normalised features through the channel: h*z + n.

    With ``cfg.equalize`` on a Rayleigh link the receiver applies the
    regularised inverse conj(h) / (|h|^2 + eq_epsilon).  Fading and noise are
    constants for the backward pass.
    """
    if z.ndim != 2:
        raise DimensionError("transmit expects [batch, k]")
    if realization is None:
        realization = draw_realization(z.shape, cfg, rng)
    m = z.shape[1] // 2
    h, n = realization.gain, realization.noise
    if cfg.kind == RAYLEIGH and cfg.equalize:
        w = np.conj(h) / (np.abs(h) ** 2 + cfg.eq_epsilon)
        coeff, offset = w * h, w * n
    else:
        coeff, offset = h, n
    zc = z.data[:, :m] + 1j * z.data[:, m:]
    out = coeff * zc + offset
    data = np.concatenate([out.real, out.imag], axis=1)
    back = np.conj(coeff)

    def vjp(g):
        gc = back * (g[:, :m] + 1j * g[:, m:])
        return (np.concatenate([gc.real, gc.imag], axis=1),)

    return ad.apply("transmit", data, (z,), vjp)
