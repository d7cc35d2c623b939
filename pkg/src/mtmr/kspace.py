"""Retrospective Cartesian undersampling forward model.

Complex images are stored as real tensors with a trailing-channel layout
``(..., 2, H, W)`` where channel 0 is the real part and channel 1 the
imaginary part.  All transforms use the centered, orthonormal convention:
DC sits at index ``(H // 2, W // 2)`` and the 2D DFT is unitary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

IMAGE = "image"
KSPACE = "kspace"


class DomainError(ValueError):
    """Raised when an operation receives data tagged with the wrong domain."""


class InfeasibleMaskError(ValueError):
    """Raised when the fully sampled center alone exceeds the sampling budget."""


@dataclass
class ComplexImage:
    """A complex 2D grid (optionally batched) in image or k-space domain."""

    data: torch.Tensor
    domain: str = IMAGE

    def __post_init__(self):
        if self.domain not in (IMAGE, KSPACE):
            raise DomainError(f"unknown domain {self.domain!r}")
        if self.data.ndim < 3 or self.data.shape[-3] != 2:
            raise ValueError(f"expected (..., 2, H, W) layout, got {tuple(self.data.shape)}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])

    @classmethod
    def from_real(cls, image, domain: str = IMAGE, dtype=torch.float32) -> "ComplexImage":
        """Wrap a real-valued ``(..., H, W)`` array as a complex image with zero imaginary part."""
        re = torch.as_tensor(np.asarray(image), dtype=dtype)
        return cls(torch.stack([re, torch.zeros_like(re)], dim=-3), domain)

    @classmethod
    def from_complex(cls, z, domain: str = IMAGE) -> "ComplexImage":
        return cls(complex_to_channels(torch.as_tensor(z)), domain)

    def to_complex(self) -> torch.Tensor:
        return channels_to_complex(self.data)

    def magnitude(self) -> torch.Tensor:
        return magnitude(self.data)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    return torch.complex(x.select(-3, 0), x.select(-3, 1))


def complex_to_channels(z: torch.Tensor) -> torch.Tensor:
    return torch.stack([z.real, z.imag], dim=-3)


def magnitude(x: torch.Tensor) -> torch.Tensor:
    """Magnitude of a 2-channel complex tensor, ``(..., 2, H, W) -> (..., H, W)``.

    Goes through a complex abs so the gradient at exactly zero is defined (zero).
    """
    return channels_to_complex(x).abs()


def fft2c(x: torch.Tensor) -> torch.Tensor:
    """Centered orthonormal 2D FFT on 2-channel tensors."""
    z = channels_to_complex(x)
    z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = torch.fft.fft2(z, norm="ortho")
    return complex_to_channels(torch.fft.fftshift(z, dim=(-2, -1)))


def ifft2c(k: torch.Tensor) -> torch.Tensor:
    """Centered orthonormal 2D inverse FFT on 2-channel tensors."""
    z = channels_to_complex(k)
    z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = torch.fft.ifft2(z, norm="ortho")
    return complex_to_channels(torch.fft.fftshift(z, dim=(-2, -1)))


def forward_fft(img: ComplexImage) -> ComplexImage:
    if img.domain != IMAGE:
        raise DomainError(f"forward_fft expects an image-domain input, got {img.domain}")
    return ComplexImage(fft2c(img.data), KSPACE)


def inverse_fft(k: ComplexImage) -> ComplexImage:
    if k.domain != KSPACE:
        raise DomainError(f"inverse_fft expects a k-space input, got {k.domain}")
    return ComplexImage(ifft2c(k.data), IMAGE)


@dataclass
class SamplingMask:
    """Binary selection of phase-encode lines (columns of the k-space grid)."""

    lines: np.ndarray
    center_fraction: float
    acceleration: float
    seed: int

    def __post_init__(self):
        self.lines = np.asarray(self.lines, dtype=bool)

    @property
    def width(self) -> int:
        return self.lines.shape[0]

    def n_center(self) -> int:
        return int(math.floor(self.center_fraction * self.width))

    def center_slice(self) -> slice:
        return center_block(self.width, self.n_center())

    def as_grid(self, height: int) -> np.ndarray:
        """Broadcast to a ``(height, W)`` boolean grid, constant along the readout axis."""
        return np.broadcast_to(self.lines[None, :], (height, self.width)).copy()

    def to_line(self) -> str:
        bits = "".join("1" if v else "0" for v in self.lines)
        return f"{self.width} {self.center_fraction!r} {self.acceleration!r} {self.seed} : {bits}"

    @classmethod
    def from_line(cls, line: str) -> "SamplingMask":
        head, bits = line.strip().split(":")
        width, cf, acc, seed = head.split()
        bits = bits.strip()
        if len(bits) != int(width) or set(bits) - {"0", "1"}:
            raise ValueError(f"malformed mask line: {line!r}")
        return cls(np.array([b == "1" for b in bits]), float(cf), float(acc), int(seed))

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            np.array_equal(self.lines, other.lines)
            and self.center_fraction == other.center_fraction
            and self.acceleration == other.acceleration
            and self.seed == other.seed
        )


def center_block(width: int, n_center: int) -> slice:
    # DC lives at width // 2 under the centered convention.
    start = width // 2 - n_center // 2
    return slice(start, start + n_center)


def keep_probability(width: int, center_fraction: float, acceleration: float) -> float:
    """Probability for each non-center line so the expected total is ``width / acceleration``."""
    n_c = int(math.floor(center_fraction * width))
    budget = width / acceleration
    if n_c > budget:
        raise InfeasibleMaskError(
            f"center block of {n_c} lines exceeds the budget of {budget:g} lines"
        )
    if n_c == width:
        return 1.0
    return (budget - n_c) / (width - n_c)


def make_mask(width: int, center_fraction: float = 0.08, acceleration: float = 4.0,
              seed: int = 0) -> SamplingMask:
    """Random Cartesian line mask with a fully sampled center block.

    The ``floor(center_fraction * width)`` lines around DC are always kept and
    every other line is kept independently with the probability returned by
    :func:`keep_probability`, so the expected number of kept lines is
    ``width / acceleration``.
    """
    if not 0 < center_fraction < 1:
        raise ValueError(f"center_fraction must lie in (0, 1), got {center_fraction}")
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    p = keep_probability(width, center_fraction, acceleration)
    rng = np.random.default_rng(seed)
    lines = rng.random(width) < p
    lines[center_block(width, int(math.floor(center_fraction * width)))] = True
    return SamplingMask(lines, float(center_fraction), float(acceleration), int(seed))


def full_mask(width: int) -> SamplingMask:
    return SamplingMask(np.ones(width, dtype=bool), 0.5, 1.0, 0)


@dataclass
class MeasuredKSpace:
    """Masked k-space; exactly zero on every dropped line."""

    kspace: ComplexImage
    mask: SamplingMask
    _weights: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def line_weights(self) -> torch.Tensor:
        """Mask as a ``(W,)`` tensor in the k-space dtype, broadcastable over ``(..., 2, H, W)``."""
        if self._weights is None or self._weights.dtype != self.kspace.data.dtype:
            self._weights = torch.as_tensor(self.mask.lines, dtype=self.kspace.data.dtype)
        return self._weights


def apply_mask(k: ComplexImage, mask: SamplingMask) -> MeasuredKSpace:
    if k.domain != KSPACE:
        raise DomainError(f"apply_mask expects k-space, got {k.domain}")
    if mask.width != k.shape[1]:
        raise ValueError(f"mask width {mask.width} does not match k-space width {k.shape[1]}")
    keep = torch.as_tensor(mask.lines)
    data = torch.where(keep, k.data, torch.zeros((), dtype=k.data.dtype))
    return MeasuredKSpace(ComplexImage(data, KSPACE), mask)


def undersample(image, mask: SamplingMask, dtype=torch.float32) -> MeasuredKSpace:
    """Shortcut: real image -> centered k-space -> masked measurement."""
    return apply_mask(forward_fft(ComplexImage.from_real(image, dtype=dtype)), mask)


def zero_fill(m: MeasuredKSpace) -> ComplexImage:
    return inverse_fft(m.kspace)


def data_consistency(pred: ComplexImage, m: MeasuredKSpace, lam: float | None = None) -> ComplexImage:
    """Enforce agreement with the measurements on sampled lines.

    With ``lam=None`` the sampled lines are replaced by the measurements
    (noiseless limit).  Otherwise sampled lines become
    ``(K + lam * k_meas) / (1 + lam)``; unsampled lines keep the prediction.
    """
    if pred.domain != IMAGE:
        raise DomainError(f"data_consistency expects an image-domain prediction, got {pred.domain}")
    return ComplexImage(dc_tensor(pred.data, m.kspace.data, m.line_weights(), lam), IMAGE)


def dc_tensor(x: torch.Tensor, k_meas: torch.Tensor, weights: torch.Tensor,
              lam: float | None = None) -> torch.Tensor:
    """Tensor-level data consistency used inside the reconstruction cascade."""
    if x.shape[-2:] != k_meas.shape[-2:]:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(k_meas.shape)}")
    if lam is not None and lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    k = fft2c(x)
    if lam is None:
        merged = (1 - weights) * k + weights * k_meas
    else:
        merged = (1 - weights) * k + weights * (k + lam * k_meas) / (1 + lam)
    return ifft2c(merged)
