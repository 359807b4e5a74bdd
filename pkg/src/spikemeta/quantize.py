"""Integer weight views, stochastic rounding, and seeded randomness.

Deployed synaptic weights are signed 8-bit integers with a step of two,
covering {-256, -254, ..., 252, 254}.  Full-precision shadow values are kept
alongside the integer image so that learning can accumulate small changes;
the integer view is refreshed by stochastic rounding, which is unbiased in
expectation.

All stochastic components in the package draw from `RandomSource` streams,
which are counter-based and keyed by (seed, stream id): the value of draw k
in a stream never depends on what other streams did, so runs are bit
reproducible regardless of evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RandomSource",
    "QuantizationScheme",
    "WeightMatrix",
    "LOIHI_WEIGHTS",
    "stochastic_round",
    "stochastic_round_even",
    "quantize_array",
    "quantize_weights",
]


def _stream_key(stream_id: int | str) -> int:
    if isinstance(stream_id, str):
        digest = hashlib.blake2b(stream_id.encode(), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(stream_id) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class RandomSource:
    """Deterministic randomness keyed by (seed, stream id).

    Each consumer owns a named stream; identical (seed, stream id, draw
    index) always yields identical output.  Concurrent consumers must use
    distinct stream ids.
    """

    seed: int

    def stream(self, stream_id: int | str) -> np.random.Generator:
        key = (int(self.seed) & 0xFFFFFFFFFFFFFFFF, _stream_key(stream_id))
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, label: str) -> "RandomSource":
        """Child source whose streams are disjoint from the parent's."""
        return RandomSource(_stream_key(f"{self.seed}/{label}"))


@dataclass(frozen=True)
class QuantizationScheme:
    """Fixed-point grid for deployed weights: multiples of `step` in [min, max]."""

    step: int = 2
    min: int = -256
    max: int = 254
    bits: int = 8

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise ValueError("quantization step must be positive")
        if self.min % self.step != 0 or self.max % self.step != 0:
            raise ValueError("range bounds must be multiples of the step")
        if self.min >= self.max:
            raise ValueError("empty quantization range")


LOIHI_WEIGHTS = QuantizationScheme(step=2, min=-256, max=254, bits=8)


def stochastic_round(x, rng: np.random.Generator, step: int = 2):
    """Round to one of the two bracketing multiples of `step`.

    The upper multiple is chosen with probability proportional to proximity,
    so the expectation over draws equals x.  Exact multiples are returned
    unchanged.  Accepts scalars or arrays; arrays consume one uniform draw
    per element.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot stochastically round non-finite values")
    lo = step * np.floor(arr / step)
    frac = (arr - lo) / step
    up = rng.random(size=arr.shape) < frac
    out = (lo + step * up).astype(np.int64)
    if np.isscalar(x) or arr.ndim == 0:
        return int(out)
    return out


def stochastic_round_even(x, rng: np.random.Generator):
    """Stochastic rounding to even integers (step of two)."""
    return stochastic_round(x, rng, step=2)


def quantize_array(
    shadow: np.ndarray, scheme: QuantizationScheme, rng: np.random.Generator
) -> np.ndarray:
    """Stochastically round then clamp into the scheme's range (int16)."""
    rounded = stochastic_round(shadow, rng, step=scheme.step)
    return np.clip(rounded, scheme.min, scheme.max).astype(np.int16)


@dataclass
class WeightMatrix:
    """Dual-view weights: full-precision shadow plus its integer image.

    Shape is (post, pre).  The quantized view is what deployed inference
    reads; the shadow view is what learning accumulates into.
    """

    shadow: np.ndarray
    quantized: np.ndarray

    def __post_init__(self) -> None:
        self.shadow = np.asarray(self.shadow, dtype=np.float64)
        self.quantized = np.asarray(self.quantized, dtype=np.int16)
        if self.shadow.shape != self.quantized.shape:
            raise ValueError(
                f"shadow shape {self.shadow.shape} != quantized shape {self.quantized.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.shadow.shape

    @classmethod
    def from_shadow(
        cls, shadow: np.ndarray, scheme: QuantizationScheme, rng: np.random.Generator
    ) -> "WeightMatrix":
        shadow = np.asarray(shadow, dtype=np.float64)
        return cls(shadow=shadow, quantized=quantize_array(shadow, scheme, rng))

    @classmethod
    def zeros(cls, post: int, pre: int) -> "WeightMatrix":
        return cls(
            shadow=np.zeros((post, pre)), quantized=np.zeros((post, pre), dtype=np.int16)
        )

    def copy(self) -> "WeightMatrix":
        return WeightMatrix(shadow=self.shadow.copy(), quantized=self.quantized.copy())

    def requantize_rows(
        self, rows: np.ndarray, scheme: QuantizationScheme, rng: np.random.Generator
    ) -> None:
        """Refresh the integer view of the given rows from the shadow view.

        Only touched rows are re-rounded; untouched weights keep their
        previous integer image so that no-update epochs write nothing.
        """
        self.quantized[rows] = quantize_array(self.shadow[rows], scheme, rng)


def quantize_weights(
    w: WeightMatrix, scheme: QuantizationScheme, rng: np.random.Generator
) -> WeightMatrix:
    """Fresh WeightMatrix with the integer view recomputed from the shadow."""
    return WeightMatrix(
        shadow=w.shadow.copy(), quantized=quantize_array(w.shadow, scheme, rng)
    )
