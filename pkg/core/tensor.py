"""
Dense float64 linear algebra and seeded random streams.

Vectors and matrices are plain ``numpy`` float64 arrays. Every random draw in
the package comes from the PCG64 bit generator, seeded through a
``numpy.random.SeedSequence`` whose spawn key names the purpose of the stream
(data, init, batching, ...), so each component is reproducible on its own.
"""

import numpy as np
import numpy.typing as npt

from .exceptions import ConfigurationError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
Rng = np.random.Generator

# Order is part of the reproducibility contract: append, never reorder.
STREAMS = ("data", "init", "batching", "validation", "weighting", "pcgrad")


def make_rng(seed: int) -> Rng:
    """Return a PCG64 generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, purpose: str) -> Rng:
    """Return the sub-generator dedicated to ``purpose`` for a run seeded with ``seed``."""
    if purpose not in STREAMS:
        raise ConfigurationError(f"Unknown random stream '{purpose}', expected one of {', '.join(STREAMS)}")
    sequence = np.random.SeedSequence(seed, spawn_key=(STREAMS.index(purpose),))
    return np.random.Generator(np.random.PCG64(sequence))


def check_same_length(a: Vector, b: Vector) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"Dimension mismatch: {a.shape} vs {b.shape}")


def dot(a: Vector, b: Vector) -> float:
    """Inner product of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_length(a, b)
    return float(np.dot(a, b))


def axpy(alpha: float, x: Vector, y: Vector) -> Vector:
    """Return ``y + alpha * x`` as a new array."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_length(x, y)
    return y + alpha * x


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float) -> Matrix:
    """Draw a ``rows x cols`` matrix with i.i.d. Normal(0, std**2) entries."""
    if std < 0:
        raise ConfigurationError(f"Standard deviation must be non-negative, got {std}")
    if rows < 0 or cols < 0:
        raise ConfigurationError(f"Matrix dimensions must be non-negative, got {rows}x{cols}")
    return rng.standard_normal((rows, cols)) * std


def is_finite(values) -> bool:
    return bool(np.all(np.isfinite(values)))
