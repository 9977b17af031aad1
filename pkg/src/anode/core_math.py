"""Dense arithmetic helpers, a portable seeded RNG and norms.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
The generator is splitmix64 so that every golden value in the test-suite
can be re-derived with a dozen lines of integer arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_POW_M53 = 1.0 / (1 << 53)


def _mix_array(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
    return x ^ (x >> np.uint64(31))


class Rng:
    """splitmix64 generator.

    Draw ``k`` (1-based) of a generator seeded with ``s`` is
    ``mix(s + k * 0x9E3779B97F4A7C15 mod 2**64)``, which is what makes the
    vectorised draws below identical to the scalar recurrence.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            x = np.uint64(self.state) + k * np.uint64(_GAMMA)
            out = _mix_array(x)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; each pair of uniforms yields two samples."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * math.pi * u2)
        out[1::2] = r * np.sin(2.0 * math.pi * u2)
        return out[:n]

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection, no modulo bias."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        return Rng(self.next_u64())


def as_rng(seed_or_rng) -> Rng:
    if isinstance(seed_or_rng, Rng):
        return seed_or_rng
    return Rng(0 if seed_or_rng is None else seed_or_rng)


def gaussian_tensor(rng: Rng, shape, mean: float = 0.0, stddev: float = 1.0) -> np.ndarray:
    """I.i.d. ``Normal(mean, stddev**2)`` entries, filled in row-major order."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("rank-zero tensor unsupported")
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    if stddev < 0:
        raise ValueError("stddev must be non-negative")
    n = math.prod(shape)
    return (mean + stddev * rng.normal(n)).reshape(shape)


def norm2(a) -> float:
    """Euclidean norm, scaled so tiny or huge entries neither underflow nor overflow."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    m = float(np.max(np.abs(a))) if a.size else 0.0
    if m == 0.0 or not np.isfinite(m):
        return m
    return m * float(np.linalg.norm(a / m))


def relative_error(a, b) -> float:
    """``||a - b||_2 / ||b||_2`` over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    nb = norm2(b)
    if nb == 0.0:
        raise ValueError("undefined relative error")
    return norm2(a - b) / nb


def operator_norm(apply, apply_t, shape, iterations: int = 100, seed: int = 12345) -> float:
    """Largest singular value of a linear operator by power iteration on ``A^T A``.

    ``apply`` maps an array of ``shape`` forward and ``apply_t`` maps back.
    The estimate is ``||A v_k||`` for the normalised iterate ``v_k``; for the
    PSD operator ``A^T A`` this sequence never decreases.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v = Rng(seed).normal(math.prod(shape)).reshape(shape)
    v /= norm2(v)
    sigma = 0.0
    for _ in range(iterations):
        av = apply(v)
        sigma = norm2(av)
        if sigma == 0.0:
            return 0.0
        w = apply_t(av)
        nw = norm2(w)
        if nw == 0.0:
            break
        v = w / nw
    return norm2(apply(v))


def spectral_norm(w, iterations: int = 100) -> float:
    """Power-iteration estimate of ``||W||_2`` for a matrix."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("spectral_norm expects a 2-d array")
    return operator_norm(lambda v: w @ v, lambda u: w.T @ u, (w.shape[1],), iterations)
