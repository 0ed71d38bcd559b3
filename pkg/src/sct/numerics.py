"""Dense float64 numerics shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major order;
``as_matrix`` is the single validation gate (shape, dtype, finiteness).
Randomness comes from a small self-contained generator (splitmix64-seeded
xoshiro256**) so streams are byte-identical across platforms and numpy
versions.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array or raise."""
    m = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if m.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D array, got ndim={m.ndim}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"{name}: empty matrix of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name}: contains NaN or Inf entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Coerce to a finite float64 1-D array or raise."""
    v = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if v.ndim != 1:
        raise DimensionError(f"{name}: expected a 1-D array, got ndim={v.ndim}")
    if v.shape[0] == 0:
        raise DimensionError(f"{name}: empty vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name}: contains NaN or Inf entries")
    return v


def logsumexp_rows(m) -> np.ndarray:
    """Row-wise log(sum(exp(.))) with max-shift stabilization.

    Entries of -inf act as absent terms; a row of all -inf yields -inf.
    NaN and +inf are rejected.
    """
    m = np.ascontiguousarray(np.asarray(m, dtype=np.float64))
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise DimensionError(f"logsumexp_rows: expected a nonempty 2-D array, got shape {m.shape}")
    if np.any(np.isnan(m)) or np.any(np.isposinf(m)):
        raise ValidationError("logsumexp_rows: NaN or +Inf entries")
    shift = np.max(m, axis=1)
    out = np.full(m.shape[0], -np.inf)
    finite = np.isfinite(shift)
    if np.any(finite):
        rows = m[finite] - shift[finite, None]
        # exp(-inf) == 0, so -inf padding contributes nothing
        out[finite] = shift[finite] + np.log(np.sum(np.exp(rows), axis=1))
    return out


def softmax_rows(m, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m/scale; each output row is nonnegative and sums to 1."""
    if not (scale > 0):
        raise ParameterError(f"softmax_rows: scale must be > 0, got {scale}")
    m = as_matrix(m, "softmax_rows input")
    z = m / scale
    z -= np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    Asymmetry beyond 1e-9 is rejected; the tiny remainder is symmetrized away.
    """
    m = as_matrix(m, "sym_eig input")
    n, k = m.shape
    if n != k:
        raise DimensionError(f"sym_eig: matrix must be square, got {m.shape}")
    if np.max(np.abs(m - m.T)) > 1e-9:
        raise DimensionError("sym_eig: matrix is not symmetric within 1e-9")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return w, v


def thin_svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD m = U diag(s) V^T with s descending.

    Singular values below 1e-10 * s_max are snapped to exactly 0 so rank
    decisions downstream are stable.
    """
    m = as_matrix(m, "thin_svd input")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    if s.size and s[0] > 0:
        s = np.where(s < 1e-10 * s[0], 0.0, s)
    return u, s, vh.T


_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def derive_seed(seed: int, tag: int) -> int:
    """Deterministic child seed from (seed, tag); pure, consumes no stream."""
    _, z1 = _splitmix64(int(seed) & _MASK64)
    _, z2 = _splitmix64((z1 + (int(tag) & _MASK64)) & _MASK64)
    return z2


class Rng:
    """xoshiro256** seeded through splitmix64.

    The full state is derived from the 64-bit seed by four splitmix64 steps,
    so equal seeds give byte-identical streams on every platform. Gaussian
    draws use Box-Muller with a cached spare.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            state, z = _splitmix64(state)
            s.append(z)
        self._s = s
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def integer(self, bound: int) -> int:
        """Uniform integer in [0, bound) by multiply-shift (bias < bound/2^64)."""
        if bound <= 0:
            raise ParameterError(f"Rng.integer: bound must be positive, got {bound}")
        return (self.next_u64() * bound) >> 64

    def normal(self) -> float:
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def uniforms(self, n: int) -> np.ndarray:
        return np.array([self.uniform() for _ in range(n)])

    def normals(self, *shape: int) -> np.ndarray:
        n = 1
        for s in shape:
            n *= s
        return np.array([self.normal() for _ in range(n)]).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, tag: int) -> "Rng":
        """Independent child generator keyed by (seed, tag)."""
        return Rng(derive_seed(self.seed, tag))
