"""Small numeric kernel: instance statistics, softmax/entropy, resizing and seeded RNG.

Tensors are plain ``numpy`` arrays laid out NCHW. Functions accept any leading
batch dimensions where that makes sense and operate over the trailing axes.
"""
import numpy as np

from .errors import (
    InvalidParameterError,
    InvalidProbabilityError,
    InvalidShapeError,
    ZeroNormError,
)

EPS = 1e-6


def as_tensor(x, dtype=np.float64):
    """Convert to an array of rank 1..4 with finite entries."""
    t = np.asarray(x, dtype=dtype)
    if t.ndim < 1 or t.ndim > 4:
        raise InvalidShapeError(f"tensor rank must be 1..4, got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise InvalidShapeError(f"tensor extents must be positive, got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidParameterError("tensor contains NaN or Inf")
    return t


class RngStream:
    """Seeded random stream. Same seed and call sequence give bit-identical draws.

    ``spawn`` derives an independent child stream from a string key, so that
    separate concerns (init, batching, interventions) do not perturb each other.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self._key])
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, name):
        tag = int.from_bytes(name.encode()[:8].ljust(8, b"\0"), "little")
        return RngStream(self.seed, self._key + (tag, len(name)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def gamma(self, shape, size=None):
        return self.gen.gamma(shape, 1.0, size)


def instance_stats(t, eps=EPS):
    """Per-channel spatial mean and ``sqrt(var + eps)`` over the last two axes."""
    t = np.asarray(t)
    if t.ndim < 2 or t.shape[-1] * t.shape[-2] < 1:
        raise InvalidShapeError(f"empty spatial extent in shape {t.shape}")
    if eps <= 0:
        raise InvalidParameterError("eps must be positive")
    mu = t.mean(axis=(-2, -1))
    var = t.var(axis=(-2, -1))
    return mu, np.sqrt(var + eps)


def softmax(v, axis=-1):
    v = np.asarray(v)
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats without input validation (hot path)."""
    p = np.asarray(p)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=axis)


def shannon_entropy(p, axis=-1):
    """Shannon entropy ``-sum p log p`` in nats, with ``0 log 0 = 0``.

    Raises InvalidProbabilityError if an entry is negative or a distribution does
    not sum to one within 1e-5.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise InvalidProbabilityError("negative probability entry")
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-5):
        raise InvalidProbabilityError("probabilities do not sum to 1")
    h = entropy(p, axis=axis)
    return float(h) if np.ndim(h) == 0 else h


def minmax_normalize(m, axis=None):
    """Affinely map values to [0, 1]; constant inputs map to all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo = m.min(axis=axis, keepdims=True)
    span = m.max(axis=axis, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (m - lo) / safe, 0.0)


def _interp_matrix(n_in, n_out):
    # align_corners=False source coordinates, clamped at the borders
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    R = np.zeros((n_out, n_in))
    np.add.at(R, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(R, (np.arange(n_out), i1), frac)
    return R


def bilinear_resize(m, out_h, out_w):
    """Bilinear resize of the last two axes (align_corners=False)."""
    m = np.asarray(m)
    if out_h < 1 or out_w < 1:
        raise InvalidShapeError(f"target extent must be positive, got {(out_h, out_w)}")
    h, w = m.shape[-2:]
    if h < 1 or w < 1:
        raise InvalidShapeError("source map is empty")
    if (h, w) == (out_h, out_w):
        return m.copy()
    Rh = _interp_matrix(h, out_h)
    Rw = _interp_matrix(w, out_w)
    out = np.einsum("ih,...hw,jw->...ij", Rh, m, Rw)
    return out.astype(m.dtype, copy=False)


def sample_beta(alpha, rng):
    """One draw from the symmetric Beta(alpha, alpha) via a pair of Gamma draws."""
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    while True:
        x = rng.gamma(alpha)
        y = rng.gamma(alpha)
        s = x + y
        if s > 0:
            lam = x / s
            if 0.0 < lam < 1.0:
                return float(lam)


def batch_permutation(n, rng):
    """Uniform permutation of ``range(n)``; fixed points allowed."""
    if n < 1:
        raise InvalidParameterError("n must be at least 1")
    return rng.gen.permutation(n)


def l2_normalize(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ZeroNormError("cannot normalize a zero vector")
    return v / norm


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))

