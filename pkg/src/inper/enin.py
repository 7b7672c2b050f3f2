"""Entropy-guided intervention on feature statistics, applied during training.

A per-location entropy map of the local class scores marks class-ambiguous
regions. Patches at the entropy extremes supply the statistics that are mixed
into each sample's own instance statistics before renormalization.
"""
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidConfigurationError, InvalidParameterError, InvalidShapeError
from .tensor import (
    EPS,
    batch_permutation,
    bilinear_resize,
    entropy,
    instance_stats,
    minmax_normalize,
    sample_beta,
    softmax,
)

PATCH_RATIOS = (Fraction(1, 4), Fraction(1, 8))


def parse_ratio(value):
    """Accept 0.25, '1/4', Fraction(1, 4) and friends."""
    try:
        r = Fraction(value).limit_denominator(64)
    except (ValueError, ZeroDivisionError) as exc:
        raise InvalidConfigurationError(f"bad patch ratio {value!r}") from exc
    if r not in PATCH_RATIOS:
        raise InvalidConfigurationError(f"patch ratio must be 1/4 or 1/8, got {value!r}")
    return r


@dataclass
class EntropyMask:
    map: np.ndarray  # [N, 1, h, w], entries in [0, 1]
    source_shape: tuple

    def resized(self, h, w):
        return bilinear_resize(self.map, h, w)

    def sample(self, i):
        return EntropyMask(self.map[i : i + 1], self.source_shape)

    def __len__(self):
        return self.map.shape[0]


@dataclass(frozen=True)
class MixedStats:
    gamma: np.ndarray
    beta: np.ndarray
    lambda_used: float


@dataclass
class EnInConfig:
    apply_probability: float = 0.5
    beta_alpha: float = 0.1
    patch_area_ratio: object = Fraction(1, 4)
    eps: float = EPS
    insertion_points: tuple = (1, 2)

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise InvalidConfigurationError("apply_probability must lie in [0, 1]")
        if not self.beta_alpha > 0:
            raise InvalidConfigurationError("beta_alpha must be positive")
        if not self.eps > 0:
            raise InvalidConfigurationError("eps must be positive")
        self.patch_area_ratio = parse_ratio(self.patch_area_ratio)
        self.insertion_points = tuple(sorted(set(int(b) for b in self.insertion_points)))

    def to_dict(self):
        return {
            "apply_probability": self.apply_probability,
            "beta_alpha": self.beta_alpha,
            "patch_area_ratio": str(self.patch_area_ratio),
            "eps": self.eps,
            "insertion_points": list(self.insertion_points),
        }


def entropy_mask(final_features, classifier_weights):
    """Normalized per-location entropy of local class probabilities.

    ``final_features`` is [N, C, h, w] and ``classifier_weights`` is [C, K]. Each
    sample's h*w entropies are min-max normalized independently.
    """
    g = np.asarray(final_features)
    W = np.asarray(classifier_weights)
    if g.ndim != 4 or W.ndim != 2 or g.shape[1] != W.shape[0]:
        raise InvalidShapeError(f"features {g.shape} incompatible with weights {W.shape}")
    n, _, h, w = g.shape
    scores = np.einsum("nchw,ck->nhwk", g, W)
    ent = entropy(softmax(scores, axis=-1), axis=-1)
    m = minmax_normalize(ent.reshape(n, h * w), axis=1).reshape(n, 1, h, w)
    return EntropyMask(m, (h, w))


def patch_grid(h, w, ratio):
    """(rows, cols, patch_h, patch_w) for an equal-sized grid; remainders dropped."""
    ratio = parse_ratio(ratio)
    if ratio == Fraction(1, 4):
        rows, cols = 2, 2
    elif h > w:
        rows, cols = 4, 2
    else:
        rows, cols = 2, 4
    ph, pw = h // rows, w // cols
    if ph < 1 or pw < 1:
        raise InvalidConfigurationError(f"{h}x{w} map too small for a {rows}x{cols} patch grid")
    return rows, cols, ph, pw


def _patch_view(x, rows, cols, ph, pw):
    # [N, C, h, w] -> [N, rows, cols, C, ph, pw]
    n, c = x.shape[:2]
    x = x[..., : rows * ph, : cols * pw].reshape(n, c, rows, ph, cols, pw)
    return x.transpose(0, 2, 4, 1, 3, 5)


def select_patches(mask, features, ratio, mode):
    """Batched patch selection.

    mask: [N, 1, h, w]; features: [N, C, h, w]. Returns patch features
    [N, C, ph, pw], patch masks [N, 1, ph, pw] and (row, col) indices [N, 2].
    """
    if mode not in ("max", "min"):
        raise InvalidParameterError(f"mode must be 'max' or 'min', got {mode!r}")
    mask = np.asarray(mask)
    features = np.asarray(features)
    if mask.shape[-2:] != features.shape[-2:] or mask.shape[0] != features.shape[0]:
        raise InvalidShapeError(f"mask {mask.shape} does not match features {features.shape}")
    n = features.shape[0]
    h, w = features.shape[-2:]
    rows, cols, ph, pw = patch_grid(h, w, ratio)
    mview = _patch_view(mask, rows, cols, ph, pw)  # [N, rows, cols, 1, ph, pw]
    scores = mview.mean(axis=(-3, -2, -1)).reshape(n, rows * cols)
    # argmax/argmin return the first hit in row-major order, which is the tie-break
    flat = scores.argmax(axis=1) if mode == "max" else scores.argmin(axis=1)
    r, c = np.divmod(flat, cols)
    idx = np.arange(n)
    fview = _patch_view(features, rows, cols, ph, pw)
    return fview[idx, r, c], mview[idx, r, c], np.stack([r, c], axis=1)


def select_patch(mask, features, ratio, mode):
    """Single-sample patch selection from a [1, h, w] (or [h, w]) mask and [C, h, w] features."""
    m = np.asarray(mask.map[0] if isinstance(mask, EntropyMask) else mask)
    if m.ndim == 2:
        m = m[None]
    pf, pm, loc = select_patches(m[None], np.asarray(features)[None], ratio, mode)
    return pf[0], pm[0], (int(loc[0, 0]), int(loc[0, 1]))


def masked_patch_stats(patch_features, patch_mask, eps=EPS):
    return instance_stats(np.asarray(patch_features) * np.asarray(patch_mask), eps)


def mix_stats(own, patch, lam):
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameterError(f"lambda must lie in [0, 1], got {lam}")
    mu, sigma = own
    pmu, psigma = patch
    gamma = lam * sigma + (1.0 - lam) * psigma
    beta = lam * mu + (1.0 - lam) * pmu
    return MixedStats(gamma, beta, float(lam))


@dataclass
class EnInState:
    """Statistics of one intervention, held constant for the backward pass.

    ``apply`` evaluates ``mask*g + gamma*(g - mu)/sigma + beta`` with the stored
    constants, which is also how a frozen replay (gradient checks) is run.
    """

    branch: str
    lam: float
    perm: np.ndarray
    mu: np.ndarray  # [N, C, 1, 1]
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    mask: np.ndarray = None  # [N, 1, H, W] for the cross-sample branch only
    patch_loc: np.ndarray = field(default=None, repr=False)

    def apply(self, g):
        out = self.gamma * ((g - self.mu) / self.sigma) + self.beta
        if self.mask is not None:
            out = out + self.mask * g
        return out.astype(g.dtype, copy=False)

    def grad(self, dout):
        scale = self.gamma / self.sigma
        if self.mask is not None:
            scale = scale + self.mask
        return (dout * scale).astype(dout.dtype, copy=False)


def _as_mask_array(mask, shape):
    m = mask.map if isinstance(mask, EntropyMask) else np.asarray(mask)
    if m.shape[-2:] != tuple(shape[-2:]) or m.shape[0] != shape[0]:
        raise InvalidShapeError(f"mask {m.shape} does not match features {tuple(shape)}")
    return m


def plan_enin(g, mask, cfg, rng, branch=None, lam=None, perm=None, force=False):
    """Draw an intervention for the batch ``g`` or return None if it does not fire.

    Random draws happen in a fixed order (trigger, lambda, permutation, branch)
    whether or not an override is supplied, so overrides never shift the stream.
    """
    g = np.asarray(g)
    if g.ndim != 4:
        raise InvalidShapeError(f"expected [N, C, H, W] features, got {g.shape}")
    m = _as_mask_array(mask, g.shape).astype(g.dtype, copy=False)
    n = g.shape[0]
    u = rng.uniform()
    drawn_lam = sample_beta(cfg.beta_alpha, rng)
    drawn_perm = batch_permutation(n, rng)
    drawn_branch = "A" if rng.uniform() < 0.5 else "B"
    if not force and not u < cfg.apply_probability:
        return None
    lam = drawn_lam if lam is None else float(lam)
    perm = drawn_perm if perm is None else np.asarray(perm)
    branch = drawn_branch if branch is None else branch
    if branch not in ("A", "B"):
        raise InvalidParameterError(f"branch must be 'A' or 'B', got {branch!r}")

    mu, sigma = instance_stats(g, cfg.eps)
    if branch == "A":
        pf, pm, loc = select_patches(m[perm], g[perm], cfg.patch_area_ratio, "max")
    else:
        pf, pm, loc = select_patches(m, g, cfg.patch_area_ratio, "min")
    pmu, psigma = masked_patch_stats(pf, pm, cfg.eps)
    mixed = mix_stats((mu, sigma), (pmu, psigma), lam)
    expand = lambda a: a[:, :, None, None]  # noqa: E731
    return EnInState(
        branch=branch,
        lam=lam,
        perm=perm,
        mu=expand(mu),
        sigma=expand(sigma),
        gamma=expand(mixed.gamma),
        beta=expand(mixed.beta),
        mask=m if branch == "A" else None,
        patch_loc=loc,
    )


def enin_transform(g, mask, cfg, rng, branch=None, lam=None, perm=None):
    """Apply the intervention to a training batch [N, C, H, W].

    ``mask`` must already be resized to the batch's spatial shape. With
    probability ``1 - cfg.apply_probability`` the input is returned unchanged.
    """
    state = plan_enin(g, mask, cfg, rng, branch=branch, lam=lam, perm=perm)
    if state is None:
        return np.asarray(g)
    return state.apply(np.asarray(g))
