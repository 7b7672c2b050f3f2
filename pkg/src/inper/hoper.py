"""Test-time adaptation with a HomeoScore-filtered prototype memory bank.

Each test sample's final feature map is perturbed toward its own low-entropy
(class-consistent) statistics. The distance between the class probabilities
before and after the perturbation (the HomeoScore) decides whether the
perturbed embedding may join its pseudo-class bank. Predictions come from
cosine similarity to the per-class bank centroids.
"""
import math
import struct
from dataclasses import dataclass

import numpy as np

from ._files import atomic_write_bytes
from .enin import entropy_mask, masked_patch_stats, mix_stats, parse_ratio, select_patch
from .errors import FormatError, InvalidConfigurationError, InvalidShapeError, UsageError, ZeroNormError
from .tensor import EPS, entropy, instance_stats, l2_normalize, sample_beta, softmax

BANK_MAGIC = b"IPBK"
BANK_VERSION = 1


@dataclass
class HoPerConfig:
    homeo_threshold: float = 0.2
    entropy_threshold: float = None  # nats; None means 0.8 * ln K
    capacity: int = 100
    cp_lambda: object = 0.5  # a float in [0, 1] (fixed) or "beta"
    cp_beta_alpha: float = 0.1
    patch_area_ratio: object = "1/4"
    eps: float = EPS

    def __post_init__(self):
        if not self.homeo_threshold > 0:
            raise InvalidConfigurationError("homeo_threshold must be positive")
        if self.entropy_threshold is not None and not self.entropy_threshold > 0:
            raise InvalidConfigurationError("entropy_threshold must be positive")
        if self.capacity < 1:
            raise InvalidConfigurationError("capacity must be at least 1")
        self.cp_lambda = parse_cp_lambda(self.cp_lambda)
        self.patch_area_ratio = parse_ratio(self.patch_area_ratio)

    def beta_for(self, num_classes):
        if self.entropy_threshold is not None:
            return float(self.entropy_threshold)
        return 0.8 * math.log(num_classes)

    def to_dict(self):
        return {
            "homeo_threshold": self.homeo_threshold,
            "entropy_threshold": self.entropy_threshold,
            "capacity": self.capacity,
            "cp_lambda": self.cp_lambda,
            "cp_beta_alpha": self.cp_beta_alpha,
            "patch_area_ratio": str(self.patch_area_ratio),
            "eps": self.eps,
        }


def parse_cp_lambda(value):
    """'fixed:0.5', 0.5 or 'beta'."""
    if isinstance(value, str):
        if value == "beta":
            return "beta"
        if value.startswith("fixed:"):
            value = value[len("fixed:") :]
        try:
            value = float(value)
        except ValueError as exc:
            raise InvalidConfigurationError(f"bad cp_lambda {value!r}") from exc
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise InvalidConfigurationError("fixed cp_lambda must lie in [0, 1]")
    return value


@dataclass
class AdaptationRecord:
    probs: np.ndarray
    perturbed_probs: np.ndarray
    pseudo_label: int
    homeo_score: float
    perturbed_entropy: float
    admitted: bool
    prediction: np.ndarray


class MemoryBank:
    """Per-class lists of unit-norm float32 embeddings with their entropies."""

    def __init__(self, num_classes, dim, capacity=100):
        self.num_classes = int(num_classes)
        self.dim = int(dim)
        self.capacity = int(capacity)
        self.embeddings = [[] for _ in range(self.num_classes)]
        self.entropies = [[] for _ in range(self.num_classes)]

    @classmethod
    def warm_start(cls, classifier_weights, capacity=100):
        """One entry per class: the normalized classifier column, entropy 0."""
        W = np.asarray(classifier_weights, dtype=np.float64)
        bank = cls(W.shape[1], W.shape[0], capacity)
        for k in range(bank.num_classes):
            bank.add(k, W[:, k], 0.0)
        return bank

    def sizes(self):
        return [len(e) for e in self.embeddings]

    def __len__(self):
        return sum(self.sizes())

    def copy(self):
        other = MemoryBank(self.num_classes, self.dim, self.capacity)
        other.embeddings = [list(e) for e in self.embeddings]
        other.entropies = [list(e) for e in self.entropies]
        return other

    def add(self, k, embedding, ent):
        """Append a normalized entry; on overflow evict the highest-entropy entry.

        Returns False when the new entry itself was the one evicted.
        """
        v = np.asarray(embedding, dtype=np.float64)
        if v.shape != (self.dim,):
            raise InvalidShapeError(f"embedding must have shape ({self.dim},), got {v.shape}")
        self.embeddings[k].append(l2_normalize(v).astype(np.float32))
        self.entropies[k].append(np.float32(ent))
        if len(self.embeddings[k]) > self.capacity:
            drop = int(np.argmax(self.entropies[k]))
            del self.embeddings[k][drop]
            del self.entropies[k][drop]
            return drop != len(self.embeddings[k])
        return True

    def prune(self, beta):
        for k in range(self.num_classes):
            keep = [i for i, h in enumerate(self.entropies[k]) if h <= beta]
            self.embeddings[k] = [self.embeddings[k][i] for i in keep]
            self.entropies[k] = [self.entropies[k][i] for i in keep]

    def centroids(self):
        """[K, dim] class means (rows of zeros for empty classes) and a nonempty mask."""
        cents = np.zeros((self.num_classes, self.dim))
        present = np.zeros(self.num_classes, dtype=bool)
        for k, entries in enumerate(self.embeddings):
            if entries:
                cents[k] = np.mean(np.stack(entries).astype(np.float64), axis=0)
                present[k] = True
        return cents, present

    def validate(self, beta=None):
        """Raise AssertionError if a bank invariant is violated."""
        for k in range(self.num_classes):
            assert len(self.embeddings[k]) == len(self.entropies[k])
            assert len(self.embeddings[k]) <= self.capacity, f"class {k} over capacity"
            for e, h in zip(self.embeddings[k], self.entropies[k]):
                assert abs(float(np.linalg.norm(e.astype(np.float64))) - 1.0) <= 1e-5, "non-unit embedding"
                assert h >= 0, "negative entropy"
                if beta is not None:
                    assert h <= beta, f"entropy {h} above threshold {beta}"

    def to_bytes(self):
        sizes = self.sizes()
        head = BANK_MAGIC + struct.pack("<HIII", BANK_VERSION, self.num_classes, self.capacity, self.dim)
        head += struct.pack(f"<{self.num_classes}I", *sizes)
        embs = [e for lst in self.embeddings for e in lst]
        emb_bytes = np.stack(embs).astype("<f4").tobytes() if embs else b""
        ents = [h for lst in self.entropies for h in lst]
        return head + emb_bytes + np.asarray(ents, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != BANK_MAGIC:
            raise FormatError("bad bank snapshot magic")
        try:
            version, k, capacity, dim = struct.unpack_from("<HIII", data, 4)
            if version != BANK_VERSION:
                raise FormatError(f"unsupported bank snapshot version {version}")
            sizes = struct.unpack_from(f"<{k}I", data, 18)
        except struct.error as exc:
            raise FormatError(f"truncated bank snapshot header: {exc}") from exc
        total = sum(sizes)
        off = 18 + 4 * k
        if len(data) != off + 4 * total * dim + 4 * total:
            raise FormatError("bank snapshot payload size mismatch")
        embs = np.frombuffer(data, "<f4", total * dim, off).reshape(total, dim).astype(np.float32)
        ents = np.frombuffer(data, "<f4", total, off + 4 * total * dim).astype(np.float32)
        bank = cls(k, dim, capacity)
        i = 0
        for c, n in enumerate(sizes):
            bank.embeddings[c] = [embs[j] for j in range(i, i + n)]
            bank.entropies[c] = [ents[j] for j in range(i, i + n)]
            i += n
        return bank


def save_bank(bank, path):
    atomic_write_bytes(path, bank.to_bytes())


def load_bank(path):
    with open(path, "rb") as f:
        return MemoryBank.from_bytes(f.read())


def _cp_lambda(cfg, rng):
    if cfg.cp_lambda == "beta":
        if rng is None:
            raise UsageError("cp_lambda 'beta' needs an rng")
        return sample_beta(cfg.cp_beta_alpha, rng)
    return cfg.cp_lambda


def causal_perturb(final_features, mask, cfg, rng=None, lam=None):
    """Renormalize a [C, h, w] map with stats mixed toward its min-entropy patch."""
    g = np.asarray(final_features, dtype=np.float64)
    m = np.asarray(getattr(mask, "map", mask), dtype=np.float64)
    if m.ndim == 4:
        m = m[0]
    if g.ndim != 3 or m.shape != (1,) + g.shape[1:]:
        raise InvalidShapeError(f"mask {m.shape} does not match features {g.shape}")
    if lam is None:
        lam = _cp_lambda(cfg, rng)
    mu, sigma = instance_stats(g, cfg.eps)
    pf, pm, _ = select_patch(m, g, cfg.patch_area_ratio, "min")
    mixed = mix_stats((mu, sigma), masked_patch_stats(pf, pm, cfg.eps), lam)
    e = lambda a: a[:, None, None]  # noqa: E731
    return e(mixed.gamma) * (g - e(mu)) / e(sigma) + e(mixed.beta)


def homeo_score(p, p_perturbed):
    """Euclidean distance between two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(p_perturbed, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidShapeError(f"length mismatch {p.shape} vs {q.shape}")
    return float(np.sqrt(np.sum((p - q) ** 2)))


def bank_update(bank, embedding, p_perturbed, score, cfg):
    """Admit the embedding under its pseudo-label when ``score < homeo_threshold``."""
    v = np.asarray(embedding, dtype=np.float64)
    if not np.any(v):
        raise ZeroNormError("cannot admit a zero embedding")
    if score < cfg.homeo_threshold:
        p = np.asarray(p_perturbed, dtype=np.float64)
        bank.add(int(np.argmax(p)), v, float(entropy(p)))
    return bank


def bank_prune_entropy(bank, beta):
    bank.prune(beta)
    return bank


def prototype_predict(bank, embedding, fallback):
    """Softmax over cosine similarities to the per-class centroids.

    Classes with empty banks get probability zero; with every bank empty the
    fallback distribution is returned.
    """
    q = np.asarray(embedding, dtype=np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ZeroNormError("query embedding is zero")
    cents, present = bank.centroids()
    if not present.any():
        return np.asarray(fallback, dtype=np.float64)
    norms = np.linalg.norm(cents, axis=1)
    sims = np.where(norms > 0, cents @ q / (np.where(norms > 0, norms, 1.0) * qn), 0.0)
    out = np.zeros(bank.num_classes)
    out[present] = softmax(sims[present])
    return out


def adapt_stream(model, images, cfg, rng=None, bank=None, batch_size=256):
    """Sequentially adapt over an ordered test stream.

    The model is frozen, so final features for the whole stream are computed in
    batches up front; the bank logic then runs strictly in stream order. The
    bank consulted for sample t holds only entries from samples before t.
    Returns (predicted labels, records, final bank).
    """
    images = np.asarray(images)
    W = np.asarray(model.head, dtype=np.float64)
    K = W.shape[1]
    beta = cfg.beta_for(K)
    if bank is None:
        bank = MemoryBank.warm_start(W, cfg.capacity)
    bank_prune_entropy(bank, beta)
    records, preds = [], []
    for start in range(0, len(images), batch_size):
        feats = model.features(images[start : start + batch_size]).astype(np.float64)
        masks = entropy_mask(feats, W)
        for i in range(len(feats)):
            g = feats[i]
            emb = g.mean(axis=(1, 2))
            p = softmax(emb @ W)
            g_cp = causal_perturb(g, masks.sample(i), cfg, rng)
            emb_cp = g_cp.mean(axis=(1, 2))
            p_cp = softmax(emb_cp @ W)
            score = homeo_score(p, p_cp)
            h_cp = float(entropy(p_cp))
            pred = prototype_predict(bank, emb, p) if np.any(emb) else p
            kept = False
            if score < cfg.homeo_threshold and np.any(emb_cp):
                kept = bank.add(int(np.argmax(p_cp)), emb_cp, h_cp)
            bank_prune_entropy(bank, beta)
            admitted = bool(kept and np.float32(h_cp) <= beta)
            records.append(AdaptationRecord(p, p_cp, int(np.argmax(p_cp)), score, h_cp, admitted, pred))
            preds.append(int(np.argmax(pred)))
    return np.asarray(preds, dtype=np.int64), records, bank
