"""Three-block convolutional classifier with manual reverse-mode gradients.

Layout: conv3x3 -> ReLU -> avgpool2 (blocks 1, 2), conv3x3 -> ReLU (block 3),
global average pool, bias-free linear head. Inputs in [0, 1] are shifted and
scaled by fixed constants first. A 32x32 input yields an 8x8 final
feature map, which is what the entropy mask and the test-time module consume.
"""
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._files import atomic_write_bytes
from .enin import EnInConfig, entropy_mask, plan_enin
from .errors import FormatError, InvalidLabelError, InvalidShapeError, UsageError
from .tensor import RngStream, softmax

WIDTHS = (8, 16, 32)
POOL = (True, True, False)
# fixed input normalization applied before the first convolution
INPUT_MEAN = 0.3
INPUT_STD = 0.25
CKPT_MAGIC = b"IPNN"
CKPT_VERSION = 1


class ConvNet:
    def __init__(self, num_classes=4, in_channels=3, widths=WIDTHS, seed=0, dtype=np.float32):
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = RngStream(seed).spawn("init")
        c_in = in_channels
        for b, c_out in enumerate(self.widths, start=1):
            fan_in = c_in * 9
            bound = math.sqrt(6.0 / fan_in)
            self.params[f"conv{b}.w"] = rng.uniform(-bound, bound, (c_out, c_in, 3, 3))
            self.params[f"conv{b}.b"] = np.zeros(c_out)
            c_in = c_out
        bound = 1.0 / math.sqrt(c_in)
        self.params["head.w"] = rng.uniform(-bound, bound, (c_in, num_classes))
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    @property
    def head(self):
        return self.params["head.w"]

    @property
    def num_blocks(self):
        return len(self.widths)

    def copy(self):
        other = object.__new__(ConvNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.grads = {k: v.copy() for k, v in self.grads.items()}
        other.velocity = {k: v.copy() for k, v in self.velocity.items()}
        other._cache = None
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for store in (other.params, other.grads, other.velocity):
            for k in store:
                store[k] = store[k].astype(dtype)
        return other

    def zero_params(self):
        for v in self.params.values():
            v[...] = 0

    def features(self, x):
        """Final feature maps [N, C, 8, 8] in eval mode."""
        return forward(self, x, "eval").features

    def predict_proba(self, x, batch_size=256):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(softmax(forward(self, x[i : i + batch_size], "eval").logits.astype(np.float64)))
        return np.concatenate(out) if out else np.zeros((0, self.num_classes))


@dataclass
class EnInContext:
    """Per-step intervention settings handed to ``forward``.

    ``states`` is filled with the intervention drawn at each insertion point
    (None where it did not fire). Passing a previous ``states`` dict as
    ``frozen`` replays exactly those interventions.
    """

    cfg: EnInConfig
    rng: RngStream
    mask: object  # EntropyMask at the final feature resolution
    frozen: dict = None
    force: bool = False
    branch: str = None
    lam: float = None
    states: dict = field(default_factory=dict)


@dataclass
class ForwardResult:
    activations: list
    features: np.ndarray
    logits: np.ndarray


def _conv_forward(x, w, b):
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape):
    n, c, h, wd = x_shape
    d = dout.transpose(0, 2, 3, 1).reshape(n * h * wd, -1)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(w.shape[0], -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_backward(d):
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * d.dtype.type(0.25)


def forward(model, batch, mode="eval", enin=None):
    """Run the network; interventions fire only when ``mode == 'train'``."""
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1] != model.in_channels:
        raise InvalidShapeError(f"expected [N, {model.in_channels}, H, W] input, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise InvalidShapeError(f"spatial extents must be multiples of 4, got {x.shape[2:]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    active = enin is not None and mode == "train"
    x = ((x - INPUT_MEAN) / INPUT_STD).astype(model.dtype, copy=False)
    cache = []
    activations = []
    a = x
    for b in range(1, model.num_blocks + 1):
        pre, cols = _conv_forward(a, model.params[f"conv{b}.w"], model.params[f"conv{b}.b"])
        entry = {"cols": cols, "in_shape": a.shape, "relu": pre > 0, "state": None}
        a = np.maximum(pre, 0)
        if POOL[b - 1]:
            a = _pool_forward(a)
        if active and b in enin.cfg.insertion_points:
            if enin.frozen is not None:
                state = enin.frozen.get(b)
            else:
                m = enin.mask.resized(*a.shape[2:])
                state = plan_enin(a, m, enin.cfg, enin.rng, branch=enin.branch, lam=enin.lam, force=enin.force)
            enin.states[b] = state
            if state is not None:
                a = state.apply(a)
            entry["state"] = state
        cache.append(entry)
        activations.append(a)
    pooled = a.mean(axis=(2, 3))
    logits = pooled @ model.params["head.w"]
    model._cache = {"blocks": cache, "pooled": pooled, "feat_shape": a.shape}
    return ForwardResult(activations, a, logits)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise InvalidLabelError(f"labels must be {n} ids in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logsm[np.arange(n), labels].mean()
    d = np.exp(logsm)
    d[np.arange(n), labels] -= 1.0
    return float(loss), (d / n).astype(logits.dtype, copy=False)


def backward(model, dlogits):
    """Accumulate parameter gradients into ``model.grads`` from the last forward."""
    cache = model._cache
    if cache is None:
        raise UsageError("backward called without a cached forward pass")
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    grads = model.grads
    grads["head.w"] = cache["pooled"].T @ dlogits
    n, c, h, w = cache["feat_shape"]
    dpooled = dlogits @ model.params["head.w"].T
    d = np.broadcast_to((dpooled / (h * w))[:, :, None, None], (n, c, h, w))
    for b in range(model.num_blocks, 0, -1):
        entry = cache["blocks"][b - 1]
        if entry["state"] is not None:
            d = entry["state"].grad(d)
        if POOL[b - 1]:
            d = _pool_backward(d)
        d = d * entry["relu"]
        d, dw, db = _conv_backward(d, entry["cols"], model.params[f"conv{b}.w"], entry["in_shape"])
        grads[f"conv{b}.w"] = dw
        grads[f"conv{b}.b"] = db
    model._cache = None
    return grads


def clip_scale(grads, max_norm):
    """Factor that brings the global gradient norm down to ``max_norm``."""
    if max_norm is None:
        return 1.0
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    return 1.0 if norm <= max_norm else max_norm / norm


def sgd_step(model, cfg, lr=None):
    """Momentum SGD with L2 weight decay folded into the (norm-clipped) gradient."""
    lr = cfg.lr if lr is None else lr
    scale = model.dtype.type(clip_scale(model.grads, cfg.clip_norm))
    for k, p in model.params.items():
        g = scale * model.grads[k] + cfg.weight_decay * p
        v = model.velocity[k]
        v *= cfg.momentum
        v += g
        p -= lr * v


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 600
    batch_size: int = 32
    seed: int = 0
    enin: EnInConfig = field(default_factory=EnInConfig)
    use_enin: bool = False
    cosine: bool = True
    clip_norm: float = 5.0  # global gradient-norm clip; None disables

    def __post_init__(self):
        if isinstance(self.enin, dict):
            self.enin = EnInConfig(**self.enin)
        if self.use_enin and self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 when EnIn is enabled")

    def to_dict(self):
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "enin": self.enin.to_dict(),
            "use_enin": self.use_enin,
            "cosine": self.cosine,
            "clip_norm": self.clip_norm,
        }


@dataclass
class TrainResult:
    model: ConvNet
    losses: list
    step_log: list


def _batches(n, batch_size, rng):
    while True:
        order = rng.gen.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def train(model, images, labels, cfg):
    """Train in place; returns the model, per-step losses and an intervention log."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("training set is empty")
    root = RngStream(cfg.seed)
    batch_rng = root.spawn("batches")
    enin_rng = root.spawn("enin")
    bs = min(cfg.batch_size, len(images))
    batches = _batches(len(images), bs, batch_rng)
    losses, log = [], []
    for step in range(cfg.steps):
        idx = next(batches)
        xb, yb = images[idx], labels[idx]
        ctx = None
        if cfg.use_enin:
            feats = forward(model, xb, "eval").features
            ctx = EnInContext(cfg.enin, enin_rng, entropy_mask(feats, model.head))
        res = forward(model, xb, "train", ctx)
        loss, dlogits = cross_entropy_loss(res.logits, yb)
        backward(model, dlogits)
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps)) if cfg.cosine else cfg.lr
        sgd_step(model, cfg, lr)
        fired = {} if ctx is None else {b: (s.branch if s is not None else None) for b, s in ctx.states.items()}
        losses.append(loss)
        log.append({"step": step, "loss": loss, "lr": lr, "enin": fired})
    return TrainResult(model, losses, log)


def accuracy(model, images, labels):
    if len(images) == 0:
        return float("nan")
    pred = model.predict_proba(images).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def checkpoint_bytes(model):
    names = sorted(model.params)
    head = [CKPT_MAGIC, struct.pack("<HHHH", CKPT_VERSION, model.num_classes, model.in_channels, len(names))]
    payload = []
    for name in names:
        arr = model.params[name]
        raw = name.encode()
        head.append(struct.pack("<B", len(raw)) + raw + struct.pack("<B", arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.astype("<f4").tobytes())
    return b"".join(head + payload)


def checkpoint_from_bytes(data):
    try:
        if data[:4] != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, k, c_in, count = struct.unpack_from("<HHHH", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 12
        table = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<B", data, off)
            name = data[off + 1 : off + 1 + ln].decode()
            off += 1 + ln
            (rank,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{rank}I", data, off + 1)
            off += 1 + 4 * rank
            table.append((name, shape))
        params = {}
        for name, shape in table:
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise FormatError("truncated checkpoint payload")
            params[name] = np.frombuffer(data, "<f4", int(np.prod(shape)), off).reshape(shape).astype(np.float32)
            off += size
        if off != len(data):
            raise FormatError("trailing bytes in checkpoint")
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    widths = tuple(params[f"conv{b}.w"].shape[0] for b in range(1, len(WIDTHS) + 1) if f"conv{b}.w" in params)
    model = ConvNet(k, c_in, widths, seed=0, dtype=np.float32)
    if set(params) != set(model.params):
        raise FormatError("checkpoint tensor names do not match the architecture")
    for name, arr in params.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"shape mismatch for {name}")
        model.params[name] = arr
    return model


def save_checkpoint(model, path):
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
