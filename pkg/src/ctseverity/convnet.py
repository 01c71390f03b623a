"""Small 3D CNN with hand-written forward and backward passes (model M3).

Layout is ``(batch, channels, depth, height, width)``. Each block is
convolution (same padding, no bias) -> batch norm -> LeakyReLU -> max pool
with kernel == stride; pooling uses ceil mode so desk-scale inputs survive
all five isotropic halvings. Anisotropic blocks use 1x3x3 kernels and 1x2x2
pooling, isotropic blocks 3x3x3 and 2x2x2.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, ValidationError
from .evaluation import auc_score
from .volgrid import (
    HU_FILL,
    RegionLabels,
    Spacing,
    VoxelVolume,
    crop_pad_to,
    lung_bounding_box,
    resample_nearest,
    resample_trilinear,
    same_grid,
)

PAPER_INPUT = (2, 128, 384, 384)
PAPER_FLATTEN = 144
DEFAULT_CHANNELS = (8, 16, 32, 32, 16, 8, 4)

SCALES = {
    "full": {"dims": (128, 384, 384), "spacing": (3.0, 1.0, 1.0)},
    # same field of view at 8x coarser sampling
    "desk": {"dims": (16, 48, 48), "spacing": (24.0, 8.0, 8.0)},
}

HU_LOW, HU_HIGH = -1024.0, 600.0

WEIGHTS_FORMAT = "ctseverity-m3"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dims: tuple = PAPER_INPUT
    channels: tuple = DEFAULT_CHANNELS
    n_aniso: int = 2
    leaky_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(v) for v in self.input_dims))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if len(self.input_dims) != 4 or min(self.input_dims) < 1:
            raise ValidationError(f"input_dims must be (C, D, H, W), got {self.input_dims}")
        if not 0 <= self.n_aniso <= len(self.channels) or min(self.channels, default=1) < 1:
            raise ValidationError("invalid block / channel plan")
        if (self.input_dims == PAPER_INPUT and self.n_aniso == 2 and len(self.channels) == 7
                and self.flatten_dim != PAPER_FLATTEN):
            raise ValidationError(
                f"channel plan {self.channels} gives a {self.flatten_dim}-dim linear input; "
                f"the reference architecture needs {PAPER_FLATTEN}"
            )

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    def block_kernel(self, i):
        return (1, 3, 3) if i < self.n_aniso else (3, 3, 3)

    def block_pool(self, i):
        return (1, 2, 2) if i < self.n_aniso else (2, 2, 2)

    def shape_trace(self) -> list:
        """Per-block output shapes ``(C, D, H, W)``, starting with the input."""
        c, d, h, w = self.input_dims
        trace = [(c, d, h, w)]
        for i, cout in enumerate(self.channels):
            kd, kh, kw = self.block_pool(i)
            d, h, w = -(-d // kd), -(-h // kh), -(-w // kw)
            trace.append((cout, d, h, w))
        return trace

    @property
    def flatten_dim(self) -> int:
        return int(np.prod(self.shape_trace()[-1]))

    def to_json(self) -> dict:
        return asdict(self)


def desk_spec(channels=DEFAULT_CHANNELS) -> NetworkSpec:
    return NetworkSpec((2,) + SCALES["desk"]["dims"], channels)


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def _im2col(x, kernel):
    """Patches of a same-padded input: ``(B, C*K, D*H*W)``."""
    B, C, D, H, W = x.shape
    kd, kh, kw = kernel
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = np.empty((B, C, kd * kh * kw, D, H, W), dtype=x.dtype)
    k = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, k] = xp[:, :, a:a + D, b:b + H, c:c + W]
                k += 1
    return cols.reshape(B, C * kd * kh * kw, D * H * W)


def _col2im(dcols, shape, kernel):
    B, C, D, H, W = shape
    kd, kh, kw = kernel
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    dcols = dcols.reshape(B, C, kd * kh * kw, D, H, W)
    dxp = np.zeros((B, C, D + 2 * pd, H + 2 * ph, W + 2 * pw), dtype=dcols.dtype)
    k = 0
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                dxp[:, :, a:a + D, b:b + H, c:c + W] += dcols[:, :, k]
                k += 1
    return dxp[:, :, pd:pd + D, ph:ph + H, pw:pw + W]


def conv3d_forward(x, w):
    B, _, D, H, W = x.shape
    cout = w.shape[0]
    cols = _im2col(x, w.shape[2:])
    out = np.matmul(w.reshape(cout, -1), cols)
    return out.reshape(B, cout, D, H, W), cols


def conv3d_backward(dout, x_shape, w, cols):
    B = dout.shape[0]
    cout = w.shape[0]
    g = dout.reshape(B, cout, -1)
    dw = np.einsum("bon,bkn->ok", g, cols).reshape(w.shape)
    dcols = np.matmul(w.reshape(cout, -1).T, g)
    return _col2im(dcols, x_shape, w.shape[2:]), dw


def batchnorm_forward(x, gamma, beta, eps, train, running_mean, running_var):
    axes = (0, 2, 3, 4)
    if train:
        mean = x.mean(axis=axes, dtype=np.float64)
        var = ((x - mean.astype(x.dtype)[None, :, None, None, None]) ** 2).mean(axis=axes, dtype=np.float64)
    else:
        mean, var = running_mean, running_var
    shape = (1, -1, 1, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, mean, var)


def batchnorm_backward(dout, gamma, cache):
    xhat, inv, _, _ = cache
    axes = (0, 2, 3, 4)
    n = dout.size // dout.shape[1]
    shape = (1, -1, 1, 1, 1)
    dgamma = (dout * xhat).sum(axis=axes, dtype=np.float64).astype(dout.dtype)
    dbeta = dout.sum(axis=axes, dtype=np.float64).astype(dout.dtype)
    dxhat = dout * gamma.reshape(shape)
    s1 = dxhat.sum(axis=axes, dtype=np.float64).astype(dout.dtype).reshape(shape)
    s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).astype(dout.dtype).reshape(shape)
    dx = inv.reshape(shape) / n * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def leaky_relu_forward(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dout, x, slope):
    return np.where(x > 0, dout, slope * dout)


def maxpool_forward(x, kernel):
    """Ceil-mode max pool with stride == kernel. Returns output and argmax cache."""
    B, C, D, H, W = x.shape
    kd, kh, kw = kernel
    Do, Ho, Wo = -(-D // kd), -(-H // kh), -(-W // kw)
    pad = ((0, 0), (0, 0), (0, Do * kd - D), (0, Ho * kh - H), (0, Wo * kw - W))
    xp = np.pad(x, pad, constant_values=-np.inf) if any(p[1] for p in pad) else x
    win = xp.reshape(B, C, Do, kd, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(B, C, Do, Ho, Wo, kd * kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, kernel, cache):
    """Route each output gradient to the (first) argmax of its window."""
    arg, shape = cache
    B, C, D, H, W = shape
    kd, kh, kw = kernel
    Do, Ho, Wo = dout.shape[2:]
    win = np.zeros(dout.shape + (kd * kh * kw,), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    win = win.reshape(B, C, Do, Ho, Wo, kd, kh, kw).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    full = win.reshape(B, C, Do * kd, Ho * kh, Wo * kw)
    return full[:, :, :D, :H, :W]


def bce_with_logits(z, t):
    """Mean binary cross entropy of sigmoid(z) against targets, and d/dz."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - t * z))
    p = 1.0 / (1.0 + np.exp(-z))
    return loss, (p - t) / len(z)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Net:
    """Parameters, batch-norm buffers and the cached forward state of one network."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = {}
        self.buffers = {}
        cin = spec.input_dims[0]
        for i, cout in enumerate(spec.channels):
            k = spec.block_kernel(i)
            fan_in = cin * int(np.prod(k))
            self.params[f"conv{i}.w"] = (rng.standard_normal((cout, cin) + k) * math.sqrt(2.0 / fan_in)).astype(dtype)
            self.params[f"bn{i}.gamma"] = np.ones(cout, dtype)
            self.params[f"bn{i}.beta"] = np.zeros(cout, dtype)
            self.buffers[f"bn{i}.mean"] = np.zeros(cout, np.float64)
            self.buffers[f"bn{i}.var"] = np.ones(cout, np.float64)
            cin = cout
        # zero head: every case starts at logit 0, i.e. p = 0.5
        self.params["fc.w"] = np.zeros(spec.flatten_dim, dtype)
        self.params["fc.b"] = np.zeros(1, dtype)
        self._cache = None

    def copy_state(self) -> dict:
        return {k: v.copy() for k, v in {**self.params, **self.buffers}.items()}

    def load_state(self, state: dict) -> None:
        for k in self.params:
            self.params[k] = state[k].astype(self.dtype).copy()
        for k in self.buffers:
            self.buffers[k] = state[k].astype(np.float64).copy()

    def forward(self, x, train: bool = False, update_stats: bool = True) -> np.ndarray:
        """Logits for a batch ``(B, C, D, H, W)`` or a single ``(C, D, H, W)`` case."""
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 4
        if single:
            x = x[None]
        if tuple(x.shape[1:]) != self.spec.input_dims:
            raise ValidationError(f"input shape {x.shape[1:]} does not match {self.spec.input_dims}")
        spec = self.spec
        cache = []
        h = x
        for i in range(spec.n_blocks):
            w = self.params[f"conv{i}.w"]
            c_out, cols = conv3d_forward(h, w)
            bn_out, bn_cache = batchnorm_forward(
                c_out, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"], spec.bn_eps, train,
                self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"])
            if train and update_stats:
                m = spec.bn_momentum
                n = c_out.size // c_out.shape[1]
                unbiased = bn_cache[3] * n / max(n - 1, 1)
                self.buffers[f"bn{i}.mean"] = (1 - m) * self.buffers[f"bn{i}.mean"] + m * bn_cache[2]
                self.buffers[f"bn{i}.var"] = (1 - m) * self.buffers[f"bn{i}.var"] + m * unbiased
            act = leaky_relu_forward(bn_out, spec.leaky_slope)
            pooled, pool_cache = maxpool_forward(act, spec.block_pool(i))
            cache.append((h.shape, cols, bn_cache, bn_out, pool_cache))
            h = pooled
        flat = h.reshape(len(h), -1)
        logits = flat @ self.params["fc.w"] + self.params["fc.b"][0]
        self._cache = (cache, flat, h.shape) if train else None
        return logits[0] if single else logits

    def backward(self, dlogits) -> dict:
        """Gradients of the loss whose derivative w.r.t. the logits is ``dlogits``."""
        if self._cache is None:
            raise ValidationError("backward needs a preceding forward(train=True)")
        cache, flat, h_shape = self._cache
        spec = self.spec
        dlogits = np.asarray(dlogits, dtype=self.dtype).reshape(-1)
        grads = {
            "fc.w": flat.T @ dlogits,
            "fc.b": np.array([dlogits.sum()], dtype=self.dtype),
        }
        dh = np.outer(dlogits, self.params["fc.w"]).reshape(h_shape)
        for i in reversed(range(spec.n_blocks)):
            x_shape, cols, bn_cache, bn_out, pool_cache = cache[i]
            dact = maxpool_backward(dh, spec.block_pool(i), pool_cache)
            dbn = leaky_relu_backward(dact, bn_out, spec.leaky_slope)
            dconv, dgamma, dbeta = batchnorm_backward(dbn, self.params[f"bn{i}.gamma"], bn_cache)
            dh, dw = conv3d_backward(dconv, x_shape, self.params[f"conv{i}.w"], cols)
            grads[f"conv{i}.w"] = dw
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
        return grads

    def loss_and_grads(self, x, targets, update_stats: bool = True):
        logits = self.forward(x, train=True, update_stats=update_stats)
        loss, dz = bce_with_logits(logits, targets)
        return loss, self.backward(dz)

    def predict_score(self, x) -> np.ndarray:
        z = np.asarray(self.forward(x, train=False), dtype=np.float64)
        return 1.0 / (1.0 + np.exp(-z))


def predict_scores(net: Net, X, batch_size: int = 8, workers: int = 1) -> np.ndarray:
    """Inference-mode scores for a stack of cases, evaluated in chunks.

    Running batch-norm statistics make cases independent, so chunking and
    the optional thread pool change results only through float
    reassociation inside the matrix products.
    """
    X = np.asarray(X)
    if batch_size < 1 or workers < 1:
        raise ValidationError("batch_size and workers must be positive")
    chunks = [X[i:i + batch_size] for i in range(0, len(X), batch_size)]
    if workers == 1 or len(chunks) < 2:
        parts = [net.predict_score(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(net.predict_score, chunks))
    return np.concatenate(parts) if parts else np.empty(0)


def forward(net: Net, x, train: bool = False):
    return net.forward(x, train=train)


def backward(net: Net, x, target):
    """Gradients of mean BCE for batch ``x`` against ``target`` (training-mode batch norm)."""
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    return net.loss_and_grads(x, t, update_stats=False)[1]


# ---------------------------------------------------------------------------
# sampling and training
# ---------------------------------------------------------------------------

def class_balanced_sampler(labels, seed: int = 0):
    """Endless index stream: pick a class with probability 1/2, then a uniform member."""
    labels = np.asarray(labels).astype(bool)
    pos, neg = np.flatnonzero(labels), np.flatnonzero(~labels)
    if len(pos) == 0 or len(neg) == 0:
        raise ValidationError("class-balanced sampling needs both classes")
    rng = np.random.default_rng(seed)
    while True:
        pool = pos if rng.random() < 0.5 else neg
        yield int(pool[rng.integers(len(pool))])


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    sampler: str = "balanced"  # or "uniform"

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("invalid training configuration")
        if self.sampler not in ("balanced", "uniform"):
            raise ValidationError(f"unknown sampler {self.sampler!r}")


@dataclass
class TrainResult:
    net: Net
    loss_history: list = field(default_factory=list)
    val_auc_history: list = field(default_factory=list)
    val_loss_history: list = field(default_factory=list)
    best_epoch: int = -1


def train(net: Net, X, y, config: TrainConfig, X_val=None, y_val=None) -> TrainResult:
    """Momentum SGD on sampler-drawn mini-batches; keeps the best-validation-AUC epoch."""
    X = np.asarray(X)
    y = np.asarray(y).astype(np.float64)
    if len(X) == 0:
        raise ValidationError("empty training set")
    if config.sampler == "balanced":
        stream = class_balanced_sampler(y, config.seed)
    else:
        rng_u = np.random.default_rng(config.seed)
        stream = (int(rng_u.integers(len(X))) for _ in iter(int, 1))
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    steps = max(1, -(-len(X) // config.batch_size))
    have_val = X_val is not None and len(np.unique(np.asarray(y_val))) == 2
    result = TrainResult(net)
    best_key, best_state = (-np.inf, -np.inf), net.copy_state()
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(steps):
            idx = [next(stream) for _ in range(config.batch_size)]
            loss, grads = net.loss_and_grads(X[idx], y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"training loss became {loss} in epoch {epoch}")
            result.loss_history.append(loss)
            epoch_loss += loss
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * g
                net.params[k] = (net.params[k] + velocity[k]).astype(net.dtype)
        if have_val:
            z = np.asarray(net.forward(np.asarray(X_val)), dtype=np.float64)
            auc = auc_score(z, np.asarray(y_val))
            val_loss = bce_with_logits(z, np.asarray(y_val))[0]
        else:
            auc, val_loss = math.nan, epoch_loss / steps
        result.val_auc_history.append(auc)
        result.val_loss_history.append(val_loss)
        # AUC saturates on small validation sets; lower loss breaks ties
        key = (auc if have_val else 0.0, -val_loss)
        if key > best_key:
            best_key, best_state, result.best_epoch = key, net.copy_state(), epoch
    if config.epochs > 0:
        net.load_state(best_state)
    return result


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def normalize_hu(hu):
    return np.clip((np.asarray(hu, dtype=np.float64) - HU_LOW) / (HU_HIGH - HU_LOW), 0.0, 1.0)


def preprocess_case(ct: VoxelVolume, lobes: RegionLabels, prob: VoxelVolume, target_dims=None,
                    target_spacing=(3.0, 1.0, 1.0), scale: str | None = None) -> np.ndarray:
    """Two-channel network input ``(2, D, H, W)``: normalized in-lung HU and opacity probability."""
    if scale is not None:
        target_dims = SCALES[scale]["dims"]
        target_spacing = SCALES[scale]["spacing"]
    if target_dims is None:
        target_dims = SCALES["full"]["dims"]
    same_grid(ct, lobes, prob)
    target_spacing = Spacing.of(target_spacing)
    ct_r = resample_trilinear(ct, target_spacing)
    lobes_r = resample_nearest(lobes, target_spacing)
    prob_r = resample_trilinear(prob, target_spacing)
    lung = (lobes_r.labels >= 1) & (lobes_r.labels <= 5)
    masked = VoxelVolume(np.where(lung, ct_r.data, HU_FILL), target_spacing, "hounsfield")
    bbox = lung_bounding_box(lobes_r)
    ct_c = crop_pad_to(masked, bbox, target_dims, fill=HU_FILL)
    prob_c = crop_pad_to(prob_r, bbox, target_dims, fill=0.0)
    return np.stack([normalize_hu(ct_c.data), prob_c.data.astype(np.float64)]).astype(np.float32)


# ---------------------------------------------------------------------------
# weights file: one JSON header line, then little-endian float32 payload
# ---------------------------------------------------------------------------

def save_weights(net: Net, path) -> None:
    state = net.copy_state()
    names = sorted(state)
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "spec": net.spec.to_json(),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    payload = b"".join(np.ascontiguousarray(state[n], dtype="<f4").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_weights(path) -> Net:
    try:
        blob = Path(path).read_bytes()
        line, _, payload = blob.partition(b"\n")
        header = json.loads(line)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read weights file {path}: {exc}") from exc
    if header.get("format") != WEIGHTS_FORMAT:
        raise ValidationError("not an M3 weights file")
    if header.get("version") != WEIGHTS_VERSION:
        raise ValidationError(f"unsupported weights version {header.get('version')!r}")
    s = header["spec"]
    spec = NetworkSpec(tuple(s["input_dims"]), tuple(s["channels"]), s["n_aniso"], s["leaky_slope"],
                       s["bn_eps"], s["bn_momentum"])
    net = Net(spec)
    arr = np.frombuffer(payload, dtype="<f4")
    need = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if arr.size != need:
        raise ValidationError(f"weights payload has {arr.size} values, expected {need}")
    state, off = {}, 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        state[t["name"]] = arr[off:off + size].reshape(t["shape"]).astype(np.float64)
        off += size
    net.load_state(state)
    return net
