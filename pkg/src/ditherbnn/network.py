"""Compact binary CNN: binary conv + batch norm + binary activation blocks.

Forward convolutions use {-1,+1} weight views of real latent weights;
backward passes gradients through the clip straight-through surrogate.
Every layer also supports a `surrogate` forward (binarizers replaced by
clip) so analytic gradients can be checked against finite differences.

Public entry points take (batch, channels, height, width) float32 arrays;
internally layers run channel-major, (channels, batch, height, width), so
each convolution is a single large matrix product over its patch matrix.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .activation import tile
from .bitconv import _ext
from .threshold_scale import (complement_kernel, kernel_from_doc,
                              half_gaussian_kmeans, load_kernel_json,
                              shift_kernel)

CHECKPOINT_VERSION = 1
BN_SETTINGS = ("0/1", "beta/1", "0/gamma", "beta/gamma")
ACTIVATIONS = ("sign", "design2d", "design3d-s", "design3d-c", "relu")

# floor for batch-norm gamma when re-scaling thresholds; gamma can drift
# non-positive during training
GAMMA_FLOOR = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    channels: tuple = (32, 64, 128, 128)
    k: int = 3
    activation: str = "sign"
    bn_setting: str = "0/1"
    thresholds: str | None = None
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    seed: int = 0
    epochs: int = 60
    batch_size: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum_bn: float = 0.1
    augment: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bn_setting not in BN_SETTINGS:
            raise ValueError(f"unknown bn_setting {self.bn_setting!r}")
        if self.activation.startswith("design") and self.thresholds is None:
            raise ValueError("design activations need a threshold file")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    clip_unit: bool = False  # latent binary weights are clipped to [-1, 1]


def _im2col(x: np.ndarray, k: int, pad_value: float) -> np.ndarray:
    """(C, B, H, W) -> (C*k*k, B*H*W) patch matrix with same-size padding."""
    if _ext is not None:
        return _ext.im2col_f32(np.ascontiguousarray(x, np.float32), k, pad_value)
    c, b, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return np.ascontiguousarray(
        v.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, b * h * w), np.float32)


def _col2im(dcols: np.ndarray, c: int, b: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of _im2col."""
    if _ext is not None:
        return _ext.col2im_f32(np.ascontiguousarray(dcols, np.float32),
                               c, b, h, w, k)
    p = k // 2
    d = dcols.reshape(c, k, k, b, h, w)
    dxp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=np.float32)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di : di + h, dj : dj + w] += d[:, di, dj]
    return dxp[:, :, p : p + h, p : p + w]


class Conv2d:
    """Same-size stride-1 convolution; binary mode binarizes the weights
    and pads with -1 (the binary background value)."""

    def __init__(self, cin: int, cout: int, k: int, rng, binary: bool):
        scale = np.sqrt(2.0 / (cin * k * k))
        w = rng.standard_normal((cout, cin * k * k)) * scale
        self.w = Param(w.astype(np.float32), np.zeros((cout, cin * k * k), np.float32),
                       clip_unit=binary)
        self.cin, self.cout, self.k = cin, cout, k
        self.binary = binary
        self.pad_value = -1.0 if binary else 0.0

    def effective_weights(self, surrogate: bool = False) -> np.ndarray:
        if not self.binary:
            return self.w.value
        if surrogate:
            return np.clip(self.w.value, -1.0, 1.0)
        return np.where(self.w.value >= 0, np.float32(1.0), np.float32(-1.0))

    def forward(self, x: np.ndarray, surrogate: bool = False) -> np.ndarray:
        self._shape = x.shape
        _, b, h, w = x.shape
        self._cols = _im2col(x, self.k, self.pad_value)
        self._weff = self.effective_weights(surrogate)
        out = self._weff @ self._cols  # (cout, B*H*W)
        return out.reshape(self.cout, b, h, w)

    def backward(self, dout: np.ndarray, need_dx: bool = True):
        _, b, h, w = self._shape
        dmat = dout.reshape(self.cout, -1)
        dw = dmat @ self._cols.T
        if self.binary:
            dw *= np.abs(self.w.value) <= 1.0
        self.w.grad += dw
        if not need_dx:
            return None
        dcols = self._weff.T @ dmat
        return _col2im(dcols, self.cin, b, h, w, self.k)

    def params(self):
        return [self.w]


class BatchNorm:
    """Per-channel batch norm with a 4-way learnable-parameter setting."""

    def __init__(self, c: int, setting: str, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.mu = np.zeros(c, np.float32)
        self.var = np.ones(c, np.float32)
        self.eps = eps
        self.momentum = momentum
        self.setting = setting
        self.learn_beta = setting in ("beta/1", "beta/gamma")
        self.learn_gamma = setting in ("0/gamma", "beta/gamma")
        self.beta = Param(np.zeros(c, np.float32), np.zeros(c, np.float32))
        self.gamma = Param(np.ones(c, np.float32), np.zeros(c, np.float32))

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if training:
            m = x.mean(axis=(1, 2, 3))
            v = x.var(axis=(1, 2, 3))
            self.mu = (1 - self.momentum) * self.mu + self.momentum * m
            self.var = (1 - self.momentum) * self.var + self.momentum * v
        else:
            m, v = self.mu, self.var
        self._training = training
        self._inv = (1.0 / np.sqrt(v + self.eps)).astype(np.float32)
        self._xhat = (x - m[:, None, None, None]) * self._inv[:, None, None, None]
        g = self.gamma.value[:, None, None, None]
        b = self.beta.value[:, None, None, None]
        return self._xhat * g + b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self.learn_gamma:
            self.gamma.grad += (dout * self._xhat).sum(axis=(1, 2, 3))
        if self.learn_beta:
            self.beta.grad += dout.sum(axis=(1, 2, 3))
        dxhat = dout * self.gamma.value[:, None, None, None]
        inv = self._inv[:, None, None, None]
        if not self._training:
            return dxhat * inv
        n = dout.shape[1] * dout.shape[2] * dout.shape[3]
        s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
        s2 = (dxhat * self._xhat).sum(axis=(1, 2, 3), keepdims=True)
        return (inv / n) * (n * dxhat - s1 - self._xhat * s2)

    def params(self):
        out = []
        if self.learn_beta:
            out.append(self.beta)
        if self.learn_gamma:
            out.append(self.gamma)
        return out


class SignAct:
    """Binarizer with clip STE backward; surrogate forward is clip itself."""

    def forward(self, x: np.ndarray, surrogate: bool = False) -> np.ndarray:
        self._pre = x
        if surrogate:
            return np.clip(x, -1.0, 1.0)
        return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g * (np.abs(self._pre) <= 1.0)

    def params(self):
        return []


class DeSignAct(SignAct):
    """Shifted binarizer with a per-channel tiled threshold pattern.

    `gamma` holds the preceding batch-norm scales; thresholds are
    re-scaled by it every forward so they track the normalized
    distribution they were designed for. Thresholds get no gradient.
    """

    def __init__(self, base_kernels: list[np.ndarray]):
        self.base = [np.asarray(b, dtype=np.float32) for b in base_kernels]
        self.gamma: np.ndarray | None = None

    def thresholds(self, c: int, h: int, w: int) -> np.ndarray:
        th = np.stack([tile(self.base[i % len(self.base)], h, w)
                       for i in range(c)]).astype(np.float32)
        if self.gamma is not None:
            scale = np.maximum(self.gamma, GAMMA_FLOOR).astype(np.float32)
            th = th * scale[:, None, None]
        return th

    def forward(self, x: np.ndarray, surrogate: bool = False) -> np.ndarray:
        c, _, h, w = x.shape
        return super().forward(x - self.thresholds(c, h, w)[:, None], surrogate)


class ReluAct:
    def forward(self, x: np.ndarray, surrogate: bool = False) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g * self._mask

    def params(self):
        return []


class MaxPool2:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        if _ext is not None:
            out, self._idx = _ext.maxpool2_fwd_f32(
                np.ascontiguousarray(x, np.float32))
            return out
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        r = x[:, :, : ho * 2, : wo * 2].reshape(b, c, ho, 2, wo, 2)
        r = r.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        self._idx = r.argmax(axis=-1).astype(np.uint8)
        return np.take_along_axis(r, self._idx[..., None].astype(np.intp),
                                  axis=-1)[..., 0]

    def backward(self, g: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        if _ext is not None:
            return _ext.maxpool2_bwd_f32(np.ascontiguousarray(g, np.float32),
                                         self._idx, h, w)
        ho, wo = h // 2, w // 2
        z = np.zeros((b, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(z, self._idx[..., None].astype(np.intp),
                          g[..., None], axis=-1)
        z = z.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((b, c, h, w), dtype=g.dtype)
        dx[:, :, : ho * 2, : wo * 2] = z.reshape(b, c, ho * 2, wo * 2)
        return dx


class Linear:
    def __init__(self, cin: int, cout: int, rng):
        scale = np.sqrt(2.0 / cin)
        self.w = Param((rng.standard_normal((cout, cin)) * scale).astype(np.float32),
                       np.zeros((cout, cin), np.float32))
        self.b = Param(np.zeros(cout, np.float32), np.zeros(cout, np.float32))

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, g: np.ndarray) -> np.ndarray:
        self.w.grad += g.T @ self._x
        self.b.grad += g.sum(axis=0)
        return g @ self.w.value

    def params(self):
        return [self.w, self.b]


def softmax_ce(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-12)).mean()
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def _load_threshold_bases(config: ModelConfig) -> list[np.ndarray]:
    """Per-channel base threshold kernels (real-valued) from a kernel file."""
    doc = load_kernel_json(config.thresholds)
    t = kernel_from_doc(doc)
    if "level_thresholds" in doc:
        boundaries = np.asarray(doc["level_thresholds"], dtype=np.float64)
    else:
        boundaries = half_gaussian_kmeans(t.levels.n, seed=config.seed).boundaries

    def scaled(kernel) -> np.ndarray:
        return boundaries[kernel.level_indices()]

    if config.activation == "design2d":
        return [scaled(t)]
    if config.activation == "design3d-s":
        return [scaled(shift_kernel(t, c)) for c in range(t.levels.n)]
    if config.activation == "design3d-c":
        return [scaled(t), scaled(complement_kernel(t))]
    raise ValueError(f"no thresholds needed for {config.activation}")


class BinaryCNN:
    """First conv real-valued, then binary conv blocks, real classifier.

    Each block is conv -> batch norm -> activation -> 2x2 max pool; pooling
    stops once the spatial size would drop below 2.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        bases = (_load_threshold_bases(config)
                 if config.activation.startswith("design") else None)
        self.blocks = []
        cin = config.in_channels
        size = config.image_size
        for i, cout in enumerate(config.channels):
            conv = Conv2d(cin, cout, config.k, rng, binary=(i > 0))
            bn = BatchNorm(cout, config.bn_setting, momentum=config.momentum_bn)
            if config.activation == "relu":
                act = ReluAct()
            elif bases is not None:
                act = DeSignAct(bases)
            else:
                act = SignAct()
            pool = MaxPool2() if size >= 4 else None
            if pool is not None:
                size //= 2
            self.blocks.append((conv, bn, act, pool))
            cin = cout
        self.classifier = Linear(cin * size * size, config.num_classes, rng)

    def forward(self, x: np.ndarray, training: bool = False,
                surrogate: bool = False) -> np.ndarray:
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3), np.float32)
        for conv, bn, act, pool in self.blocks:
            h = conv.forward(h, surrogate=surrogate)
            h = bn.forward(h, training=training)
            if isinstance(act, DeSignAct):
                act.gamma = bn.gamma.value
            h = act.forward(h, surrogate=surrogate) if not isinstance(act, ReluAct) \
                else act.forward(h)
            if pool is not None:
                h = pool.forward(h)
        self._feat_shape = h.shape
        feats = h.transpose(1, 0, 2, 3).reshape(h.shape[1], -1)
        return self.classifier.forward(feats)

    def backward(self, dlogits: np.ndarray):
        c, b, hh, ww = self._feat_shape
        g = self.classifier.backward(dlogits)
        g = g.reshape(b, c, hh, ww).transpose(1, 0, 2, 3)
        for i, (conv, bn, act, pool) in reversed(list(enumerate(self.blocks))):
            if pool is not None:
                g = pool.backward(g)
            g = act.backward(g)
            g = bn.backward(g)
            # the input image needs no gradient
            g = conv.backward(g, need_dx=(i > 0))
        return g

    def params(self) -> list[Param]:
        out = []
        for conv, bn, act, _ in self.blocks:
            out += conv.params() + bn.params() + act.params()
        return out + self.classifier.params()

    def zero_grads(self) -> None:
        for p in self.params():
            p.grad[...] = 0.0

    def inspect(self, x: np.ndarray, layer: int):
        """Eval-mode forward capturing one block's conv and bn outputs."""
        if not 0 <= layer < len(self.blocks):
            raise IndexError(f"layer {layer} out of range")
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3), np.float32)
        for i, (conv, bn, act, pool) in enumerate(self.blocks):
            xc = conv.forward(h)
            xs = bn.forward(xc, training=False)
            if i == layer:
                return xc.transpose(1, 0, 2, 3), xs.transpose(1, 0, 2, 3)
            if isinstance(act, DeSignAct):
                act.gamma = bn.gamma.value
            h = act.forward(xs)
            if pool is not None:
                h = pool.forward(h)
        raise AssertionError("unreachable")


class Adam:
    def __init__(self, params: list[Param], lr: float):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.value -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if p.clip_unit:
                np.clip(p.value, -1.0, 1.0, out=p.value)


class SGD:
    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.vel = [np.zeros_like(p.value) for p in params]

    def step(self, lr_scale: float = 1.0) -> None:
        lr = self.lr * lr_scale
        for p, v in zip(self.params, self.vel):
            v *= self.momentum
            v -= lr * p.grad
            p.value += v
            if p.clip_unit:
                np.clip(p.value, -1.0, 1.0, out=p.value)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # (epoch, train_acc, test_acc, loss)
    best_epoch: int = -1
    best_acc: float = 0.0

    def add(self, epoch: int, train_acc: float, test_acc: float, loss: float):
        self.rows.append((epoch, train_acc, test_acc, loss))
        if self.best_epoch < 0 or test_acc > self.best_acc:
            self.best_acc = test_acc
            self.best_epoch = epoch

    @property
    def last_acc(self) -> float:
        return self.rows[-1][2]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_acc,test_acc,loss\n")
            for e, tr, te, lo in self.rows:
                fh.write(f"{e},{tr:.4f},{te:.4f},{lo:.6f}\n")


def to_arrays(images, stats):
    """Standardize images with train-split stats; returns (X, y)."""
    x = np.stack([img.channels for img in images]).astype(np.float32)
    mean = stats.mean.astype(np.float32)[None, :, None, None]
    std = np.maximum(stats.std.astype(np.float32), 1e-8)[None, :, None, None]
    return (x - mean) / std, np.array([img.label for img in images], dtype=np.int64)


def _augment_batch(x: np.ndarray, rng) -> np.ndarray:
    """Horizontal flip + 4-pixel-pad random crop."""
    b, _, h, w = x.shape
    flip = rng.random(b) < 0.5
    x = x.copy()
    x[flip] = x[flip, :, :, ::-1]
    xp = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    oy = rng.integers(0, 9, size=b)
    ox = rng.integers(0, 9, size=b)
    return np.stack([xp[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
                     for i in range(b)])


def evaluate(model: BinaryCNN, x: np.ndarray, y: np.ndarray,
             batch_size: int = 200) -> float:
    """Deterministic eval-mode top-1 accuracy."""
    correct = 0
    for i in range(0, len(x), batch_size):
        logits = model.forward(x[i : i + batch_size], training=False)
        correct += int((logits.argmax(axis=1) == y[i : i + batch_size]).sum())
    return correct / len(x)


def train(config: ModelConfig, data, progress=None):
    """Minibatch STE training; returns (model, TrainReport, best_state)."""
    model = BinaryCNN(config)
    rng = np.random.default_rng(config.seed + 1)
    xtr, ytr = to_arrays(data.train, data.stats)
    xte, yte = to_arrays(data.test, data.stats)
    opt_cls = {"adam": Adam, "sgd": SGD}[config.optimizer]
    opt = opt_cls(model.params(), config.lr)
    report = TrainReport()
    best_state = None
    n = len(xtr)
    for epoch in range(config.epochs):
        # cosine learning-rate decay
        lr_scale = 0.5 * (1 + np.cos(np.pi * epoch / max(config.epochs, 1)))
        order = rng.permutation(n)
        correct, loss_sum, batches = 0, 0.0, 0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            xb, yb = xtr[idx], ytr[idx]
            if config.augment:
                xb = _augment_batch(xb, rng)
            model.zero_grads()
            logits = model.forward(xb, training=True)
            loss, dlogits = softmax_ce(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss {loss} at epoch {epoch}")
            model.backward(dlogits)
            opt.step(lr_scale)
            correct += int((logits.argmax(axis=1) == yb).sum())
            loss_sum += float(loss)
            batches += 1
        test_acc = evaluate(model, xte, yte)
        report.add(epoch, correct / n, test_acc, loss_sum / batches)
        if report.best_epoch == epoch:
            best_state = state_bytes(model)
        if progress is not None:
            progress(epoch, report)
    return model, report, best_state


def _state_arrays(model: BinaryCNN) -> dict:
    arrays = {}
    for i, p in enumerate(model.params()):
        arrays[f"param_{i}"] = p.value
    for i, (_, bn, _, _) in enumerate(model.blocks):
        arrays[f"bn_{i}_mu"] = bn.mu
        arrays[f"bn_{i}_var"] = bn.var
    return arrays


def state_bytes(model: BinaryCNN) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **_state_arrays(model))
    return buf.getvalue()


def save_checkpoint(model: BinaryCNN, path) -> None:
    meta = np.array([CHECKPOINT_VERSION], dtype=np.int32)
    cfg = np.frombuffer(model.config.to_json().encode(), dtype=np.uint8)
    chash = np.frombuffer(model.config.hash().encode(), dtype=np.uint8)
    np.savez(path, __version__=meta, __config__=cfg, __config_hash__=chash,
             **_state_arrays(model))


def _restore_state(model: BinaryCNN, npz) -> None:
    for i, p in enumerate(model.params()):
        p.value[...] = npz[f"param_{i}"]
    for i, (_, bn, _, _) in enumerate(model.blocks):
        bn.mu = npz[f"bn_{i}_mu"].copy()
        bn.var = npz[f"bn_{i}_var"].copy()


def restore_state_bytes(model: BinaryCNN, state: bytes) -> None:
    with np.load(io.BytesIO(state)) as npz:
        _restore_state(model, npz)


def load_checkpoint(path) -> BinaryCNN:
    with np.load(path) as npz:
        version = int(npz["__version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(bytes(npz["__config__"]).decode())
        model = BinaryCNN(config)
        _restore_state(model, npz)
    return model
