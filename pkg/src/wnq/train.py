"""Small deterministic quantization-aware training loop in plain numpy.

Float master weights accumulate SGD-with-momentum updates while every forward
pass uses their quantized image. Layer gradients are written out by hand, and
the gradient w.r.t. the quantized weights is routed back to the master weights
through the chosen method's backward rule (WNQ max-element rule or plain STE).
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wnq.baselines import LayerQuantization, MethodId, quantize_rows
from wnq.metrics import LayerReport, distribution_report, format_layer_record, format_step_record
from wnq.quantizer import QuantConfig
from wnq.tensor_store import LayerKind, WeightTensor


class TrainingDiverged(FloatingPointError):
    pass


class Dataset(str, enum.Enum):
    GaussianBlobs = "blobs"
    TwoSpirals = "spirals"


# -- data -----------------------------------------------------------------------


def gaussian_blobs(n: int = 512, classes: int = 4, dim: int = 2, radius: float = 4.0, seed: int = 0):
    """Unit-variance blobs whose centres sit evenly on a circle in the first two coordinates.

    Any extra dimensions carry pure noise.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centers[:, 1] = radius * np.sin(angles)
    y = np.arange(n) % classes
    x = centers[y] + rng.standard_normal((n, dim))
    perm = rng.permutation(n)
    return x[perm], y[perm]


def two_spirals(n: int = 512, noise: float = 0.3, seed: int = 0):
    rng = np.random.default_rng(seed)
    half = n // 2
    t = np.sqrt(rng.uniform(size=n)) * 3 * np.pi
    sign = np.where(np.arange(n) < half, 1.0, -1.0)
    x = np.stack([sign * t * np.cos(t), sign * t * np.sin(t)], axis=1) / np.pi
    x += noise * rng.standard_normal(x.shape)
    y = (np.arange(n) >= half).astype(np.int64)
    perm = rng.permutation(n)
    return x[perm], y[perm]


# -- layers -----------------------------------------------------------------------


class Dense:
    kind = LayerKind.FullyConnected

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "fc"):
        self.name = name
        self.weight = rng.standard_normal((n_out, n_in)) * math.sqrt(2.0 / n_in)
        self.bias = np.zeros(n_out)

    def forward(self, x, wq):
        return x @ wq.T + self.bias, x

    def backward(self, dy, x, wq):
        return dy @ wq, dy.T @ x, dy.sum(axis=0)


class Conv2d:
    """Stride-1, unpadded convolution on (B, C, H, W) inputs."""

    kind = LayerKind.Conv

    def __init__(self, c_in: int, c_out: int, size: int, rng: np.random.Generator, name: str = "conv"):
        self.name = name
        self.size = size
        fan_in = c_in * size * size
        self.weight = rng.standard_normal((c_out, c_in, size, size)) * math.sqrt(2.0 / fan_in)
        self.bias = np.zeros(c_out)

    def _cols(self, x):
        b, c, h, w = x.shape
        s = self.size
        win = sliding_window_view(x, (s, s), axis=(2, 3))  # (B, C, Ho, Wo, s, s)
        ho, wo = win.shape[2], win.shape[3]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * s * s), ho, wo

    def forward(self, x, wq):
        cols, ho, wo = self._cols(x)
        out = cols @ wq.reshape(wq.shape[0], -1).T + self.bias
        return out.transpose(0, 2, 1).reshape(x.shape[0], wq.shape[0], ho, wo), (x.shape, cols)

    def backward(self, dy, saved, wq):
        shape, cols = saved
        b, c, h, w = shape
        s = self.size
        n_out = wq.shape[0]
        dyr = dy.reshape(b, n_out, -1).transpose(0, 2, 1)  # (B, Ho*Wo, N)
        dw = np.einsum("bpn,bpk->nk", dyr, cols).reshape(wq.shape)
        db = dyr.sum(axis=(0, 1))
        dcols = (dyr @ wq.reshape(n_out, -1)).reshape(b, h - s + 1, w - s + 1, c, s, s)
        dx = np.zeros(shape)
        ho, wo = h - s + 1, w - s + 1
        for i in range(s):
            for j in range(s):
                dx[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, dw, db


class ReLU:
    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, dy, mask):
        return dy * mask


class GlobalAvgPool:
    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, shape):
        return np.broadcast_to(dy[:, :, None, None] / (shape[2] * shape[3]), shape).copy()


def _is_param(layer) -> bool:
    return hasattr(layer, "weight")


@dataclass
class TinyNet:
    """A sequential network with float master weights and per-layer warm-start state."""

    layers: list
    input_shape: tuple | None = None
    method: MethodId = MethodId.Fp
    qconfig: QuantConfig = field(default_factory=QuantConfig)
    quant_state: dict = field(default_factory=dict)

    @property
    def param_layers(self) -> list:
        return [layer for layer in self.layers if _is_param(layer)]

    def set_method(self, method: MethodId, qconfig: QuantConfig) -> None:
        self.method = MethodId(method)
        self.qconfig = qconfig
        self.quant_state = {}

    def master_tensors(self) -> dict[str, WeightTensor]:
        return {layer.name: WeightTensor.from_array(layer.weight, layer.kind) for layer in self.param_layers}

    def checksum(self) -> int:
        h = 0
        for layer in self.param_layers:
            h = hash((h, layer.weight.tobytes(), layer.bias.tobytes()))
        return h

    def quantize(self, layer, update: bool) -> LayerQuantization:
        """Quantize one layer's master weights; ``update`` stores the new alpha as warm start."""
        w = layer.weight.reshape(layer.weight.shape[0], -1)
        warm = self.quant_state.get(layer.name)
        deq, rq = quantize_rows(w, self.method, self.qconfig, warm)
        if update and rq is not None:
            self.quant_state[layer.name] = rq.alpha.copy()
        return LayerQuantization(self.method, self.qconfig.bits, layer.kind, layer.weight.shape, deq, rq, w)


def mlp(n_in: int, hidden: int, n_out: int, rng: np.random.Generator) -> TinyNet:
    return TinyNet([Dense(n_in, hidden, rng, "fc1"), ReLU(), Dense(hidden, n_out, rng, "fc2")])


def conv_net(side: int, channels: int, n_out: int, rng: np.random.Generator, size: int = 3) -> TinyNet:
    """Conv -> ReLU -> GlobalAvgPool -> FC on inputs reshaped to (1, side, side)."""
    layers = [Conv2d(1, channels, size, rng, "conv1"), ReLU(), GlobalAvgPool(), Dense(channels, n_out, rng, "fc1")]
    return TinyNet(layers, input_shape=(1, side, side))


# -- steps -------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -float(logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def forward_with_weights(net: TinyNet, x: np.ndarray, weights: dict[str, np.ndarray]):
    """Run the network with explicit effective weights. Returns (logits, per-layer saved state)."""
    h = x if net.input_shape is None else x.reshape((x.shape[0],) + net.input_shape)
    saved = []
    for layer in net.layers:
        if _is_param(layer):
            h, s = layer.forward(h, weights[layer.name])
        else:
            h, s = layer.forward(h)
        saved.append(s)
    return h, saved


@dataclass
class ForwardCache:
    y: np.ndarray
    saved: list
    logits_grad: np.ndarray
    quantized: dict


def forward_step(net: TinyNet, x: np.ndarray, y: np.ndarray, update: bool = True) -> tuple[float, ForwardCache]:
    """Quantize every layer, run the batch, and return the mean cross-entropy."""
    quantized = {layer.name: net.quantize(layer, update) for layer in net.param_layers}
    weights = {name: q.dequantized.reshape(q.shape) for name, q in quantized.items()}
    logits, saved = forward_with_weights(net, x, weights)
    loss, dlogits = softmax_cross_entropy(logits, y)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} (method={net.method.value})")
    return loss, ForwardCache(y, saved, dlogits, quantized)


def backward_step(net: TinyNet, cache: ForwardCache) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Gradients w.r.t. the master weights and biases, keyed by layer name."""
    grads = {}
    dh = cache.logits_grad
    for layer, saved in zip(reversed(net.layers), reversed(cache.saved)):
        if _is_param(layer):
            q = cache.quantized[layer.name]
            wq = q.dequantized.reshape(q.shape)
            dh, dwq, db = layer.backward(dh, saved, wq)
            assert dwq.shape == layer.weight.shape
            dw = q.backward(dwq.reshape(q.weights.shape)).reshape(layer.weight.shape)
            grads[layer.name] = (dw, db)
        else:
            dh = layer.backward(dh, saved)
    return grads


class SGD:
    """SGD with momentum: v <- mu v + g; w <- w - lr v."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, net: TinyNet, grads: dict) -> None:
        for layer in net.param_layers:
            dw, db = grads[layer.name]
            if self.weight_decay:
                dw = dw + self.weight_decay * layer.weight
            vw, vb = self.velocity.get(layer.name, (0.0, 0.0))
            vw = self.momentum * vw + dw
            vb = self.momentum * vb + db
            self.velocity[layer.name] = (vw, vb)
            layer.weight = layer.weight - self.lr * vw
            layer.bias = layer.bias - self.lr * vb


def train_step(net: TinyNet, opt: SGD, x: np.ndarray, y: np.ndarray) -> float:
    loss, cache = forward_step(net, x, y)
    opt.step(net, backward_step(net, cache))
    return loss


def accuracy(net: TinyNet, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy with quantized weights; warm-start state is left untouched."""
    weights = {}
    for layer in net.param_layers:
        q = net.quantize(layer, update=False)
        weights[layer.name] = q.dequantized.reshape(q.shape)
    logits, _ = forward_with_weights(net, x, weights)
    return float(np.mean(np.argmax(logits, axis=1) == y))


# -- experiments ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    method: MethodId = MethodId.Wnq
    bits: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    batch: int = 64
    seed: int = 0
    dataset: Dataset = Dataset.GaussianBlobs
    n_points: int = 512
    classes: int = 4
    input_dim: int = 16
    hidden: int = 32
    arch: str = "mlp"
    pretrain_steps: int = 0
    pretrain_lr: float = 0.1
    weight_decay: float = 0.0
    init_iters: int = 20
    log_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", MethodId(self.method))
        object.__setattr__(self, "dataset", Dataset(self.dataset))
        if self.steps < 0 or self.pretrain_steps < 0 or self.batch < 1:
            raise ValueError("steps and batch must be positive")
        if self.arch not in ("mlp", "conv"):
            raise ValueError(f"unknown arch {self.arch!r}")
        QuantConfig(bits=self.bits, init_iters=self.init_iters)

    @property
    def qconfig(self) -> QuantConfig:
        return QuantConfig(bits=self.bits, init_iters=self.init_iters, train_iters=1)


def _streams(seed: int):
    data, init, pre, train = np.random.SeedSequence(seed).spawn(4)
    return data, np.random.default_rng(init), np.random.default_rng(pre), np.random.default_rng(train)


def make_dataset(config: TrainConfig):
    data_seed = _streams(config.seed)[0]
    seed = int(data_seed.generate_state(1)[0])
    if config.dataset is Dataset.GaussianBlobs:
        return gaussian_blobs(config.n_points, config.classes, config.input_dim, seed=seed)
    return two_spirals(config.n_points, seed=seed)


def n_classes(config: TrainConfig) -> int:
    return config.classes if config.dataset is Dataset.GaussianBlobs else 2


def build_net(config: TrainConfig, rng: np.random.Generator) -> TinyNet:
    n_in = config.input_dim if config.dataset is Dataset.GaussianBlobs else 2
    if config.arch == "conv":
        side = math.isqrt(n_in)
        if side * side != n_in or side < 3:
            raise ValueError("conv arch needs a square input_dim of at least 9")
        return conv_net(side, config.hidden, n_classes(config), rng)
    return mlp(n_in, config.hidden, n_classes(config), rng)


def _batches(rng: np.random.Generator, n: int, batch: int):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield order[start : start + batch]


def _fit(net, opt, x, y, steps, rng, batch, on_log=None, log_every=1):
    losses = []
    it = _batches(rng, x.shape[0], min(batch, x.shape[0]))
    for step in range(1, steps + 1):
        idx = next(it)
        losses.append(train_step(net, opt, x[idx], y[idx]))
        if on_log is not None and (step % log_every == 0 or step == steps):
            on_log(step, float(np.mean(losses)))
            losses = []


def pretrain(config: TrainConfig) -> TinyNet:
    """Full-precision training from the seeded initialization; the fine-tuning starting point."""
    _, init_rng, pre_rng, _ = _streams(config.seed)
    x, y = make_dataset(config)
    net = build_net(config, init_rng)
    net.set_method(MethodId.Fp, config.qconfig)
    _fit(net, SGD(config.pretrain_lr, config.momentum, config.weight_decay), x, y, config.pretrain_steps, pre_rng, config.batch)
    return net


@dataclass
class TrainResult:
    config: TrainConfig
    net: TinyNet
    log: list[str]
    reports: dict[str, LayerReport]
    accuracy: float
    pretrain_accuracy: float | None = None

    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log)


def layer_reports(net: TinyNet, step: int | None = None) -> dict[str, LayerReport]:
    out = {}
    for layer in net.param_layers:
        t = WeightTensor.from_array(layer.weight, layer.kind)
        method = net.method
        q = None if method is MethodId.Fp else net.quantize(layer, update=False)
        out[layer.name] = distribution_report(t, method, net.qconfig.bits, quantized=q, name=layer.name, step=step)
    return out


def run_experiment(config: TrainConfig, net: TinyNet | None = None) -> TrainResult:
    """Train ``config.steps`` steps with ``config.method`` and log step and layer records.

    ``net`` is a starting network (it is copied, not modified). Without it the
    network is built from the seed and, if ``pretrain_steps`` > 0, first trained
    in full precision.
    """
    x, y = make_dataset(config)
    _, _, _, train_rng = _streams(config.seed)
    net = pretrain(config) if net is None else copy.deepcopy(net)
    pre_acc = None
    log = []
    if config.pretrain_steps:
        net.set_method(MethodId.Fp, config.qconfig)
        pre_acc = accuracy(net, x, y)
        log.append(format_step_record("pretrain", config.pretrain_steps, float("nan"), pre_acc))
    net.set_method(config.method, config.qconfig)
    log_every = config.log_every or max(1, x.shape[0] // config.batch)

    def on_log(step, loss):
        log.append(format_step_record("train", step, loss, accuracy(net, x, y)))
        for report in layer_reports(net, step).values():
            log.append(format_layer_record(report))

    _fit(net, SGD(config.lr, config.momentum, config.weight_decay), x, y, config.steps, train_rng, config.batch, on_log, log_every)
    reports = layer_reports(net, config.steps)
    return TrainResult(config, net, log, reports, accuracy(net, x, y), pre_acc)


def with_method(config: TrainConfig, method: MethodId) -> TrainConfig:
    return replace(config, method=MethodId(method))
