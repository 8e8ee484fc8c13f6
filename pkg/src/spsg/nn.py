"""Small deterministic feed-forward networks in float64.

The networks are thin wrappers around ``torch.nn.Sequential`` built from a
textual layer manifest such as ``"conv:8:5,relu,maxpool:2,dense:10"``.  Only
layers without stochasticity or batch statistics are supported, so forward
passes are pure functions of (parameters, input).
"""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))
CHECKPOINT_MAGIC = b"SPSGNET1"


class ShapeError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    args: tuple = ()

    def __str__(self):
        return ":".join([self.kind, *map(str, self.args)])


def parse_arch(arch: str | list) -> list[LayerSpec]:
    if not isinstance(arch, str):
        return [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in arch]
    layers = []
    for token in arch.replace(" ", "").split(","):
        if not token:
            continue
        kind, *args = token.split(":")
        if kind not in ("dense", "conv", "relu", "maxpool", "flatten"):
            raise ValueError(f"unknown layer kind {kind!r}")
        layers.append(LayerSpec(kind, tuple(int(a) for a in args)))
    return layers


def _build(layers, input_shape):
    """Instantiate torch modules, inferring fan-in from the running shape."""
    modules = []
    shape = tuple(input_shape)
    for i, spec in enumerate(layers):
        where = f"layer {i} ({spec})"
        if spec.kind == "conv":
            out_ch, k = spec.args
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects C×H×W input, got {shape}")
            c, h, w = shape
            if k > h or k > w:
                raise ShapeError(f"{where}: kernel {k} larger than {h}×{w}")
            modules.append(torch.nn.Conv2d(c, out_ch, k))
            shape = (out_ch, h - k + 1, w - k + 1)
        elif spec.kind == "maxpool":
            (k,) = spec.args
            if len(shape) != 3 or shape[1] < k or shape[2] < k:
                raise ShapeError(f"{where}: cannot pool {shape} by {k}")
            modules.append(torch.nn.MaxPool2d(k))
            shape = (shape[0], shape[1] // k, shape[2] // k)
        elif spec.kind == "relu":
            modules.append(torch.nn.ReLU())
        elif spec.kind == "flatten":
            modules.append(torch.nn.Flatten())
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            (out,) = spec.args
            if len(shape) != 1:
                modules.append(torch.nn.Flatten())
                shape = (int(np.prod(shape)),)
            modules.append(torch.nn.Linear(shape[0], out))
            shape = (out,)
    return torch.nn.Sequential(*modules).double(), shape


class Network:
    """Feed-forward classifier with a softmax head.

    Parameters are float64 torch tensors; ``forward`` returns class
    probabilities as a numpy array.
    """

    def __init__(self, arch, input_shape, seed=0):
        self.layers = parse_arch(arch)
        self.input_shape = tuple(int(s) for s in input_shape)
        torch.manual_seed(seed)
        self.module, out_shape = _build(self.layers, self.input_shape)
        if len(out_shape) != 1:
            raise ShapeError(f"network output must be a vector, got {out_shape}")
        self.num_classes = out_shape[0]
        self.clamp_events = 0

    @property
    def arch(self) -> str:
        return ",".join(str(l) for l in self.layers)

    def parameters(self) -> list[torch.Tensor]:
        return list(self.module.parameters())

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_batch(self, batch):
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0]}): expected input {self.input_shape}, "
                f"got {tuple(batch.shape[1:])}"
            )

    def logits(self, batch) -> torch.Tensor:
        x = torch.as_tensor(batch, dtype=torch.float64)
        self._check_batch(x)
        return self.module(x)

    def log_probs(self, batch) -> torch.Tensor:
        return torch.log_softmax(self.logits(batch), dim=1)

    def forward(self, batch) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self.logits(batch), dim=1).numpy()

    __call__ = forward

    def predict(self, batch) -> np.ndarray:
        # np.argmax already breaks ties toward the lowest index
        return np.argmax(self.forward(batch), axis=1)

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.layers = list(self.layers)
        other.input_shape = self.input_shape
        other.num_classes = self.num_classes
        other.clamp_events = 0
        other.module, _ = _build(self.layers, self.input_shape)
        other.module.load_state_dict(self.module.state_dict())
        return other

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for p in self.parameters()])

    def set_flat_params(self, flat):
        flat = np.array(flat, dtype=np.float64)
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[offset:offset + n].reshape(p.shape)))
                offset += n
        if offset != flat.size:
            raise ShapeError(f"expected {offset} parameters, got {flat.size}")

    def fingerprint(self) -> str:
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()[:16]


def forward(net: Network, batch) -> np.ndarray:
    return net.forward(batch)


def clamped_nll(log_probs: torch.Tensor, labels) -> torch.Tensor:
    """Per-sample ``-log(max(y_p, 1e-12))``."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1, 1)
    picked = log_probs.gather(1, labels)[:, 0]
    return -torch.clamp(picked, min=LOG_PROB_FLOOR)


def input_gradients(net: Network, images, labels, create_graph=False):
    """Gradient of ``-log y_p`` w.r.t. each input image (batched).

    With ``create_graph`` the result stays attached to the parameter graph so
    losses built from it can be differentiated again.
    """
    x = torch.as_tensor(images, dtype=torch.float64).detach().clone().requires_grad_(True)
    log_probs = net.log_probs(x)
    labels = torch.as_tensor(labels, dtype=torch.long)
    nll = clamped_nll(log_probs, labels)
    net.clamp_events += int((nll >= -LOG_PROB_FLOOR).sum())
    (grad,) = torch.autograd.grad(nll.sum(), x, create_graph=create_graph)
    return grad, log_probs


def backward_input(net: Network, image, target_label: int) -> np.ndarray:
    """Pixel gradient of ``-log y_p`` for a single image."""
    if not 0 <= int(target_label) < net.num_classes:
        raise ValueError(f"target_label {target_label} outside [0, {net.num_classes})")
    image = np.asarray(image, dtype=np.float64)
    grad, _ = input_gradients(net, image[None], [int(target_label)])
    return grad[0].detach().numpy()


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.5
    decay_factor: float = 0.1
    decay_period: int = 60
    velocity: list = field(default_factory=list)
    epoch: int = 0

    @property
    def current_lr(self) -> float:
        if self.decay_period <= 0:
            return self.learning_rate
        return self.learning_rate * self.decay_factor ** (self.epoch // self.decay_period)

    def step(self, params):
        if not self.velocity:
            self.velocity = [torch.zeros_like(p) for p in params]
        lr = self.current_lr
        with torch.no_grad():
            for p, v in zip(params, self.velocity):
                if p.grad is None:
                    continue
                v.mul_(self.momentum).add_(p.grad)
                p.sub_(lr * v)

    def end_epoch(self):
        self.epoch += 1


def soft_cross_entropy(log_probs: torch.Tensor, targets) -> torch.Tensor:
    targets = torch.as_tensor(targets)
    if targets.ndim == 1:
        return clamped_nll(log_probs, targets).mean()
    targets = targets.to(torch.float64)
    return -(targets * torch.clamp(log_probs, min=LOG_PROB_FLOOR)).sum(dim=1).mean()


def apply_gradients(net: Network, loss: torch.Tensor, opt: OptimizerState) -> float:
    value = float(loss.detach())
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite training loss {value}")
    params = net.parameters()
    for p in params:
        p.grad = None
    loss.backward()
    opt.step(params)
    return value


def train_step(net: Network, batch, targets, opt: OptimizerState) -> float:
    """One momentum-SGD step on mean cross-entropy; returns the pre-update loss.

    ``targets`` is either integer labels (n,) or soft targets (n, K).
    """
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets)
    if len(targets) != len(batch):
        raise ShapeError(f"{len(batch)} samples but {len(targets)} targets")
    loss = soft_cross_entropy(net.log_probs(batch), targets)
    return apply_gradients(net, loss, opt)


def _relative_error(a, b, floor=1e-10):
    scale = np.maximum(np.abs(a), np.abs(b))
    err = np.where(scale > floor, np.abs(a - b) / np.where(scale > floor, scale, 1.0), 0.0)
    return float(err.max()) if err.size else 0.0


def grad_check(net: Network, image, label=None, step=1e-5) -> float:
    """Worst relative error of ``backward_input`` against central differences.

    Entries where both sides are below 1e-10 in magnitude count as exact.
    """
    image = np.asarray(image, dtype=np.float64)
    if label is None:
        label = int(net.predict(image[None])[0])
    analytic = backward_input(net, image, label)
    flat = image.ravel()
    n = flat.size
    plus = np.repeat(flat[None], n, axis=0)
    minus = plus.copy()
    idx = np.arange(n)
    plus[idx, idx] += step
    minus[idx, idx] -= step
    shape = (n, *image.shape)
    with torch.no_grad():
        f_plus = clamped_nll(net.log_probs(plus.reshape(shape)), np.full(n, label)).numpy()
        f_minus = clamped_nll(net.log_probs(minus.reshape(shape)), np.full(n, label)).numpy()
    numeric = ((f_plus - f_minus) / (2 * step)).reshape(image.shape)
    return _relative_error(analytic, numeric)


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(net: Network) -> bytes:
    blocks = [p.detach().numpy().astype("<f8").tobytes() for p in net.parameters()]
    manifest = [
        f"input {' '.join(map(str, net.input_shape))}",
        f"classes {net.num_classes}",
        *(f"layer {l}" for l in net.layers),
        *(f"param {'x'.join(map(str, p.shape))}" for p in net.parameters()),
        "end",
    ]
    head = CHECKPOINT_MAGIC + b"\n" + ("\n".join(manifest) + "\n").encode("ascii")
    return head + b"".join(blocks)


def save_network(net: Network, path):
    Path(path).write_bytes(checkpoint_bytes(net))


def load_network(path) -> Network:
    data = Path(path).read_bytes()
    return network_from_bytes(data)


def network_from_bytes(data: bytes) -> Network:
    stream = io.BytesIO(data)
    if stream.readline().rstrip(b"\n") != CHECKPOINT_MAGIC:
        raise ValueError("not an SPSGNET1 checkpoint")
    input_shape, layers, params, classes = None, [], [], None
    while True:
        line = stream.readline()
        if not line:
            raise ValueError("truncated checkpoint manifest")
        key, _, rest = line.decode("ascii").strip().partition(" ")
        if key == "end":
            break
        if key == "input":
            input_shape = tuple(int(v) for v in rest.split())
        elif key == "classes":
            classes = int(rest)
        elif key == "layer":
            layers.append(rest)
        elif key == "param":
            params.append(tuple(int(v) for v in rest.split("x")))
    net = Network(",".join(layers), input_shape)
    if net.num_classes != classes:
        raise ValueError("manifest class count disagrees with layers")
    expected = [tuple(p.shape) for p in net.parameters()]
    if expected != params:
        raise ValueError(f"parameter manifest {params} does not match layers {expected}")
    n = sum(int(np.prod(s)) for s in params)
    raw = stream.read()
    if len(raw) != 8 * n:
        raise ValueError(f"expected {8 * n} parameter bytes, found {len(raw)}")
    net.set_flat_params(np.frombuffer(raw, dtype="<f8"))
    return net
