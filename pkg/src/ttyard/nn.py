"""Minimal reverse-mode autodiff engine for ResNet-style models.

Layers cache what their backward pass needs during forward; backward walks the
same structure in reverse and accumulates parameter gradients.  Convolution is
realized as patch gather + matrix multiply (im2col), which keeps the math
testable against loop-nest oracles and makes MAC accounting exact.

Single-threaded execution is deterministic for a fixed seed; batch order and
reduction order are fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops


class Parameter:
    """Trainable array with gradient and momentum state."""

    def __init__(self, data, name="", weight_decay=True, clamp01=False):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.name = name
        self.weight_decay = weight_decay
        self.clamp01 = clamp01

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    def __init__(self, name=""):
        self.name = name
        self._params = {}
        self._buffers = {}

    def add_param(self, key, data, **flags):
        p = Parameter(data, name=f"{self.name}.{key}" if self.name else key, **flags)
        self._params[key] = p
        return p

    def children(self):
        return []

    def parameters(self):
        yield from self._params.values()
        for child in self.children():
            yield from child.parameters()

    def named_state(self, prefix=""):
        """(name, array) pairs for all parameters and buffers, depth first."""
        base = self.name or prefix
        for key, p in self._params.items():
            yield (f"{base}.{key}" if base else key), p.data
        for key, b in self._buffers.items():
            yield (f"{base}.{key}" if base else key), b
        for i, child in enumerate(self.children()):
            yield from child.named_state(f"{base}.{i}" if base else str(i))

    def load_state(self, entries: dict, prefix=""):
        base = self.name or prefix
        for key, p in self._params.items():
            full = f"{base}.{key}" if base else key
            if full in entries:
                p.data[...] = entries[full].reshape(p.data.shape)
        for key in self._buffers:
            full = f"{base}.{key}" if base else key
            if full in entries:
                self._buffers[key][...] = entries[full].reshape(self._buffers[key].shape)
        for i, child in enumerate(self.children()):
            child.load_state(entries, f"{base}.{i}" if base else str(i))

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError

    def _need_cache(self, cache):
        if cache is None:
            raise RuntimeError(f"backward before forward in {type(self).__name__} "
                               f"{self.name!r}")
        return cache


def kaiming_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """2D convolution with optional groups and a shared-group-kernel mode.

    In shared mode one kernel of shape (C_in/groups, l, l) is reused by every
    group and each group emits one output channel, so out_channels == groups
    and the kernel gradient is the sum of the per-group gradients.
    """

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 groups=1, shared_kernel=False, bias=False, rng=None,
                 dtype=np.float32, name=""):
        super().__init__(name)
        if in_channels % groups:
            raise ValueError("in_channels must divide by groups")
        if shared_kernel and out_channels != groups:
            raise ValueError("shared kernel implies out_channels == groups")
        if not shared_kernel and out_channels % groups:
            raise ValueError("out_channels must divide by groups")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.shared_kernel = shared_kernel
        cpg = in_channels // groups
        fan_in = cpg * kernel * kernel
        if rng is None:
            rng = np.random.default_rng(0)
        wshape = (cpg, kernel, kernel) if shared_kernel \
            else (out_channels, cpg, kernel, kernel)
        self.weight = self.add_param("weight", kaiming_normal(rng, wshape, fan_in, dtype))
        self.bias = self.add_param("bias", np.zeros(out_channels, dtype=dtype),
                                   weight_decay=False) if bias else None
        self._cache = None

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"conv {self.name!r} expects {self.in_channels} "
                             f"channels, got {c}")
        l, g = self.kernel, self.groups
        cols, oh, ow = ops.im2col(x, l, self.stride, self.padding)
        if g == 1:
            colsg = cols
            out = np.matmul(self.weight.data.reshape(self.out_channels, -1), cols)
        else:
            colsg = cols.reshape(n, g, (c // g) * l * l, oh * ow)
            if self.shared_kernel:
                wg = self.weight.data.reshape(1, 1, 1, -1)
            else:
                wg = self.weight.data.reshape(g, self.out_channels // g, -1)[None]
            out = np.matmul(wg, colsg)
        out = out.reshape(n, self.out_channels, oh, ow)
        if self.bias is not None:
            out = out + self.bias.data[None, :, None, None]
        self._cache = (colsg, x.shape, oh, ow)
        return out

    def backward(self, gout):
        colsg, x_shape, oh, ow = self._need_cache(self._cache)
        n, c = x_shape[0], x_shape[1]
        l, g = self.kernel, self.groups
        if g == 1:
            g2 = gout.reshape(n, self.out_channels, oh * ow)
            dw = np.matmul(g2, colsg.swapaxes(1, 2)).sum(axis=0)
            self.weight.grad += dw.reshape(self.weight.data.shape)
            dcols = np.matmul(self.weight.data.reshape(self.out_channels, -1).T, g2)
        else:
            g2 = gout.reshape(n, g, self.out_channels // g, oh * ow)
            dw = np.matmul(g2, colsg.swapaxes(2, 3))
            if self.shared_kernel:
                dw = dw.sum(axis=(0, 1))  # shared kernel: sum over groups too
                wg = self.weight.data.reshape(1, 1, 1, -1)
            else:
                dw = dw.sum(axis=0)
                wg = self.weight.data.reshape(g, self.out_channels // g, -1)[None]
            self.weight.grad += dw.reshape(self.weight.data.shape)
            dcolsg = np.matmul(wg.swapaxes(-1, -2), g2)
            dcols = dcolsg.reshape(n, c * l * l, oh * ow)
        if self.bias is not None:
            self.bias.grad += gout.sum(axis=(0, 2, 3))
        return ops.col2im(dcols, x_shape, l, self.stride, self.padding, oh, ow)


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name=""):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("weight", np.ones(channels, dtype=dtype),
                                    weight_decay=False)
        self.beta = self.add_param("bias", np.zeros(channels, dtype=dtype),
                                   weight_decay=False)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train=False):
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm {self.name!r} expects {self.channels} "
                             f"channels, got {x.shape[1]}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm[...] = (1 - self.momentum) * rm + self.momentum * mean
            rv[...] = (1 - self.momentum) * rv + self.momentum * var
        else:
            mean = self._buffers["running_mean"]
            var = self._buffers["running_var"]
        ivstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * ivstd[None, :, None, None]
        self._cache = (xhat, ivstd, train)
        return self.gamma.data[None, :, None, None] * xhat \
            + self.beta.data[None, :, None, None]

    def backward(self, gout):
        xhat, ivstd, was_train = self._need_cache(self._cache)
        self.gamma.grad += (gout * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += gout.sum(axis=(0, 2, 3))
        dxhat = gout * self.gamma.data[None, :, None, None]
        if not was_train:
            # Eval mode is a fixed affine map.
            return dxhat * ivstd[None, :, None, None]
        m = gout.shape[0] * gout.shape[2] * gout.shape[3]
        sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (ivstd[None, :, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    def __init__(self, name=""):
        super().__init__(name)
        self._cache = None

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, gout):
        mask = self._need_cache(self._cache)
        return gout * mask


class MaxPool2d(Layer):
    """Non-overlapping max pooling (stride == kernel)."""

    def __init__(self, kernel, name=""):
        super().__init__(name)
        self.kernel = kernel
        self._cache = None

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        k = self.kernel
        if h % k or w % k:
            raise ValueError(f"maxpool {self.name!r}: {h}x{w} not divisible by {k}")
        windows = x.reshape(n, c, h // k, k, w // k, k) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, gout):
        idx, x_shape = self._need_cache(self._cache)
        n, c, h, w = x_shape
        k = self.kernel
        dwin = np.zeros((n, c, h // k, w // k, k * k), dtype=gout.dtype)
        np.put_along_axis(dwin, idx[..., None], gout[..., None], axis=-1)
        return dwin.reshape(n, c, h // k, w // k, k, k) \
            .transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    def __init__(self, name=""):
        super().__init__(name)
        self._cache = None

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, gout):
        n, c, h, w = self._need_cache(self._cache)
        return np.broadcast_to(gout[:, :, None, None] / (h * w), (n, c, h, w)).copy()


class Linear(Layer):
    def __init__(self, in_features, out_features, bias=True, rng=None,
                 dtype=np.float32, name=""):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = self.add_param(
            "weight", kaiming_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = self.add_param("bias", np.zeros(out_features, dtype=dtype),
                                   weight_decay=False) if bias else None
        self._cache = None

    def forward(self, x, train=False):
        if x.shape[1] != self.in_features:
            raise ValueError(f"linear {self.name!r} expects {self.in_features} "
                             f"features, got {x.shape[1]}")
        self._cache = x
        out = x @ self.weight.data.T
        if self.bias is not None:
            out = out + self.bias.data[None, :]
        return out

    def backward(self, gout):
        x = self._need_cache(self._cache)
        self.weight.grad += gout.T @ x
        if self.bias is not None:
            self.bias.grad += gout.sum(axis=0)
        return gout @ self.weight.data


class Sequential(Layer):
    def __init__(self, *layers, name=""):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return list(self.layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gout):
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout


class ResidualBlock(Layer):
    """out = relu(main(x) + shortcut(x)); identity shortcut when None."""

    def __init__(self, main, shortcut=None, name=""):
        super().__init__(name)
        self.main = main
        self.shortcut = shortcut
        self._cache = None

    def children(self):
        return [self.main] + ([self.shortcut] if self.shortcut is not None else [])

    def forward(self, x, train=False):
        y = self.main.forward(x, train=train)
        s = self.shortcut.forward(x, train=train) if self.shortcut is not None else x
        pre = y + s
        mask = pre > 0
        self._cache = mask
        return pre * mask

    def backward(self, gout):
        mask = self._need_cache(self._cache)
        g = gout * mask
        gx = self.main.backward(g)
        if self.shortcut is not None:
            gx = gx + self.shortcut.backward(g)
        else:
            gx = gx + g
        return gx


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; returns (loss, dloss/dlogits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)


def forward(model, x, labels=None, train=False):
    """Run the model; returns (logits, loss or None)."""
    logits = model.forward(x, train=train)
    if labels is None:
        return logits, None
    loss, _ = softmax_cross_entropy(logits, labels)
    return logits, loss


def backward(model, logits, labels):
    """Backprop the cross-entropy loss; gradients accumulate into parameters."""
    _, dlogits = softmax_cross_entropy(logits, labels)
    model.backward(dlogits)


def zero_grads(model):
    for p in model.parameters():
        p.zero_grad()


@dataclass
class TrainConfig:
    """Training recipe: lr = 0.1 * batch_size / 256, optional warmup, then a
    cosine / step(period 30, factor 0.1) / constant schedule."""

    batch_size: int = 32
    epochs: int = 10
    warmup_epochs: int = 0
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    base_lr: float | None = None
    step_period: int = 30
    step_factor: float = 0.1

    def resolved_base_lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 0.1 * self.batch_size / 256


def learning_rate(cfg: TrainConfig, epoch_progress: float) -> float:
    """lr at a fractional epoch position in [0, cfg.epochs)."""
    base = cfg.resolved_base_lr()
    if cfg.warmup_epochs and epoch_progress < cfg.warmup_epochs:
        return base * epoch_progress / cfg.warmup_epochs
    t = epoch_progress - cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    if cfg.schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * t / span))
    if cfg.schedule == "step":
        return base * cfg.step_factor ** int(t // cfg.step_period)
    if cfg.schedule == "constant":
        return base
    raise ValueError(f"unknown schedule {cfg.schedule!r}")


def sgd_step(model, cfg: TrainConfig, lr: float):
    """Momentum SGD with weight decay; clamp01 parameters are projected to
    [0, 1] after the update and never decayed."""
    for p in model.parameters():
        g = p.grad
        if p.weight_decay and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        p.velocity[...] = cfg.momentum * p.velocity + g
        p.data[...] = p.data - lr * p.velocity
        if p.clamp01:
            np.clip(p.data, 0.0, 1.0, out=p.data)


def iterate_batches(images, labels, batch_size, rng):
    order = rng.permutation(len(images))
    for start in range(0, len(images), batch_size):
        idx = order[start:start + batch_size]
        yield images[idx], labels[idx]


def evaluate(model, dataset, batch_size=64):
    images, labels = dataset
    correct = 0
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size], train=False)
        correct += int((logits.argmax(axis=1) == labels[start:start + batch_size]).sum())
    return correct / len(images)


TRAIN_LOG_HEADER = "epoch,step,lr,loss,train_acc,eval_acc,alphas"


def fit(model, train_set, test_set, cfg: TrainConfig, alpha_params=(),
        log_rows=None, epoch_hook=None):
    """Train for cfg.epochs; returns history of per-epoch dicts.

    alpha_params are logged alongside the loss; log_rows, when given, collects
    CSV rows in the training-log schema.
    """
    images, labels = train_set
    n_batches = max(1, math.ceil(len(images) / cfg.batch_size))
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        epoch_loss = 0.0
        correct = 0
        for b, (bx, by) in enumerate(iterate_batches(images, labels,
                                                     cfg.batch_size, rng)):
            lr = learning_rate(cfg, epoch + b / n_batches)
            logits = model.forward(bx, train=True)
            loss, dlogits = softmax_cross_entropy(logits, by)
            zero_grads(model)
            model.backward(dlogits)
            sgd_step(model, cfg, lr)
            epoch_loss += loss * len(bx)
            correct += int((logits.argmax(axis=1) == by).sum())
            step += 1
            if log_rows is not None:
                alphas = ";".join(f"{float(p.data):.6f}" for p in alpha_params)
                log_rows.append(f"{epoch},{step},{lr:.6g},{loss:.6f},,,{alphas}")
        train_acc = correct / len(images)
        eval_acc = evaluate(model, test_set) if test_set is not None else float("nan")
        record = {"epoch": epoch, "loss": epoch_loss / len(images),
                  "train_acc": train_acc, "eval_acc": eval_acc}
        history.append(record)
        if log_rows is not None:
            alphas = ";".join(f"{float(p.data):.6f}" for p in alpha_params)
            log_rows.append(f"{epoch},{step},,{record['loss']:.6f},"
                            f"{train_acc:.4f},{eval_acc:.4f},{alphas}")
        if epoch_hook is not None:
            epoch_hook(epoch, record)
    return history


def grad_check(model, x, labels, params=None, eps=1e-5, samples=4, rng=None):
    """Central-difference check; returns {param name: max relative error}.

    The forward pass runs in train mode so BatchNorm statistics enter the
    differentiated path.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if params is None:
        params = list(model.parameters())

    def loss_fn():
        logits = model.forward(x, train=True)
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss

    logits = model.forward(x, train=True)
    _, dlogits = softmax_cross_entropy(logits, labels)
    zero_grads(model)
    model.backward(dlogits)

    report = {}
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        n = min(samples, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            a = gflat[i]
            scale = max(abs(a), abs(fd), 1e-8)
            worst = max(worst, abs(a - fd) / scale)
        report[p.name or f"param@{id(p)}"] = worst
    return report


def model_cost(model, h, w):
    """(macs, params) of a model at the given input resolution, walking the
    layer tree with the cost model's conventions."""
    macs, params, _, _ = _cost_walk(model, h, w)
    return macs, params


def _cost_walk(layer, h, w):
    macs = 0
    params = 0
    if isinstance(layer, Conv2d):
        oh = ops.conv_out_size(h, layer.kernel, layer.stride, layer.padding)
        ow = ops.conv_out_size(w, layer.kernel, layer.stride, layer.padding)
        cpg = layer.in_channels // layer.groups
        macs = oh * ow * layer.out_channels * cpg * layer.kernel * layer.kernel
        params = layer.weight.data.size + (layer.bias.data.size if layer.bias else 0)
        return macs, params, oh, ow
    if isinstance(layer, BatchNorm2d):
        return 0, 2 * layer.channels, h, w
    if isinstance(layer, MaxPool2d):
        return 0, 0, h // layer.kernel, w // layer.kernel
    if isinstance(layer, GlobalAvgPool):
        return 0, 0, 1, 1
    if isinstance(layer, Linear):
        p = layer.weight.data.size + (layer.bias.data.size if layer.bias else 0)
        return layer.in_features * layer.out_features, p, 1, 1
    if isinstance(layer, Sequential):
        for child in layer.layers:
            m, p, h, w = _cost_walk(child, h, w)
            macs += m
            params += p
        return macs, params, h, w
    if isinstance(layer, ResidualBlock):
        m, p, oh, ow = _cost_walk(layer.main, h, w)
        macs += m
        params += p
        if layer.shortcut is not None:
            m, p, _, _ = _cost_walk(layer.shortcut, h, w)
            macs += m
            params += p
        return macs, params, oh, ow
    if hasattr(layer, "cost_walk"):  # e.g. MixedOp
        return layer.cost_walk(h, w, _cost_walk)
    return 0, 0, h, w
