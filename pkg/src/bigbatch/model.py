"""Small feed-forward models with hand-written forward and backward passes.

A model is a flat list of layer specs. Parameters and gradients live in
plain dicts keyed by layer name so the optimizer and the finite-difference
checker can treat them uniformly. Batch-norm layers come in a local and a
cross-device variant; the cross variant synchronizes statistics over the
device handle's normalization sub-group and degrades to the local one when
no handle is given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .batchnorm import (
    BNLayerState,
    bn_backward_local,
    bn_forward_local,
    sync_bn_backward,
    sync_bn_forward,
)
from .tensor import NonFiniteError, Tensor

KINDS = ("dense", "conv3x3", "relu", "bn", "global_mean_pool", "softmax_xent")


class ModelError(ValueError):
    """Malformed model spec or incompatible inputs."""


@dataclass
class LayerSpec:
    kind: str
    out_features: int | None = None   # dense
    out_channels: int | None = None   # conv3x3
    variant: str = "local"            # bn: "local" or "cross"
    eps: float = 1e-5                 # bn
    running_momentum: float = 0.1     # bn
    name: str = ""                    # filled in by ModelSpec

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and not self.out_features:
            raise ModelError("dense layer needs out_features")
        if self.kind == "conv3x3" and not self.out_channels:
            raise ModelError("conv3x3 layer needs out_channels")
        if self.kind == "bn" and self.variant not in ("local", "cross"):
            raise ModelError(f"bn variant must be 'local' or 'cross', got {self.variant!r}")


@dataclass
class ModelSpec:
    """Layer list plus the per-example input shape, e.g. (1, 8, 8).

    The last layer must be the single softmax_xent loss head; shapes are
    walked once at construction so mismatches fail early rather than deep
    inside a training loop.
    """

    layers: list[LayerSpec]
    in_shape: tuple
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.in_shape = tuple(int(e) for e in self.in_shape)
        if not self.layers:
            raise ModelError("model needs at least one layer")
        losses = [i for i, l in enumerate(self.layers) if l.kind == "softmax_xent"]
        if losses != [len(self.layers) - 1]:
            raise ModelError("model must end with exactly one softmax_xent layer")
        for i, layer in enumerate(self.layers):
            layer.name = f"{i:02d}_{layer.kind}"
        self.shapes = self._walk_shapes()

    def _walk_shapes(self):
        """Per-layer (in_shape, out_shape) pairs, excluding the batch axis."""
        shapes = []
        cur = self.in_shape
        for layer in self.layers:
            k = layer.kind
            if k == "conv3x3":
                if len(cur) != 3:
                    raise ModelError(f"{layer.name}: conv3x3 needs (C,H,W) input, got {cur}")
                out = (layer.out_channels, cur[1], cur[2])
            elif k == "dense":
                if len(cur) != 1:
                    raise ModelError(f"{layer.name}: dense needs flat (F,) input, got {cur}")
                out = (layer.out_features,)
            elif k == "global_mean_pool":
                if len(cur) != 3:
                    raise ModelError(f"{layer.name}: pool needs (C,H,W) input, got {cur}")
                out = (cur[0],)
            elif k in ("relu", "bn", "softmax_xent"):
                if k == "bn" and len(cur) not in (1, 3):
                    raise ModelError(f"{layer.name}: bn needs (F,) or (C,H,W) input, got {cur}")
                if k == "softmax_xent" and (len(cur) != 1 or cur[0] < 2):
                    raise ModelError(
                        f"{layer.name}: loss head needs flat logits over >= 2 classes, got {cur}")
                out = cur
            shapes.append((cur, out))
            cur = out
        return shapes

    @property
    def classes(self) -> int:
        return self.shapes[-1][0][0]


@dataclass
class LossValue:
    task_loss: float
    reg_loss: float

    @property
    def total(self) -> float:
        return self.task_loss + self.reg_loss


@dataclass
class ForwardResult:
    logits: Tensor
    loss: LossValue | None
    caches: list


def init_params(model: ModelSpec, seed: int) -> dict:
    """Fan-in-scaled uniform init, independently seeded per layer.

    Weight tensors use bound sqrt(6 / fan_in); biases, BN shifts start at
    zero and BN scales at one.
    """
    params = {}
    for i, layer in enumerate(model.layers):
        rng = np.random.default_rng((seed, i))
        ishape, _ = model.shapes[i]
        if layer.kind == "dense":
            fan_in = ishape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.w"] = rng.uniform(-bound, bound, (layer.out_features, fan_in))
            params[f"{layer.name}.b"] = np.zeros(layer.out_features)
        elif layer.kind == "conv3x3":
            fan_in = ishape[0] * 9
            bound = np.sqrt(6.0 / fan_in)
            params[f"{layer.name}.w"] = rng.uniform(
                -bound, bound, (layer.out_channels, ishape[0], 3, 3))
            params[f"{layer.name}.b"] = np.zeros(layer.out_channels)
        elif layer.kind == "bn":
            c = ishape[0]
            params[f"{layer.name}.gamma"] = np.ones(c)
            params[f"{layer.name}.beta"] = np.zeros(c)
    return params


def init_buffers(model: ModelSpec) -> dict:
    buffers = {}
    for i, layer in enumerate(model.layers):
        if layer.kind == "bn":
            c = model.shapes[i][0][0]
            buffers[f"{layer.name}.running_mean"] = np.zeros(c)
            buffers[f"{layer.name}.running_var"] = np.ones(c)
    return buffers


def weight_keys(params: dict) -> list:
    """Parameter keys subject to weight decay: the .w matrices and kernels."""
    return sorted(k for k in params if k.endswith(".w"))


def l2_norm_sq(params: dict, keys) -> float:
    total = 0.0
    for k in keys:
        w = params[k]
        total += float(np.dot(w.ravel(), w.ravel()))
    return total


def _im2col(a: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (N*H*W, C*9) patch matrix for a 3x3, pad-1 convolution."""
    n, c, h, w = a.shape
    ap = np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(ap, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the image."""
    n, c, h, w = shape
    dpad = np.zeros((n, c, h + 2, w + 2))
    d6 = dcols.reshape(n, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    for i in range(3):
        for j in range(3):
            dpad[:, :, i:i + h, j:j + w] += d6[:, :, :, :, i, j]
    return dpad[:, :, 1:1 + h, 1:1 + w]


def _bn_state(layer: LayerSpec, params: dict, buffers: dict) -> BNLayerState:
    return BNLayerState(
        gamma=params[f"{layer.name}.gamma"],
        beta=params[f"{layer.name}.beta"],
        eps=layer.eps,
        running_mean=buffers[f"{layer.name}.running_mean"],
        running_var=buffers[f"{layer.name}.running_var"],
        running_momentum=layer.running_momentum,
    )


def forward(model: ModelSpec, params: dict, buffers: dict, x: Tensor,
            labels: np.ndarray | None = None, mode: str = "train",
            handle=None, weight_decay: float = 0.0,
            one_pass_bn: bool = False) -> ForwardResult:
    """Run the model on a batch; with labels, also compute the loss.

    `mode` selects BN behavior ("train" uses batch statistics and updates
    the running buffers in place, "eval" reads the buffers). Cross-variant
    BN layers reduce over `handle`'s normalization sub-group; with
    handle=None they fall back to device-local statistics. `one_pass_bn`
    selects the fused single-exchange statistics path for those layers.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[1:] != model.in_shape:
        raise ModelError(f"input shape {x.shape[1:]} does not match model {model.in_shape}")
    caches = []
    cur = x
    for layer in model.layers:
        k = layer.kind
        if k == "dense":
            w, b = params[f"{layer.name}.w"], params[f"{layer.name}.b"]
            out = cur.array @ w.T + b
            caches.append(("dense", cur))
            cur = Tensor(out, _context=layer.name)
        elif k == "conv3x3":
            w, b = params[f"{layer.name}.w"], params[f"{layer.name}.b"]
            n, _, h, wd = cur.shape
            cols = _im2col(cur.array)
            out = cols @ w.reshape(w.shape[0], -1).T + b
            out = out.reshape(n, h, wd, w.shape[0]).transpose(0, 3, 1, 2)
            caches.append(("conv3x3", cur, cols))
            cur = Tensor(out, _context=layer.name)
        elif k == "relu":
            mask = cur.array > 0
            caches.append(("relu", mask))
            cur = Tensor(cur.array * mask, _context=layer.name)
        elif k == "bn":
            state = _bn_state(layer, params, buffers)
            if mode == "eval":
                cur, cache = bn_forward_local(cur, state, mode="eval")
            elif layer.variant == "cross" and handle is not None:
                cur, cache = sync_bn_forward(handle, cur, state, one_pass=one_pass_bn)
            else:
                cur, cache = bn_forward_local(cur, state, mode="train")
            if mode == "train":
                buffers[f"{layer.name}.running_mean"] = state.running_mean
                buffers[f"{layer.name}.running_var"] = state.running_var
            caches.append(("bn", cache))
        elif k == "global_mean_pool":
            caches.append(("pool", cur.shape))
            cur = Tensor(cur.array.mean(axis=(2, 3)), _context=layer.name)
        elif k == "softmax_xent":
            logits = cur
            if labels is None:
                return ForwardResult(logits=logits, loss=None, caches=caches)
            z = logits.array
            labels = np.asarray(labels)
            if labels.shape != (z.shape[0],):
                raise ModelError(f"labels shape {labels.shape} does not match batch {z.shape[0]}")
            if labels.min() < 0 or labels.max() >= z.shape[1]:
                raise ModelError("label values out of range for the class count")
            zs = z - z.max(axis=1, keepdims=True)
            ez = np.exp(zs)
            probs = ez / ez.sum(axis=1, keepdims=True)
            picked = probs[np.arange(z.shape[0]), labels]
            # picked can underflow to zero for a wildly confident wrong
            # prediction; the resulting inf is caught right below.
            with np.errstate(divide="ignore"):
                task = float(np.mean(-np.log(picked)))
            reg = 0.5 * weight_decay * l2_norm_sq(params, weight_keys(params))
            caches.append(("softmax_xent", probs, labels))
            if not np.isfinite(task):
                raise NonFiniteError("loss became non-finite")
            return ForwardResult(logits=logits, loss=LossValue(task, reg), caches=caches)
    raise ModelError("model has no loss head")  # unreachable after validation


def backward(model: ModelSpec, params: dict, caches: list,
             handle=None, weight_decay: float = 0.0) -> dict:
    """Gradients of the total loss (task + L2 penalty) for every parameter.

    Must be called with the cache list of a train-mode forward that reached
    the loss head. The weight-decay term adds `weight_decay * w` to each
    weight tensor's gradient, matching the 0.5 * wd * ||w||^2 penalty that
    `forward` folds into the loss.

    Under data parallelism every entry follows one convention: averaging
    the returned dicts across all ranks yields the gradient of the global
    mean loss. Ordinary layers satisfy this with their per-rank partial
    sums; synchronized BN hands back gamma/beta gradients already reduced
    over its sub-group (every member holds the same total), so those are
    divided by the sub-group size here to keep the convention uniform.
    """
    if not caches or caches[-1][0] != "softmax_xent":
        raise ModelError("backward needs caches from a forward pass that computed a loss")
    grads = {}
    _, probs, labels = caches[-1]
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    cur = d
    for layer, cache in zip(reversed(model.layers[:-1]), reversed(caches[:-1])):
        k = layer.kind
        if k == "dense":
            x_in = cache[1]
            w = params[f"{layer.name}.w"]
            grads[f"{layer.name}.w"] = cur.T @ x_in.array
            grads[f"{layer.name}.b"] = cur.sum(axis=0)
            cur = cur @ w
        elif k == "conv3x3":
            x_in, cols = cache[1], cache[2]
            w = params[f"{layer.name}.w"]
            cout = w.shape[0]
            n_, _, h, wd = x_in.shape
            dout = cur.transpose(0, 2, 3, 1).reshape(n_ * h * wd, cout)
            grads[f"{layer.name}.w"] = (dout.T @ cols).reshape(w.shape)
            grads[f"{layer.name}.b"] = dout.sum(axis=0)
            cur = _col2im(dout @ w.reshape(cout, -1), x_in.shape)
        elif k == "relu":
            cur = cur * cache[1]
        elif k == "bn":
            state = BNLayerState(
                gamma=params[f"{layer.name}.gamma"],
                beta=params[f"{layer.name}.beta"],
                eps=layer.eps,
            )
            bn_cache = cache[1]
            dy = Tensor(cur, _context=f"{layer.name}.backward")
            if bn_cache.scope_key is not None:
                if handle is None:
                    raise ModelError(f"{layer.name}: synchronized cache needs a device handle")
                dx, dgamma, dbeta = sync_bn_backward(handle, dy, bn_cache, state)
                share = handle.group.bn_group_size
                dgamma = dgamma / share
                dbeta = dbeta / share
            else:
                dx, dgamma, dbeta = bn_backward_local(dy, bn_cache, state)
            grads[f"{layer.name}.gamma"] = dgamma
            grads[f"{layer.name}.beta"] = dbeta
            cur = dx.array
        elif k == "pool" or k == "global_mean_pool":
            n_, c, h, wd = cache[1]
            cur = np.broadcast_to(
                cur[:, :, None, None] / (h * wd), (n_, c, h, wd)).copy()
    if weight_decay:
        for key in weight_keys(params):
            grads[key] = grads[key] + weight_decay * params[key]
    return grads


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    """Fraction of rows whose arg-max class matches the label."""
    pred = np.argmax(logits.array, axis=1)
    return float(np.mean(pred == np.asarray(labels)))
