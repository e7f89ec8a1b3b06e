"""Small CNN engine with hand-written forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. A
network is described by a :class:`NetworkSpec` (an ordered tuple of layer
descriptors plus the expected input shape), its weights live in a
:class:`ParameterStore`, and :class:`Network` binds the two together and
keeps the activation cache needed for backpropagation.

Arithmetic happens in the dtype of the parameters, so the same code path
serves float32 training and float64 oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor or layer dimensions are inconsistent."""


class StateError(RuntimeError):
    """Raised when an operation is called out of order."""


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int


LAYER_TYPES = {
    "conv2d": Conv2d,
    "relu": ReLU,
    "maxpool": MaxPool,
    "global_avg_pool": GlobalAvgPool,
    "fully_connected": FullyConnected,
}
_LAYER_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}


def _layer_to_dict(layer) -> dict:
    d = {"type": _LAYER_NAMES[type(layer)]}
    d.update(layer.__dict__)
    return d


def _layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the (C, H, W) input shape it accepts.

    With ``normalize_input`` each image is standardized to zero mean and
    unit standard deviation (std floored at ``NORM_FLOOR``) before the
    first layer. The step has no parameters.
    """

    input_shape: tuple[int, int, int]
    layers: tuple = field(default_factory=tuple)
    normalize_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without the batch axis).

        Raises :class:`ShapeError` if adjacent layers disagree or the final
        output is not a single scalar.
        """
        shape: tuple[int, ...] = self.input_shape
        if len(shape) != 3:
            raise ShapeError(f"input_shape must be (C, H, W), got {shape}")
        shapes = []
        for idx, layer in enumerate(self.layers):
            where = f"layer {idx} ({_LAYER_NAMES[type(layer)]})"
            if isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ShapeError(f"{where}: expected {layer.in_ch} input channels, got shape {shape}")
                h = (shape[1] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (shape[2] + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ShapeError(f"{where}: kernel larger than padded input {shape}")
                shape = (layer.out_ch, h, w)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                    raise ShapeError(f"{where}: cannot pool {shape} with k={layer.k}")
                shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            elif isinstance(layer, GlobalAvgPool):
                if len(shape) != 3:
                    raise ShapeError(f"{where}: needs a (C, H, W) input, got {shape}")
                shape = (shape[0],)
            elif isinstance(layer, FullyConnected):
                if int(np.prod(shape)) != layer.in_features:
                    raise ShapeError(
                        f"{where}: expected {layer.in_features} input features, got {int(np.prod(shape))}"
                    )
                shape = (layer.out_features,)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ShapeError(f"{where}: unsupported layer {layer!r}")
            shapes.append(shape)
        if int(np.prod(shape)) != 1:
            raise ShapeError(f"network must end in a single scalar, final shape is {shape}")
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [_layer_to_dict(layer) for layer in self.layers],
            "normalize_input": self.normalize_input,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            tuple(d["input_shape"]),
            tuple(_layer_from_dict(x) for x in d["layers"]),
            bool(d.get("normalize_input", False)),
        )


NORM_FLOOR = 1e-2


def default_spec(patch_size: int = 48) -> NetworkSpec:
    """Four 3x3 conv layers and one fully connected layer at toy width, standardized input."""
    return NetworkSpec(
        (1, patch_size, patch_size),
        (
            Conv2d(1, 8, 3, pad=1), ReLU(), MaxPool(2),
            Conv2d(8, 16, 3, pad=1), ReLU(), MaxPool(2),
            Conv2d(16, 32, 3, pad=1), ReLU(),
            Conv2d(32, 32, 3, pad=1), ReLU(),
            GlobalAvgPool(),
            FullyConnected(32, 1),
        ),
        normalize_input=True,
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named parameter arrays with same-shaped gradient buffers.

    Iteration order is insertion order, which :func:`init_params` fixes to
    layer order (weight before bias).
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None, dtype=np.float32):
        self._dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.ascontiguousarray(value)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def items(self):
        return self.params.items()

    @property
    def dtype(self):
        for value in self.params.values():
            return value.dtype
        return self._dtype

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def copy(self, dtype=None) -> "ParameterStore":
        """Deep copy of parameters (gradients start at zero)."""
        dtype = dtype or self.dtype
        return ParameterStore({k: v.astype(dtype, copy=True) for k, v in self.params.items()}, dtype)

    def grad_copy(self) -> dict[str, np.ndarray]:
        return {k: g.copy() for k, g in self.grads.items()}


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """He-scaled uniform weights, zero biases.

    Weights are drawn from U(-b, b) with b = sqrt(6 / fan_in).
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore(dtype=dtype)
    for idx, layer in enumerate(spec.layers):
        if isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            shape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            n_out = layer.out_ch
        elif isinstance(layer, FullyConnected):
            fan_in = layer.in_features
            shape = (layer.out_features, layer.in_features)
            n_out = layer.out_features
        else:
            continue
        bound = np.sqrt(6.0 / fan_in)
        store.add(f"{idx}.weight", rng.uniform(-bound, bound, size=shape).astype(dtype))
        store.add(f"{idx}.bias", np.zeros(n_out, dtype=dtype))
    return store


# ---------------------------------------------------------------------------
# Layer kernels
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _conv_forward(layer: Conv2d, x, w, b):
    n = x.shape[0]
    cols, ho, wo = _im2col(x, layer.kernel, layer.stride, layer.pad)
    out = cols @ w.reshape(layer.out_ch, -1).T + b
    out = out.reshape(n, ho, wo, layer.out_ch).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, ho, wo)


def _conv_backward(layer: Conv2d, cache, w, dout, gw, gb):
    cols, xshape, ho, wo = cache
    k, s, p = layer.kernel, layer.stride, layer.pad
    n, c, h, wd = xshape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
    gw += (d2.T @ cols).reshape(w.shape)
    gb += d2.sum(axis=0)
    dcols = (d2 @ w.reshape(layer.out_ch, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if p:
        dxp = dxp[:, :, p:p + h, p:p + wd]
    return dxp


def _pool_forward(layer: MaxPool, x):
    k = layer.k
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    blocks = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(layer: MaxPool, cache, dout):
    arg, xshape = cache
    k = layer.k
    n, c, h, w = xshape
    ho, wo = h // k, w // k
    dblocks = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :, :ho * k, :wo * k] = dblocks
    return dx


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class Network:
    """One branch of the Siamese pair: ``spec`` evaluated with ``params``.

    Several ``Network`` objects may share one :class:`ParameterStore`; each
    keeps its own activation cache, and all of them accumulate gradients
    into the shared store. ``forward_count`` counts images pushed through
    this instance.
    """

    def __init__(self, spec: NetworkSpec, params: ParameterStore):
        self.spec = spec
        self.params = params
        self.forward_count = 0
        self._cache: list | None = None
        self._batch = 0
        for idx, layer in enumerate(spec.layers):
            if isinstance(layer, Conv2d):
                wshape = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
            elif isinstance(layer, FullyConnected):
                wshape = (layer.out_features, layer.in_features)
            else:
                continue
            if f"{idx}.weight" not in params or params[f"{idx}.weight"].shape != wshape:
                raise ShapeError(f"parameter {idx}.weight missing or not of shape {wshape}")

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Score each image of an (M, C, H, W) batch; returns shape (M,)."""
        batch = np.asarray(batch)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.spec.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape} does not match (M, {', '.join(map(str, self.spec.input_shape))})"
            )
        x = batch.astype(self.params.dtype, copy=False)
        if self.spec.normalize_input:
            x = standardize(x)
        cache = []
        for idx, layer in enumerate(self.spec.layers):
            if isinstance(layer, Conv2d):
                x, c = _conv_forward(layer, x, self.params[f"{idx}.weight"], self.params[f"{idx}.bias"])
            elif isinstance(layer, ReLU):
                c = x > 0
                x = x * c
            elif isinstance(layer, MaxPool):
                x, c = _pool_forward(layer, x)
            elif isinstance(layer, GlobalAvgPool):
                c = x.shape
                x = x.mean(axis=(2, 3))
            elif isinstance(layer, FullyConnected):
                c = x.shape
                x = x.reshape(x.shape[0], -1)
                cache_in = x
                x = x @ self.params[f"{idx}.weight"].T + self.params[f"{idx}.bias"]
                c = (c, cache_in)
            cache.append(c)
        self._cache = cache
        self._batch = batch.shape[0]
        self.forward_count += batch.shape[0]
        return x.reshape(batch.shape[0])

    __call__ = forward

    def backward(self, output_grads: np.ndarray) -> None:
        """Accumulate d(sum_i output_grads[i] * score[i]) / d(param) into the store."""
        if self._cache is None:
            raise StateError("backward called before forward")
        dout = np.asarray(output_grads, dtype=self.params.dtype)
        if dout.shape != (self._batch,):
            raise ShapeError(f"output_grads must have shape ({self._batch},), got {dout.shape}")
        g = dout.reshape(-1, 1)
        for idx in range(len(self.spec.layers) - 1, -1, -1):
            layer = self.spec.layers[idx]
            c = self._cache[idx]
            if isinstance(layer, FullyConnected):
                in_shape, x_in = c
                w = self.params[f"{idx}.weight"]
                g2 = g.reshape(g.shape[0], -1)
                self.params.grads[f"{idx}.weight"] += g2.T @ x_in
                self.params.grads[f"{idx}.bias"] += g2.sum(axis=0)
                g = (g2 @ w).reshape(in_shape)
            elif isinstance(layer, GlobalAvgPool):
                n, ch, h, w = c
                g = np.broadcast_to(g.reshape(n, ch, 1, 1) / (h * w), c).copy()
            elif isinstance(layer, MaxPool):
                g = _pool_backward(layer, c, g)
            elif isinstance(layer, ReLU):
                g = g * c
            elif isinstance(layer, Conv2d):
                g = _conv_backward(
                    layer, c, self.params[f"{idx}.weight"], g,
                    self.params.grads[f"{idx}.weight"], self.params.grads[f"{idx}.bias"],
                )

    def activation_pattern(self) -> bytes:
        """Fingerprint of the ReLU masks and max-pool winners of the last forward.

        Two parameter settings with the same pattern lie in the same linear
        region of every piecewise-linear layer.
        """
        if self._cache is None:
            raise StateError("no forward pass cached")
        parts = []
        for layer, c in zip(self.spec.layers, self._cache):
            if isinstance(layer, ReLU):
                parts.append(np.packbits(c).tobytes())
            elif isinstance(layer, MaxPool):
                parts.append(c[0].astype(np.int8).tobytes())
        return b"".join(parts)


def standardize(batch: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit std (std floored at ``NORM_FLOOR``)."""
    mu = batch.mean(axis=(1, 2, 3), keepdims=True)
    sd = batch.std(axis=(1, 2, 3), keepdims=True)
    return (batch - mu) / np.maximum(sd, NORM_FLOOR)


def forward(spec: NetworkSpec, params: ParameterStore, batch: np.ndarray) -> np.ndarray:
    """Stateless convenience wrapper around :meth:`Network.forward`."""
    return Network(spec, params).forward(batch)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of :func:`gradient_check`.

    ``max_rel_error`` maps parameter name to the worst relative error seen
    over its checked entries; ``flagged`` lists names above tolerance.
    ``skipped`` counts entries whose finite-difference window crossed a
    ReLU, max-pool or loss kink even at the smallest step, where the
    central difference is not a derivative estimate.
    """

    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self) -> str:
        lines = [f"{'parameter':<16} max_rel_error"]
        for name, err in self.max_rel_error.items():
            mark = "  FAIL" if name in self.flagged else ""
            lines.append(f"{name:<16} {err:.3e}{mark}")
        lines.append(f"checked={self.checked} skipped_kinks={self.skipped} tol={self.tolerance:g}")
        return "\n".join(lines)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(
    spec: NetworkSpec,
    params: ParameterStore,
    batch: np.ndarray,
    loss_fn: LossFn,
    tolerance: float = 1e-4,
    *,
    samples_per_param: int | None = None,
    h: float = 1e-3,
    min_h: float = 1e-7,
    floor: float = 1e-6,
    seed: int = 0,
    network_factory: Callable[[NetworkSpec, ParameterStore], Network] = Network,
) -> GradCheckReport:
    """Compare backprop gradients against central finite differences.

    Everything runs on a float64 copy of ``params``. ``loss_fn`` maps the
    score vector to ``(loss, dloss/dscores)``; if it also has an
    ``active_set(scores)`` method, its result is part of the kink test.

    Parameters
    ----------
    samples_per_param : int, optional
        Number of random entries checked per parameter tensor; all entries
        when ``None``.
    h : float
        Initial finite-difference step. If the window ``[x - h, x + h]``
        crosses a kink the step is divided by 10, down to ``min_h``; entries
        that still cross are counted as skipped.
    floor : float
        Lower bound on the relative-error denominator, so that gradients
        at roundoff level are not compared relatively.
    network_factory : callable
        Builds the network whose ``backward`` is under test.
    """
    p64 = params.copy(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    net = network_factory(spec, p64)
    scores = net.forward(batch)
    _, dscores = loss_fn(scores)
    net.backward(dscores)
    analytic = p64.grad_copy()

    active = getattr(loss_fn, "active_set", None)
    probe = Network(spec, p64)

    def evaluate():
        s = probe.forward(batch)
        loss, _ = loss_fn(s)
        key = probe.activation_pattern()
        if active is not None:
            key += np.asarray(active(s)).tobytes()
        return loss, key

    _, base_key = evaluate()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, value in p64.items():
        flat = value.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_param, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            numeric = None
            step = h
            while step >= min_h:
                flat[i] = orig + step
                lp, kp = evaluate()
                flat[i] = orig - step
                lm, km = evaluate()
                flat[i] = orig
                if kp == base_key and km == base_key:
                    numeric = (lp - lm) / (2 * step)
                    break
                step /= 10
            if numeric is None:
                report.skipped += 1
                continue
            worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric, floor))
            report.checked += 1
        report.max_rel_error[name] = worst
        if worst > tolerance:
            report.flagged.append(name)
    return report


def as_batch(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack (H, W) images into an (M, 1, H, W) float32 batch."""
    return np.stack([np.asarray(im, dtype=np.float32) for im in images])[:, None]
