"""Small reverse-mode autodiff engine with the layers needed for DTM networks.

Tensors wrap float64 numpy arrays. Every operation records its parents and a
closure that pushes the incoming gradient back to them; :func:`backward` walks
the recorded graph in reverse topological order.

Volumes are channels-last: ``(batch, x, y, z, channels)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PAPER_LEARNING_RATE = 5e-5


class Tensor:
    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward: Callable | None = None,
                 name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # elementwise arithmetic with numpy broadcasting
    def __add__(self, other):
        other = _as_tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))
        return Tensor(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(-g, other.shape))
        return Tensor(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: self._accumulate(-g))

    def __mul__(self, other):
        other = _as_tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))
        return Tensor(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _as_tensor(other)

        def bw(g):
            self._accumulate(g @ other.data.T)
            other._accumulate(self.data.T @ g)
        return Tensor(self.data @ other.data, (self, other), bw)

    def sum(self):
        return Tensor(self.data.sum(), (self,),
                      lambda g: self._accumulate(np.broadcast_to(g, self.shape)))

    def mean(self):
        n = self.data.size
        return Tensor(self.data.mean(), (self,),
                      lambda g: self._accumulate(np.broadcast_to(g / n, self.shape)))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: self._accumulate(g * out))

    def log(self):
        return Tensor(np.log(self.data), (self,), lambda g: self._accumulate(g / self.data))

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,),
                      lambda g: self._accumulate(g.reshape(old)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), name=name, requires_grad=True)


def backward(loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns gradients for ``params`` (zeros for parameters the loss does not
    depend on). Gradients are also left on each reachable tensor's ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return {}
    return {name: (p.grad.copy() if (id(p) in seen and p.grad is not None)
                   else np.zeros_like(p.data))
            for name, p in params.items()}


# ---------------------------------------------------------------------------
# operations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: x._accumulate(g * mask))


def dense(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ kernel
    return out + bias if bias is not None else out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor(x.data * keep, (x,), lambda g: x._accumulate(g * keep))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None, padding: str = "same") -> Tensor:
    """Stride-1 3D convolution (cross-correlation), channels-last, via im2col.

    ``kernel`` has shape ``(kx, ky, kz, in_channels, filters)``.
    """
    kx, ky, kz, c_in, n_filt = kernel.shape
    if x.data.ndim != 5 or x.shape[-1] != c_in:
        raise ValueError(f"conv3d expects (N, X, Y, Z, {c_in}) input, got {x.shape}")
    if padding == "same":
        px, py, pz = (kx - 1) // 2, (ky - 1) // 2, (kz - 1) // 2
        pads = ((0, 0), (px, kx - 1 - px), (py, ky - 1 - py), (pz, kz - 1 - pz), (0, 0))
        xp = np.pad(x.data, pads)
    elif padding == "valid":
        pads = None
        xp = x.data
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n = xp.shape[0]
    ox, oy, oz = xp.shape[1] - kx + 1, xp.shape[2] - ky + 1, xp.shape[3] - kz + 1
    if min(ox, oy, oz) < 1:
        raise ValueError(f"conv3d input {x.shape} too small for kernel {kernel.shape[:3]}")
    win = sliding_window_view(xp, (kx, ky, kz), axis=(1, 2, 3))
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, kx * ky * kz * c_in)
    wmat = kernel.data.reshape(-1, n_filt)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ox, oy, oz, n_filt)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(-1, n_filt)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ox, oy, oz, kx, ky, kz, c_in)
            dxp = np.zeros_like(xp)
            for a in range(kx):
                for b in range(ky):
                    for c in range(kz):
                        dxp[:, a:a + ox, b:b + oy, c:c + oz, :] += dcols[:, :, :, :, a, b, c, :]
            if pads is not None:
                (_, _), (ax, _), (ay, _), (az, _), _ = pads
                dxp = dxp[:, ax:ax + x.shape[1], ay:ay + x.shape[2], az:az + x.shape[3], :]
            x._accumulate(dxp)

    return Tensor(out, parents, bw)


def maxpool3d(x: Tensor, pool: tuple[int, int, int] = (2, 2, 2)) -> Tensor:
    """Non-overlapping max pooling; a trailing partial window is kept (ceil mode)."""
    n, sx, sy, sz, c = x.shape
    px, py, pz = pool
    ex, ey, ez = -(-sx // px), -(-sy // py), -(-sz // pz)
    padded = np.full((n, ex * px, ey * py, ez * pz, c), -np.inf)
    padded[:, :sx, :sy, :sz, :] = x.data
    blocks = (padded.reshape(n, ex, px, ey, py, ez, pz, c)
              .transpose(0, 1, 3, 5, 7, 2, 4, 6)
              .reshape(n, ex, ey, ez, c, px * py * pz))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dblocks = np.zeros(blocks.shape)
        np.put_along_axis(dblocks, arg[..., None], g[..., None], axis=-1)
        d = (dblocks.reshape(n, ex, ey, ez, c, px, py, pz)
             .transpose(0, 1, 5, 2, 6, 3, 7, 4)
             .reshape(n, ex * px, ey * py, ez * pz, c))
        x._accumulate(d[:, :sx, :sy, :sz, :])

    return Tensor(out, (x,), bw)


# ---------------------------------------------------------------------------
# layers and networks


LAYER_KINDS = ("dense", "relu", "dropout", "conv3d", "maxpool3d", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    use_bias: bool = True
    filters: int | None = None
    kernel: tuple[int, int, int] = (3, 3, 3)
    pool: tuple[int, int, int] = (2, 2, 2)
    rate: float = 0.0
    l2: float = 0.0
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """A sequential stack of layers with named trainable parameters.

    ``mode`` is ``"training"`` or ``"inference"``; only dropout looks at it.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape: tuple[int, ...],
                 rng: np.random.Generator, name: str = "net"):
        self.layers = tuple(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.mode = "inference"
        self.params: dict[str, Tensor] = {}
        self._ran_forward = False
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            shape = self._init_layer(i, spec, shape, rng)
        self.output_shape = shape

    def _init_layer(self, i, spec: LayerSpec, shape, rng):
        prefix = f"{i}_{spec.kind}"
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"{self.name}: layer {prefix} needs flat input, got {shape}")
            self.params[f"{prefix}.kernel"] = parameter(
                glorot_uniform((shape[0], spec.units), shape[0], spec.units, rng), f"{prefix}.kernel")
            if spec.use_bias:
                self.params[f"{prefix}.bias"] = parameter(np.zeros(spec.units), f"{prefix}.bias")
            return (spec.units,)
        if spec.kind == "conv3d":
            if len(shape) != 4:
                raise ValueError(f"{self.name}: layer {prefix} needs (X, Y, Z, C) input, got {shape}")
            k = spec.kernel
            vol = k[0] * k[1] * k[2]
            self.params[f"{prefix}.kernel"] = parameter(
                glorot_uniform((*k, shape[3], spec.filters), vol * shape[3], vol * spec.filters, rng),
                f"{prefix}.kernel")
            if spec.use_bias:
                self.params[f"{prefix}.bias"] = parameter(np.zeros(spec.filters), f"{prefix}.bias")
            if spec.padding == "same":
                return (*shape[:3], spec.filters)
            out = tuple(s - kk + 1 for s, kk in zip(shape[:3], k))
            if min(out) < 1:
                raise ValueError(f"{self.name}: layer {prefix} shrinks {shape} to {out}")
            return (*out, spec.filters)
        if spec.kind == "maxpool3d":
            return (*(-(-s // p) for s, p in zip(shape[:3], spec.pool)), shape[3])
        if spec.kind == "flatten":
            return (int(np.prod(shape)),)
        return shape

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def l2_penalty(self) -> Tensor | None:
        penalty = None
        for i, spec in enumerate(self.layers):
            if spec.kind in ("dense", "conv3d") and spec.l2 > 0:
                w = self.params[f"{i}_{spec.kind}.kernel"]
                term = (w * w).sum() * spec.l2
                penalty = term if penalty is None else penalty + term
        return penalty

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        x = _as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"{self.name}: input shape {x.shape[1:]} does not match "
                             f"declared {self.input_shape}")
        training = self.mode == "training"
        for i, spec in enumerate(self.layers):
            prefix = f"{i}_{spec.kind}"
            if spec.kind == "dense":
                x = dense(x, self.params[f"{prefix}.kernel"], self.params.get(f"{prefix}.bias"))
            elif spec.kind == "conv3d":
                x = conv3d(x, self.params[f"{prefix}.kernel"], self.params.get(f"{prefix}.bias"),
                           spec.padding)
            elif spec.kind == "relu":
                x = relu(x)
            elif spec.kind == "dropout":
                x = dropout(x, spec.rate, rng, training)
            elif spec.kind == "maxpool3d":
                x = maxpool3d(x, spec.pool)
            elif spec.kind == "flatten":
                x = flatten(x)
        self._ran_forward = True
        return x

    __call__ = forward

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        if not self._ran_forward:
            raise RuntimeError(f"{self.name}: backward called before forward")
        return backward(loss, self.params)

    def get_weights(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def set_weights(self, weights: dict[str, np.ndarray]):
        for k, p in self.params.items():
            w = np.asarray(weights[k], dtype=np.float64)
            if w.shape != p.shape:
                raise ValueError(f"{self.name}.{k}: shape {w.shape} != {p.shape}")
            p.data = w.copy()


def forward(graph: Network, inputs, rng: np.random.Generator | None = None) -> Tensor:
    return graph.forward(inputs, rng)


# ---------------------------------------------------------------------------
# presets


@dataclass(frozen=True)
class CNNConfig:
    filters: tuple[int, ...] = (32, 32, 64, 64)
    dense_units: int = 128
    dropout: float = 0.3
    padding: str = "same"


def cnn3d_layers(out_units: int, cfg: CNNConfig = CNNConfig()) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    for f in cfg.filters:
        layers += [LayerSpec("conv3d", filters=f, padding=cfg.padding), LayerSpec("relu"),
                   LayerSpec("maxpool3d")]
    layers += [
        LayerSpec("flatten"),
        LayerSpec("dense", units=cfg.dense_units), LayerSpec("relu"),
        LayerSpec("dropout", rate=cfg.dropout),
        LayerSpec("dense", units=cfg.dense_units), LayerSpec("relu"),
        LayerSpec("dense", units=out_units, use_bias=False),
    ]
    return layers


def build_preset(preset: str, rng: np.random.Generator, *, K: int | None = None,
                 p: int | None = None, out_units: int | None = None,
                 volume_shape: tuple[int, int, int] | None = None,
                 cnn: CNNConfig = CNNConfig(), l2: float = 1e-3) -> Network:
    """Build one of the named term networks.

    ``si_head`` maps a constant one to K-1 intercept parameters, ``ls_head``
    is a bias-free linear layer on ``p`` features, ``cs_age_mlp`` is the
    16-16 ReLU network on one scalar, ``cnn3d`` the four-block volume CNN.
    """
    if preset == "si_head":
        return Network([LayerSpec("dense", units=K - 1, use_bias=False)], (1,), rng, "si_head")
    if preset == "ls_head":
        return Network([LayerSpec("dense", units=1, use_bias=False)], (p,), rng, "ls_head")
    if preset == "cs_age_mlp":
        layers = [LayerSpec("dense", units=16, l2=l2), LayerSpec("relu"),
                  LayerSpec("dense", units=16, l2=l2), LayerSpec("relu"),
                  LayerSpec("dense", units=1, use_bias=False)]
        return Network(layers, (1,), rng, "cs_age_mlp")
    if preset == "cnn3d":
        if volume_shape is None or out_units is None:
            raise ValueError("cnn3d needs volume_shape and out_units")
        return Network(cnn3d_layers(out_units, cnn), (*volume_shape, 1), rng, "cnn3d")
    raise ValueError(f"unknown preset {preset!r}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class Adam:
    lr: float = PAPER_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, "
                                 f"parameter has {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, params: dict[str, Tensor], grads: dict[str, np.ndarray]):
    state.step(params, grads)
    return params


def numeric_gradient(f: Callable[[], float], param: Tensor, index, step: float = 1e-5) -> float:
    """Central finite difference of ``f`` with respect to one entry of ``param``."""
    old = param.data[index]
    param.data[index] = old + step
    up = f()
    param.data[index] = old - step
    down = f()
    param.data[index] = old
    return (up - down) / (2 * step)


def iter_params(networks: Iterable[Network]):
    for net in networks:
        yield from net.params.items()
