"""Dense networks with hand-derived gradients, Adam, a counter-based RNG and a
finite-difference oracle.

Everything here works on float64 numpy arrays. Networks accept either a single
input vector ``(in,)`` or a batch ``(B, in)``; parameter gradients are summed
over the batch.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import OracleError, StructuralError, TrainingError

ACTIVATIONS = ("identity", "relu", "tanh", "softplus")


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) = max(x, 0) + log1p(e^-|x|); never overflows
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return softplus(z)
    raise StructuralError(f"unknown activation {name!r}", component="ndmath")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain ``g`` (gradient w.r.t. the activation output) through the activation."""
    if name == "identity":
        return g
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "softplus":
        return g * sigmoid(z)
    raise StructuralError(f"unknown activation {name!r}", component="ndmath")


class ParamSlot(NamedTuple):
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def make_layout(entries: Sequence[tuple[str, tuple[int, ...]]]) -> list[ParamSlot]:
    layout, offset = [], 0
    for name, shape in entries:
        slot = ParamSlot(name, offset, tuple(int(s) for s in shape))
        layout.append(slot)
        offset += slot.size
    return layout


def layout_size(layout: Sequence[ParamSlot]) -> int:
    return layout[-1].offset + layout[-1].size if layout else 0


def unflatten_params(layout: Sequence[ParamSlot], flat: np.ndarray) -> dict[str, np.ndarray]:
    if flat.ndim != 1 or flat.size != layout_size(layout):
        raise StructuralError(
            f"flat vector of size {flat.size} does not match layout size {layout_size(layout)}",
            component="ndmath",
        )
    return {s.name: flat[s.offset : s.offset + s.size].reshape(s.shape).copy() for s in layout}


def flatten_params(layout: Sequence[ParamSlot], arrays: dict[str, np.ndarray]) -> np.ndarray:
    flat = np.empty(layout_size(layout))
    for s in layout:
        a = np.asarray(arrays[s.name], dtype=np.float64)
        if a.shape != s.shape:
            raise StructuralError(f"{s.name}: shape {a.shape} != layout {s.shape}", component="ndmath")
        flat[s.offset : s.offset + s.size] = a.ravel()
    return flat


@dataclass
class DenseNet:
    """A stack of affine layers, each followed by an activation.

    ``params`` is the single flat parameter vector; ``weight(i)``/``bias(i)``
    return views into it, so in-place updates of ``params`` are seen by the
    forward pass.
    """

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    params: np.ndarray = None
    layout: list[ParamSlot] = field(init=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        self.activations = tuple(self.activations)
        if len(self.sizes) < 2:
            raise StructuralError("a DenseNet needs at least one layer", component="ndmath")
        if len(self.activations) != len(self.sizes) - 1:
            raise StructuralError(
                f"{len(self.sizes) - 1} layers but {len(self.activations)} activations", component="ndmath"
            )
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise StructuralError(f"unknown activation {a!r}", component="ndmath")
        entries = []
        for i in range(self.n_layers):
            entries.append((f"W{i}", (self.sizes[i + 1], self.sizes[i])))
            entries.append((f"b{i}", (self.sizes[i + 1],)))
        self.layout = make_layout(entries)
        if self.params is None:
            self.params = np.zeros(self.n_params)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.n_params,):
            raise StructuralError(
                f"parameter vector has shape {self.params.shape}, expected ({self.n_params},)", component="ndmath"
            )

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(self.sizes[i + 1] * self.sizes[i] + self.sizes[i + 1] for i in range(self.n_layers))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def weight(self, i: int) -> np.ndarray:
        s = self.layout[2 * i]
        return self.params[s.offset : s.offset + s.size].reshape(s.shape)

    def bias(self, i: int) -> np.ndarray:
        s = self.layout[2 * i + 1]
        return self.params[s.offset : s.offset + s.size]


def init_dense_net(sizes: Sequence[int], activations: Sequence[str], rng: "RngStream") -> DenseNet:
    """Gaussian fan-in initialisation (He for relu layers, LeCun otherwise), zero biases."""
    net = DenseNet(tuple(sizes), tuple(activations))
    for i in range(net.n_layers):
        fan_in = net.sizes[i]
        gain = 2.0 if net.activations[i] == "relu" else 1.0
        w = net.weight(i)
        w[...] = rng.normal(w.size).reshape(w.shape) * math.sqrt(gain / fan_in)
    return net


@dataclass
class NetCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    batched: bool


def net_apply(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, NetCache]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.ndim != 2:
        raise StructuralError(f"input must be 1-D or 2-D, got shape {x.shape}", component="ndmath")
    inputs, pre, post = [], [], []
    for i in range(net.n_layers):
        if h.shape[1] != net.sizes[i]:
            raise StructuralError(
                f"layer {i}: expected input width {net.sizes[i]}, got {h.shape[1]}", component="ndmath"
            )
        inputs.append(h)
        z = h @ net.weight(i).T + net.bias(i)
        h = _activate(net.activations[i], z)
        pre.append(z)
        post.append(h)
    out = h if batched else h[0]
    return out, NetCache(inputs, pre, post, batched)


def net_gradients(
    net: DenseNet, cache: NetCache, grad_output: np.ndarray, *, need_input_grad: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Backpropagate ``grad_output`` through the cached forward pass.

    Returns ``(grad_params, grad_input)``; ``grad_params`` follows ``net.layout``.
    """
    if len(cache.pre) != net.n_layers:
        raise StructuralError(
            f"cache holds {len(cache.pre)} layers, network has {net.n_layers}", component="ndmath"
        )
    g = np.asarray(grad_output, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    for i, z in enumerate(cache.pre):
        if z.shape[1] != net.sizes[i + 1] or cache.inputs[i].shape[1] != net.sizes[i]:
            raise StructuralError(f"stale cache at layer {i}", component="ndmath")
    if g.shape != cache.pre[-1].shape:
        raise StructuralError(
            f"grad_output shape {g.shape} does not match output {cache.pre[-1].shape}", component="ndmath"
        )
    grads = np.empty(net.n_params)
    for i in reversed(range(net.n_layers)):
        g = _activation_grad(net.activations[i], cache.pre[i], cache.post[i], g)
        ws, bs = net.layout[2 * i], net.layout[2 * i + 1]
        grads[ws.offset : ws.offset + ws.size] = (g.T @ cache.inputs[i]).ravel()
        grads[bs.offset : bs.offset + bs.size] = g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ net.weight(i)
    grad_input = None
    if need_input_grad:
        grad_input = g if cache.batched else g[0]
    return grads, grad_input


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_update(
    state: AdamState,
    params: np.ndarray,
    grads: np.ndarray,
    layout: Sequence[ParamSlot] | None = None,
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step.

    Updates ``state`` and ``params`` in place (the training loop holds views
    into ``params``) and returns both. Nothing is modified if a gradient entry
    is non-finite.
    """
    if not (params.shape == grads.shape == state.m.shape):
        raise StructuralError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}",
            component="ndmath",
        )
    if not np.isfinite(grads).all():
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        name = f"index {bad}"
        for slot in layout or ():
            if slot.offset <= bad < slot.offset + slot.size:
                name = f"{slot.name}[{bad - slot.offset}]"
                break
        raise TrainingError(f"non-finite gradient at {name}", component="ndmath")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, params


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of a scalar function.

    With ``indices`` only those coordinates are probed; the others are left
    at zero in the returned vector.
    """
    if h <= 0:
        raise OracleError(f"step h must be positive, got {h}", component="ndmath")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value probing coordinate {i}", component="ndmath")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# Counter-based RNG
#
# A stream is a Philox-4x64 key (seed, stream id). The counter counts 64-bit
# words consumed: a uniform draw consumes 1 word, a Gaussian draw 2 words
# (Box-Muller, cosine branch only). A draw sequence is therefore a pure
# function of (seed, stream id, counter).

STREAMS = {
    "data": 1,
    "init": 2,
    "training-noise": 3,
    "eval-episodes": 4,
    "batches": 5,
    "eval-noise": 6,
    "bench": 7,
}

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0**-53


def stream_id(name: str, *sub: int) -> int:
    """64-bit id for a named stream, optionally specialised by integers."""
    if not sub:
        if name in STREAMS:
            return STREAMS[name]
    h = hashlib.blake2b(digest_size=8)
    h.update(name.encode())
    for s in sub:
        h.update(int(s & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    seed: int
    stream: int
    counter: int = 0

    @classmethod
    def named(cls, seed: int, name: str, *sub: int) -> "RngStream":
        return cls(int(seed) & _MASK64, stream_id(name, *sub))

    def _words(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        block, skip = divmod(self.counter, 4)
        nblocks = -(-(skip + n) // 4)
        bitgen = np.random.Philox(counter=block, key=[self.seed & _MASK64, self.stream & _MASK64])
        words = bitgen.random_raw(nblocks * 4)[skip : skip + n]
        self.counter += n
        return words

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws from [0, 1) with 53-bit resolution."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def normal(self, n: int) -> np.ndarray:
        return rng_gaussian(self, n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers from [low, high)."""
        u = self.uniform(n)
        return np.minimum(low + np.floor(u * (high - low)).astype(np.int64), high - 1)


def rng_gaussian(stream: RngStream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    w = stream._words(2 * n).reshape(n, 2) if n else np.empty((0, 2), dtype=np.uint64)
    u1 = ((w[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53
    u2 = (w[:, 1] >> np.uint64(11)).astype(np.float64) * _TWO_M53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
