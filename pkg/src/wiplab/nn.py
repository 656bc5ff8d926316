"""Minimal dense/conv1d network kernel with exact reverse-mode gradients.

Covers exactly what the four policy networks need (actor, critic, friction
encoder, adaptation module): fully connected layers, leaky-ReLU/ReLU/tanh,
a 1-D convolution, Adam, orthogonal initialization, and a versioned binary
checkpoint container.  Everything is float64 numpy; forward passes are pure
functions of (parameters, input).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

LRELU_SLOPE = 0.01
CHECKPOINT_MAGIC = b"WIPCKPT1"


class NnError(Exception):
    """Base class for network kernel failures."""


class ShapeMismatch(NnError):
    pass


class CheckpointLoad(NnError):
    """Checkpoint file is missing, truncated, or structurally invalid."""


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "lrelu":
        return np.where(z > 0.0, z, LRELU_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, z: np.ndarray, y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    if name == "linear":
        return gy
    if name == "relu":
        return gy * (z > 0.0)
    if name == "lrelu":
        return gy * np.where(z > 0.0, 1.0, LRELU_SLOPE)
    if name == "tanh":
        return gy * (1.0 - y ** 2)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# Layer specs


@dataclass(frozen=True)
class DenseSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"

    kind = "dense"

    def param_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 1
    in_length: int = 40
    activation: str = "linear"

    kind = "conv1d"

    @property
    def out_length(self) -> int:
        return (self.in_length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def param_count(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_size + self.out_channels


@dataclass(frozen=True)
class FlattenSpec:
    kind = "flatten"

    def param_count(self) -> int:
        return 0


LayerSpec = DenseSpec | Conv1dSpec | FlattenSpec


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]

    def param_count(self) -> int:
        return sum(l.param_count() for l in self.layers)

    def to_json(self) -> list[dict]:
        out = []
        for l in self.layers:
            d = {"kind": l.kind}
            if isinstance(l, (DenseSpec, Conv1dSpec)):
                d.update({k: getattr(l, k) for k in l.__dataclass_fields__})
            out.append(d)
        return out

    @staticmethod
    def from_json(data: list[dict]) -> "NetworkSpec":
        layers: list[LayerSpec] = []
        for d in data:
            kind = d.get("kind")
            rest = {k: v for k, v in d.items() if k != "kind"}
            if kind == "dense":
                layers.append(DenseSpec(**rest))
            elif kind == "conv1d":
                layers.append(Conv1dSpec(**rest))
            elif kind == "flatten":
                layers.append(FlattenSpec())
            else:
                raise CheckpointLoad(f"unknown layer kind {kind!r}")
        return NetworkSpec(tuple(layers))


def param_count(spec: NetworkSpec) -> int:
    return spec.param_count()


# Table-of-architectures factories: the four networks of the policy stack.

def actor_spec(obs_dim: int = 10) -> NetworkSpec:
    return NetworkSpec((
        DenseSpec(obs_dim, 64, "lrelu"),
        DenseSpec(64, 64, "lrelu"),
        DenseSpec(64, 1, "linear"),
    ))


def critic_spec(obs_dim: int = 10) -> NetworkSpec:
    return NetworkSpec((
        DenseSpec(obs_dim, 64, "lrelu"),
        DenseSpec(64, 64, "lrelu"),
        DenseSpec(64, 1, "linear"),
    ))


def encoder_spec() -> NetworkSpec:
    return NetworkSpec((
        DenseSpec(1, 2, "lrelu"),
        DenseSpec(2, 1, "linear"),
    ))


def adaptation_spec(in_channels: int = 9, history_len: int = 40) -> NetworkSpec:
    conv = Conv1dSpec(in_channels, 64, 3, stride=1, padding=1, in_length=history_len)
    flat = conv.out_channels * conv.out_length
    return NetworkSpec((
        conv,
        FlattenSpec(),
        DenseSpec(flat, 256, "relu"),
        DenseSpec(256, 64, "relu"),
        DenseSpec(64, 8, "relu"),
        DenseSpec(8, 1, "linear"),
    ))


# ---------------------------------------------------------------------------
# Initialization


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    """Orthogonal matrix of the given 2-D shape, scaled by gain."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))        # fix the sign ambiguity of QR
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def init_params(spec: NetworkSpec, rng: np.random.Generator,
                hidden_gain: float = float(np.sqrt(2.0)),
                out_gain: float = 0.01) -> list[list[np.ndarray]]:
    """Orthogonal weights (scaled), zero biases; last parametric layer gets out_gain."""
    parametric = [l for l in spec.layers if not isinstance(l, FlattenSpec)]
    params: list[list[np.ndarray]] = []
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            gain = out_gain if layer is parametric[-1] else hidden_gain
            w = orthogonal(rng, (layer.in_dim, layer.out_dim), gain)
            params.append([w, np.zeros(layer.out_dim)])
        elif isinstance(layer, Conv1dSpec):
            gain = out_gain if layer is parametric[-1] else hidden_gain
            w2 = orthogonal(rng, (layer.out_channels, layer.in_channels * layer.kernel_size), gain)
            w = w2.reshape(layer.out_channels, layer.in_channels, layer.kernel_size)
            params.append([w, np.zeros(layer.out_channels)])
        else:
            params.append([])
    return params


# ---------------------------------------------------------------------------
# Network


class Network:
    """A feed-forward stack with cached activations for one backward pass."""

    def __init__(self, spec: NetworkSpec, params: list[list[np.ndarray]]):
        self.spec = spec
        self.params = params
        self.grads = [[np.zeros_like(p) for p in layer] for layer in params]
        self._cache: list[tuple] | None = None
        self._check_shapes()

    @classmethod
    def create(cls, spec: NetworkSpec, rng: np.random.Generator, **init_kw) -> "Network":
        return cls(spec, init_params(spec, rng, **init_kw))

    def _check_shapes(self) -> None:
        if len(self.params) != len(self.spec.layers):
            raise ShapeMismatch("parameter list does not match layer list")
        for layer, p in zip(self.spec.layers, self.params):
            if isinstance(layer, DenseSpec):
                if p[0].shape != (layer.in_dim, layer.out_dim) or p[1].shape != (layer.out_dim,):
                    raise ShapeMismatch(f"bad dense parameter shapes {p[0].shape}, {p[1].shape}")
            elif isinstance(layer, Conv1dSpec):
                want = (layer.out_channels, layer.in_channels, layer.kernel_size)
                if p[0].shape != want or p[1].shape != (layer.out_channels,):
                    raise ShapeMismatch(f"bad conv parameter shapes {p[0].shape}, {p[1].shape}")
            elif p:
                raise ShapeMismatch("flatten layer carries no parameters")

    def zero_grads(self) -> None:
        for layer in self.grads:
            for g in layer:
                g[...] = 0.0

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        """Run the stack on a batch; caches intermediates for `backward`."""
        caches: list[tuple] = []
        y = np.asarray(x, dtype=np.float64)
        for layer, p in zip(self.spec.layers, self.params):
            if isinstance(layer, DenseSpec):
                if y.ndim != 2 or y.shape[1] != layer.in_dim:
                    raise ShapeMismatch(
                        f"dense layer expects (B, {layer.in_dim}), got {y.shape}")
                z = y @ p[0] + p[1]
                out = _act_forward(layer.activation, z)
                caches.append((y, z, out))
                y = out
            elif isinstance(layer, Conv1dSpec):
                y, c = _conv1d_forward(y, p[0], p[1], layer)
                caches.append(c)
            else:
                caches.append((y.shape,))
                y = y.reshape(y.shape[0], -1)
        if cache:
            self._cache = caches
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients of the last cached forward pass.

        Returns the gradient with respect to the network input.
        """
        if self._cache is None:
            raise NnError("backward() requires a cached forward() on the same input")
        g = np.asarray(grad_out, dtype=np.float64)
        for layer, p, gr, c in zip(self.spec.layers[::-1], self.params[::-1],
                                   self.grads[::-1], self._cache[::-1]):
            if isinstance(layer, DenseSpec):
                x, z, y = c
                if g.shape != y.shape:
                    raise ShapeMismatch(f"gradient shape {g.shape} != output shape {y.shape}")
                gz = _act_backward(layer.activation, z, y, g)
                gr[0] += x.T @ gz
                gr[1] += gz.sum(axis=0)
                g = gz @ p[0].T
            elif isinstance(layer, Conv1dSpec):
                g = _conv1d_backward(g, p, gr, c, layer)
            else:
                (shape,) = c
                g = g.reshape(shape)
        return g

    def parameter_arrays(self) -> list[np.ndarray]:
        return [p for layer in self.params for p in layer]

    def gradient_arrays(self) -> list[np.ndarray]:
        return [g for layer in self.grads for g in layer]


def _conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: Conv1dSpec):
    if x.ndim != 3 or x.shape[1] != spec.in_channels or x.shape[2] != spec.in_length:
        raise ShapeMismatch(
            f"conv1d expects (B, {spec.in_channels}, {spec.in_length}), got {x.shape}")
    B = x.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (spec.padding, spec.padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, spec.kernel_size, axis=2)
    win = win[:, :, ::spec.stride, :]                    # (B, C_in, L_out, k)
    cols = win.transpose(0, 2, 1, 3).reshape(B, spec.out_length, -1)
    w2 = w.reshape(spec.out_channels, -1)
    z = cols @ w2.T + b                                  # (B, L_out, C_out)
    z = z.transpose(0, 2, 1)                             # (B, C_out, L_out)
    y = _act_forward(spec.activation, z)
    return y, (cols, z, y, x.shape)


def _conv1d_backward(g: np.ndarray, p, gr, cache, spec: Conv1dSpec) -> np.ndarray:
    cols, z, y, x_shape = cache
    if g.shape != y.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} != output shape {y.shape}")
    gz = _act_backward(spec.activation, z, y, g)         # (B, C_out, L_out)
    B = gz.shape[0]
    gz_t = gz.transpose(0, 2, 1)                         # (B, L_out, C_out)
    w2 = p[0].reshape(spec.out_channels, -1)
    gr[0] += (gz_t.reshape(-1, spec.out_channels).T
              @ cols.reshape(-1, cols.shape[2])).reshape(p[0].shape)
    gr[1] += gz.sum(axis=(0, 2))
    gcols = gz_t @ w2                                    # (B, L_out, C_in*k)
    gcols = gcols.reshape(B, spec.out_length, spec.in_channels, spec.kernel_size)
    gxp = np.zeros((B, spec.in_channels, spec.in_length + 2 * spec.padding))
    for j in range(spec.kernel_size):
        starts = np.arange(spec.out_length) * spec.stride + j
        np.add.at(gxp, (slice(None), slice(None), starts),
                  gcols[:, :, :, j].transpose(0, 2, 1))
    lo, hi = spec.padding, spec.padding + spec.in_length
    return gxp[:, :, lo:hi].reshape(x_shape)


# ---------------------------------------------------------------------------
# Adam


def adam_update(params: Iterable[np.ndarray], grads: Iterable[np.ndarray],
                moments: tuple[list[np.ndarray], list[np.ndarray]], lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                step: int = 1) -> None:
    """In-place Adam with bias correction; `step` counts from 1."""
    m_list, v_list = moments
    b1, b2 = betas
    params, grads = list(params), list(grads)
    if not (len(params) == len(grads) == len(m_list) == len(v_list)):
        raise ShapeMismatch("params/grads/moments length mismatch")
    for p, g, m, v in zip(params, grads, m_list, v_list):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeMismatch(f"shape mismatch in adam_update: {p.shape} vs {g.shape}")
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Stateful wrapper around `adam_update` for a fixed list of arrays."""

    def __init__(self, arrays: list[np.ndarray], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        adam_update(self.arrays, grads, (self.m, self.v), self.lr,
                    self.betas, self.eps, self.t)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state(self, state: dict) -> None:
        if len(state["m"]) != len(self.m) or len(state["v"]) != len(self.v):
            raise ShapeMismatch("optimizer state does not match parameter list")
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]
        self.t = int(state["t"])


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class PolicyCheckpoint:
    """Everything needed to resume or evaluate a training run."""

    variant: str
    seed: int
    iteration: int
    curriculum: dict
    specs: dict[str, NetworkSpec]
    params: dict[str, list[list[np.ndarray]]]
    extras: dict[str, np.ndarray] = field(default_factory=dict)     # e.g. log_std
    moments: dict[str, dict] = field(default_factory=dict)          # adam state per net
    meta: dict = field(default_factory=dict)


def spec_hash(specs: dict[str, NetworkSpec]) -> str:
    blob = json.dumps({k: v.to_json() for k, v in sorted(specs.items())},
                      sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _flatten_net_params(params: list[list[np.ndarray]]):
    for li, layer in enumerate(params):
        for pi, arr in enumerate(layer):
            yield f"{li}.{pi}", arr


def save_checkpoint(path, ckpt: PolicyCheckpoint) -> None:
    """Write the versioned container: magic, JSON header, float64-LE blobs."""
    blobs: list[np.ndarray] = []
    manifest: list[dict] = []

    def add(group: str, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"group": group, "name": name, "shape": list(arr.shape)})
        blobs.append(arr)

    for net in sorted(ckpt.params):
        for name, arr in _flatten_net_params(ckpt.params[net]):
            add(f"params/{net}", name, arr)
    for name in sorted(ckpt.extras):
        add("extras", name, ckpt.extras[name])
    for net in sorted(ckpt.moments):
        st = ckpt.moments[net]
        for kind in ("m", "v"):
            for i, arr in enumerate(st[kind]):
                add(f"moments/{net}/{kind}", str(i), arr)

    header = {
        "version": 1,
        "endianness": "<",
        "dtype": "f8",
        "variant": ckpt.variant,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "curriculum": ckpt.curriculum,
        "specs": {k: v.to_json() for k, v in sorted(ckpt.specs.items())},
        "spec_hash": spec_hash(ckpt.specs),
        "moment_steps": {k: int(v["t"]) for k, v in sorted(ckpt.moments.items())},
        "blobs": manifest,
        "meta": ckpt.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for arr in blobs:
            f.write(arr.tobytes())


def load_checkpoint(path) -> PolicyCheckpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointLoad(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointLoad(f"{path} is not a policy checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointLoad(f"corrupt checkpoint header in {path}") from e
    if header.get("version") != 1:
        raise CheckpointLoad(f"unsupported checkpoint version {header.get('version')}")

    specs = {k: NetworkSpec.from_json(v) for k, v in header["specs"].items()}
    offset = 16 + hlen
    arrays: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointLoad(f"truncated checkpoint {path}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[(entry["group"], entry["name"])] = arr.astype(np.float64)
        offset += nbytes

    params: dict[str, list[list[np.ndarray]]] = {}
    for net, spec in specs.items():
        net_params: list[list[np.ndarray]] = []
        for li, layer in enumerate(spec.layers):
            n_arrays = 0 if isinstance(layer, FlattenSpec) else 2
            net_params.append([arrays[(f"params/{net}", f"{li}.{pi}")]
                               for pi in range(n_arrays)])
        params[net] = net_params
    extras = {name: arr for (group, name), arr in arrays.items() if group == "extras"}
    moments: dict[str, dict] = {}
    for net, t in header.get("moment_steps", {}).items():
        st = {"t": t, "m": [], "v": []}
        for kind in ("m", "v"):
            i = 0
            while (f"moments/{net}/{kind}", str(i)) in arrays:
                st[kind].append(arrays[(f"moments/{net}/{kind}", str(i))])
                i += 1
        moments[net] = st
    return PolicyCheckpoint(
        variant=header["variant"], seed=header["seed"], iteration=header["iteration"],
        curriculum=header["curriculum"], specs=specs, params=params,
        extras=extras, moments=moments, meta=header.get("meta", {}),
    )
