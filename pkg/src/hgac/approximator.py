"""Small differentiable core: parameter stores, MLPs with explicit backprop, Adam, Polyak.

Everything is float64. Forward passes return a *record* holding whatever the
matching backward pass needs; backward passes accumulate parameter gradients
into the store and return the gradient with respect to the input.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError

_MAGIC = b"HGCK"
_VERSION = 1


class ParamStore:
    """Named float64 tensors, each with a gradient slot of the same shape."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g) -> None:
        self._grads[name] += g

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def copy(self) -> ParamStore:
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy())
        return out

    def assign(self, other: ParamStore) -> None:
        _check_same_layout(self, other)
        for name, value in other.items():
            self._values[name][...] = value

    def num_values(self) -> int:
        return sum(v.size for v in self._values.values())

    def subset(self, prefix: str) -> list[str]:
        return [n for n in self._values if n.startswith(prefix)]

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        chunks = [_MAGIC, struct.pack("<II", _VERSION, len(self._values))]
        for name, value in self._values.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> ParamStore:
        if blob[:4] != _MAGIC:
            raise ConfigError("not a parameter checkpoint")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        pos = 12
        store = cls()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            value = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store.add(name, value.astype(np.float64))
        return store

    def save(self, path) -> dict:
        """Write ``path`` (binary) and ``path.json`` (manifest); returns the manifest."""
        path = Path(path)
        blob = self.to_bytes()
        path.write_bytes(blob)
        manifest = {
            "format": "hgac-params",
            "version": _VERSION,
            "bytes": len(blob),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "git_blob_sha1": git_blob_hash(blob),
            "params": [{"name": n, "shape": list(v.shape)} for n, v in self._values.items()],
        }
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        return manifest

    @classmethod
    def load(cls, path) -> ParamStore:
        path = Path(path)
        blob = path.read_bytes()
        manifest_path = Path(str(path) + ".json")
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            if manifest.get("sha256") != hashlib.sha256(blob).hexdigest():
                raise ConfigError(f"checkpoint {path} does not match its manifest hash")
        return cls.from_bytes(blob)

    @classmethod
    def merged(cls, stores: dict[str, ParamStore]) -> ParamStore:
        out = cls()
        for prefix, store in stores.items():
            for name, value in store.items():
                out.add(f"{prefix}/{name}", value.copy())
        return out

    def split(self, prefix: str) -> ParamStore:
        out = ParamStore()
        head = prefix + "/"
        for name, value in self._values.items():
            if name.startswith(head):
                out.add(name[len(head) :], value.copy())
        return out


def git_blob_hash(blob: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _check_same_layout(a: ParamStore, b: ParamStore) -> None:
    if set(a.names()) != set(b.names()):
        missing = sorted(set(a.names()) ^ set(b.names()))
        raise ConfigError(f"parameter name sets differ: {missing[:5]}")
    for name, value in a.items():
        if value.shape != b[name].shape:
            raise ConfigError(f"shape mismatch for {name!r}: {value.shape} vs {b[name].shape}")


# -- activations -------------------------------------------------------

def dense(h, W):
    """``h @ W`` over the last axis as a single 2-D GEMM."""
    if h.ndim <= 2:
        return h @ W
    return (h.reshape(-1, h.shape[-1]) @ W).reshape(h.shape[:-1] + (W.shape[1],))


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, g):
    return g * (z > 0.0)


def _identity(z):
    return z


def _identity_grad(z, g):
    return g


def _tanh_grad(z, g):
    t = np.tanh(z)
    return g * (1.0 - t * t)


ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "identity": (_identity, _identity_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(p, g, axis=-1):
    return p * (g - (g * p).sum(axis=axis, keepdims=True))


# -- MLP -----------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, e.g. ``(8, 64, 64, 5)``."""

    widths: tuple[int, ...]
    hidden: str = "relu"
    output: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"MLP needs at least one layer of positive widths, got {self.widths}")
        activation(self.hidden)
        activation(self.output)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(spec: MlpSpec, params: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    for layer in range(spec.n_layers):
        fan_in, fan_out = spec.widths[layer], spec.widths[layer + 1]
        params.add(f"{prefix}.W{layer}", glorot(rng, fan_in, fan_out))
        params.add(f"{prefix}.b{layer}", np.zeros(fan_out))


@dataclass
class MlpRecord:
    inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


def mlp_forward(spec: MlpSpec, params: ParamStore, prefix: str, x, record: bool = True):
    """Apply the MLP to the last axis of ``x``; returns ``(y, record)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.widths[0]:
        raise ConfigError(f"{prefix}: input width {x.shape[-1]} != {spec.widths[0]}")
    rec = MlpRecord() if record else None
    h = x
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        z = dense(h, params[f"{prefix}.W{layer}"])
        z += params[f"{prefix}.b{layer}"]
        if rec is not None:
            rec.inputs.append(h)
            rec.preacts.append(z)
        h = activation(spec.output if layer == last else spec.hidden)[0](z)
    return h, rec


def mlp_backward(spec: MlpSpec, params: ParamStore, prefix: str, rec: MlpRecord, gy, need_input_grad=True):
    g = gy
    last = spec.n_layers - 1
    for layer in range(last, -1, -1):
        g = activation(spec.output if layer == last else spec.hidden)[1](rec.preacts[layer], g)
        h = rec.inputs[layer]
        W = params[f"{prefix}.W{layer}"]
        params.accumulate(f"{prefix}.W{layer}", h.reshape(-1, h.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        params.accumulate(f"{prefix}.b{layer}", g.reshape(-1, g.shape[-1]).sum(axis=0))
        if layer > 0 or need_input_grad:
            g = dense(g, W.T)
    return g if need_input_grad else None


# -- optimisation --------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_norm=None):
        self.params = params
        self.max_grad_norm = max_grad_norm
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, value in params.items():
            self.state.m[name] = np.zeros_like(value)
            self.state.v[name] = np.zeros_like(value)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((self.params.grad(n) ** 2).sum()) for n in self.params.names())))

    def step(self) -> None:
        adam_step(self.params, self.state, self.max_grad_norm)


def adam_step(params: ParamStore, opt: OptimizerState, max_grad_norm=None) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for name in params.names():
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    scale = 1.0
    if max_grad_norm is not None:
        norm = np.sqrt(sum(float((params.grad(n) ** 2).sum()) for n in params.names()))
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, value in params.items():
        g = params.grad(name) * scale if scale != 1.0 else params.grad(name)
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    params.zero_grad()


def polyak_update(target: ParamStore, online: ParamStore, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    _check_same_layout(target, online)
    for name, value in target.items():
        if tau == 1.0:
            value[...] = online[name]
        elif tau != 0.0:
            value *= 1.0 - tau
            value += tau * online[name]
