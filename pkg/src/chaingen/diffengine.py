"""Dense-array numerics with reverse-mode differentiation.

Arrays are ``torch`` tensors (64-bit by default) and the expression tape is
torch autograd.  This module pins down the primitive set the models are
written against, adds shape-checked wrappers with named errors, the Adam
update used for training, a versioned checkpoint container and a
central-difference gradient oracle that only ever calls forward passes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

DTYPE = torch.float64


class ShapeError(ValueError):
    def __init__(self, primitive: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {shown}")
        self.primitive = primitive
        self.shapes = shapes


def as_array(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


# ----------------------------------------------------------------------------
# primitives


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != (b.shape[-2] if b.dim() > 1 else b.shape[0]):
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _broadcastable(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(name, a.shape, b.shape) from None


def add(a, b):
    _broadcastable("add", a, b)
    return a + b


def multiply(a, b):
    _broadcastable("multiply", a, b)
    return a * b


def concat(xs, dim: int = -1):
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref):
            raise ShapeError("concat", *[x.shape for x in xs])
        d = dim % len(ref)
        if other[:d] + other[d + 1:] != ref[:d] + ref[d + 1:]:
            raise ShapeError("concat", *[x.shape for x in xs])
    return torch.cat(list(xs), dim=dim)


def slice_(x, dim: int, start: int, stop: int):
    if not (0 <= start <= stop <= x.shape[dim]):
        raise ShapeError("slice", x.shape, (start, stop))
    return x.narrow(dim, start, stop - start)


def embedding(table: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    if index.numel() and (int(index.min()) < 0 or int(index.max()) >= table.shape[0]):
        raise ShapeError("embedding", table.shape, index.shape)
    return table[index]


def segment_sum(values: torch.Tensor, segment: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``segment``."""
    if values.shape[0] != segment.shape[0]:
        raise ShapeError("segment_sum", values.shape, segment.shape)
    out = values.new_zeros((n_segments,) + tuple(values.shape[1:]))
    return out.index_add(0, segment, values)


def reduce_sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim)


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Normalise the last axis to zero mean, unit (biased) variance; no affine."""
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def silu(x):
    return x * torch.sigmoid(x)


def sigmoid(x):
    return torch.sigmoid(x)


def exp(x):
    return torch.exp(x)


def log_(x):
    return torch.log(x)


def masked_fill(x: torch.Tensor, mask: torch.Tensor, value: float) -> torch.Tensor:
    _broadcastable("masked_fill", x, mask)
    return x.masked_fill(mask, value)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul, "add": add, "multiply": multiply, "concat": concat, "slice": slice_,
    "embedding": embedding, "segment_sum": segment_sum, "sum": reduce_sum, "mean": reduce_mean,
    "layer_norm": layer_norm, "softmax": softmax, "silu": silu, "sigmoid": sigmoid,
    "exp": exp, "log": log_, "masked_fill": masked_fill,
}


# ----------------------------------------------------------------------------
# gradients


def gradients(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter (zeros if unused)."""
    if loss.numel() != 1:
        raise ValueError(f"gradients need a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (torch.zeros_like(params[n]) if g is None else g) for n, g in zip(names, grads)}


def numerical_gradient(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to the tensor ``x`` (perturbed in place)."""
    out = np.zeros(tuple(x.shape))
    flat = x.data.view(-1)
    view = out.reshape(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + h
            up = float(fn())
            flat[k] = orig - h
            down = float(fn())
            flat[k] = orig
            view[k] = (up - down) / (2 * h)
    return out


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return float(np.linalg.norm(a - n))
    return float(np.linalg.norm(a - n) / scale)


def gradient_check(fn: Callable[[], torch.Tensor], tensors: Mapping[str, torch.Tensor], h: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare autograd against central differences for each named tensor; returns relative errors.

    ``max_entries`` restricts the finite-difference sweep to a random subset
    of entries per tensor, which keeps large modules tractable.
    """
    loss = fn()
    analytic = gradients(loss, dict(tensors))
    rng = np.random.default_rng(seed)
    errors = {}
    for name, x in tensors.items():
        a = analytic[name].detach().numpy().ravel()
        if max_entries is None or x.numel() <= max_entries:
            errors[name] = relative_error(a, numerical_gradient(fn, x, h).ravel())
            continue
        picks = rng.choice(x.numel(), size=max_entries, replace=False)
        flat = x.data.view(-1)
        num = np.zeros(max_entries)
        with torch.no_grad():
            for slot, k in enumerate(picks):
                orig = flat[k].item()
                flat[k] = orig + h
                up = float(fn())
                flat[k] = orig - h
                down = float(fn())
                flat[k] = orig
                num[slot] = (up - down) / (2 * h)
        errors[name] = relative_error(a[picks], num)
    return errors


# ----------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction over named parameters.

    A step whose gradients contain a non-finite value is skipped entirely and
    counted in ``skipped``.
    """

    def __init__(self, params: Mapping[str, torch.nn.Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, clip_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.skipped = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor] | None = None) -> bool:
        if grads is None:
            grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}
        if not all(torch.isfinite(g).all() for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient at step %d; update skipped", self.t + 1)
            return False
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / (total + 1e-12)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = grads[n] * scale
            if self.weight_decay:
                g = g + self.weight_decay * p
            self.m[n].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            self.v[n].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(self.lr * (self.m[n] / c1) / (torch.sqrt(self.v[n] / c2) + self.eps))
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([float(self.t)])}
        for n in self.params:
            out[f"adam/m/{n}"] = self.m[n].detach().numpy().copy()
            out[f"adam/v/{n}"] = self.v[n].detach().numpy().copy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if "adam/t" not in arrays:
            return
        self.t = int(arrays["adam/t"][0])
        for n in self.params:
            self.m[n] = torch.as_tensor(arrays[f"adam/m/{n}"]).clone()
            self.v[n] = torch.as_tensor(arrays[f"adam/v/{n}"]).clone()


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: Adam) -> bool:
    """Functional spelling of :meth:`Adam.step` for an existing optimiser state."""
    state.params.update(params)
    return state.step(grads)


# ----------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CHGNCKPT"
FORMAT_VERSION = 1


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], config: Mapping | None = None,
                    extra: Mapping | None = None) -> None:
    """Write ``MAGIC | version | manifest length | manifest JSON | raw float64 little-endian data``."""
    config = dict(config or {})
    entries, blobs, offset = [], [], 0
    for name in arrays:
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "tensors": entries,
        "extra": dict(extra or {}),
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version > FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    manifest = json.loads(data[start:start + hlen])
    body = start + hlen
    arrays = {}
    for e in manifest["tensors"]:
        buf = data[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
    return arrays, manifest


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Snapshot of the module state; arrays are copies, so later training does not alter them."""
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in arrays:
            raise KeyError(f"checkpoint lacks tensor {key!r}")
        state[k] = torch.as_tensor(arrays[key]).to(v.dtype).reshape(v.shape)
    module.load_state_dict(state)


def named_parameters(modules: Iterable[tuple[str, torch.nn.Module]]) -> dict[str, torch.nn.Parameter]:
    out = {}
    for prefix, m in modules:
        for n, p in m.named_parameters():
            if p.requires_grad:
                out[f"{prefix}{n}"] = p
    return out
