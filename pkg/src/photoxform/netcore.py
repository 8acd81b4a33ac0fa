"""Small reverse-mode network toolkit: dense layers, activations, Adam, gradient checking.

Parameters live in one contiguous buffer (:class:`ParamStore`) with named
views into it, so the optimizer and the gradient checker work on a single
flat vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DivergenceError, FormatError

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-12


def forward_dense(W, b, x):
    if x.shape[-1] != W.shape[1]:
        raise ContractError(f"dense layer expects {W.shape[1]} inputs, got {x.shape[-1]}")
    y = x @ W.T
    if b is not None:
        y = y + b
    return y


def backward_dense(W, x, dy):
    """Returns ``(dx, dW, db)`` for ``y = x W^T + b`` over a batch."""
    if dy.shape[-1] != W.shape[0]:
        raise ContractError("output gradient does not match layer width")
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def activation(x, slope=LEAKY_SLOPE):
    # valid for 0 <= slope <= 1
    return np.maximum(x, slope * x)


def activation_backward(x, dy, slope=LEAKY_SLOPE):
    return np.where(x >= 0, dy, slope * dy)


def l2_normalize(x, eps=NORM_EPS, strict=False):
    """Row-wise unit vectors.

    Rows with norm <= eps are replaced by the first basis vector and flagged
    in the returned mask (or rejected when ``strict``).
    Returns ``(y, norm, invalid)``.
    """
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    invalid = norm[..., 0] <= eps
    if invalid.any():
        if strict:
            raise ContractError("cannot normalize a zero vector")
        safe = np.where(norm > eps, norm, 1.0)
        y = x / safe
        y[invalid] = 0.0
        y[invalid, 0] = 1.0
        return y, safe, invalid
    return x / norm, norm, invalid


def l2_normalize_backward(y, norm, invalid, dy):
    dx = (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norm
    if invalid.any():
        dx[invalid] = 0.0
    return dx


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


class ParamStore:
    """Named tensors backed by one flat buffer, plus a matching gradient buffer."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], dtype=np.float32):
        self.shapes = {k: tuple(v) for k, v in shapes.items()}
        self.dtype = np.dtype(dtype)
        self.offsets = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        self.flat = np.zeros(off, dtype=self.dtype)
        self.grad_flat = np.zeros(off, dtype=self.dtype)
        self._bind()

    def _bind(self):
        self.params = {k: self.flat[a:b].reshape(self.shapes[k]) for k, (a, b) in self.offsets.items()}
        self.grads = {k: self.grad_flat[a:b].reshape(self.shapes[k]) for k, (a, b) in self.offsets.items()}

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.shapes)

    def size(self, prefix: str = "") -> int:
        return sum(b - a for k, (a, b) in self.offsets.items() if k.startswith(prefix))

    def zero_grad(self):
        self.grad_flat[...] = 0

    def copy(self, dtype=None) -> "ParamStore":
        other = ParamStore(self.shapes, dtype or self.dtype)
        other.flat[...] = self.flat
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load(self, tensors: dict[str, np.ndarray], strict: bool = True):
        for name, arr in tensors.items():
            if name not in self.params:
                if strict:
                    raise ContractError(f"unexpected tensor {name}")
                continue
            if tuple(arr.shape) != self.shapes[name]:
                raise ContractError(f"{name}: shape {arr.shape} != {self.shapes[name]}")
            self.params[name][...] = arr


@dataclass
class Adam:
    """Bias-corrected adaptive-moment optimizer over a :class:`ParamStore`."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, store: ParamStore, mask: np.ndarray | None = None):
        """Apply one update; ``mask`` restricts the update to selected flat entries."""
        g = store.grad_flat
        if not np.all(np.isfinite(g)):
            bad = [k for k, v in store.grads.items() if not np.all(np.isfinite(v))]
            raise DivergenceError(f"non-finite gradient in {', '.join(bad)}")
        if self.m is None:
            self.m = np.zeros_like(store.flat)
            self.v = np.zeros_like(store.flat)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * (g * g)
        bc1 = 1 - b1**self.step_count
        bc2 = 1 - b2**self.step_count
        update = (self.lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.eps)
        if mask is not None:
            update *= mask
        store.flat -= update.astype(store.dtype, copy=False)


def adam_step(store: ParamStore, state: Adam, mask: np.ndarray | None = None) -> None:
    state.step(store, mask)


# -- gradient checking -------------------------------------------------------

# a loss may be returned as a sequence of terms; finite differences are then
# taken term by term, which avoids cancellation against a large constant term
LossFn = Callable[[ParamStore, bool], tuple["float | tuple[float, ...]", "np.ndarray | None"]]


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "max_error": self.max_error,
                "passed": self.passed, "groups": self.errors, "checked": self.checked}


def grad_check(loss_fn: LossFn, store: ParamStore, tolerance: float,
               max_entries: int | None = 256, rng: np.random.Generator | None = None,
               step: float = 1e-6, groups: list[str] | None = None,
               analytic: np.ndarray | None = None, floor: float = 1e-2) -> GradCheckReport:
    """Compare analytic gradients to central finite differences, per parameter tensor.

    The analytic gradient is taken at ``store``'s own precision; finite
    differences are always evaluated in float64 at the same parameter values.
    The error for a tensor is ``max|g_a - g_fd| / max(max|g_fd|, floor * G)``
    over the checked entries (at most ``max_entries`` per tensor, drawn at
    random), where ``G`` is the largest finite-difference magnitude over all
    checked tensors.  The floor keeps a tensor whose true gradient vanishes,
    such as the bias of a layer that only feeds differences, from being scored
    against pure rounding noise.
    """
    rng = rng or np.random.default_rng(0)
    if analytic is None:
        _, analytic = loss_fn(store, True)
    analytic = np.asarray(analytic, dtype=np.float64)
    ref = store.copy(np.float64)
    sampled = {}
    for name in groups or store.names():
        a, b = store.offsets[name]
        idx = np.arange(a, b)
        if max_entries is not None and len(idx) > max_entries:
            idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = ref.flat[i]
            ref.flat[i] = orig + step
            up, _ = loss_fn(ref, False)
            ref.flat[i] = orig - step
            down, _ = loss_fn(ref, False)
            ref.flat[i] = orig
            fd[j] = np.sum(np.subtract(up, down, dtype=np.float64)) / (2 * step)
        sampled[name] = (idx, fd)
    overall = max((float(np.max(np.abs(fd), initial=0.0)) for _, fd in sampled.values()), default=0.0)
    report = GradCheckReport(tolerance)
    for name, (idx, fd) in sampled.items():
        scale = max(float(np.max(np.abs(fd), initial=0.0)), floor * overall, np.finfo(float).tiny)
        report.errors[name] = float(np.max(np.abs(analytic[idx] - fd), initial=0.0) / scale)
        report.checked[name] = len(idx)
    return report


# -- PFTC tensor container ---------------------------------------------------

CKPT_MAGIC = b"PFTC"
CKPT_VERSION = 1
MANIFEST_PREFIX = "__manifest__:"


def save_tensors(path, tensors: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    """Write named float32 tensors; a manifest rides along as an empty tensor's name."""
    items = list(tensors.items())
    if manifest is not None:
        items.insert(0, (MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True),
                         np.zeros(0, dtype=np.float32)))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a PFTC checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    tensors, manifest = {}, None
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4 : off + 4 + n].decode("utf-8")
        off += 4 + n
        (rank,) = struct.unpack_from("<I", buf, off)
        dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
        if name.startswith(MANIFEST_PREFIX):
            manifest = json.loads(name[len(MANIFEST_PREFIX):])
        else:
            tensors[name] = arr
    return tensors, manifest
