"""Dense matrix plumbing and a reverse-mode tape for small feedforward nets.

Everything here works on 2-D float64 numpy arrays laid out batch-first
(rows = samples, cols = features).  The tape records primitive ops in
forward order and replays them in exact reverse order on backprop, which
keeps the engine small enough to audit by hand.  All nets in this project
are feedforward with column concat/slice, so no general graph is needed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# When enabled, every tape op re-validates finiteness of its output.
DEBUG_CHECKS = False

NET_MAGIC = b"CTEDDNET"
NET_FORMAT_VERSION = 1

ACTIVATIONS = ("linear", "relu", "tanh", "softplus")


class DimensionError(ValueError):
    """Shapes do not chain; message names the offending layer."""


class TapeMismatchError(RuntimeError):
    """Tape was recorded against a different parameter store."""


def as_mat(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D row-major float64 matrix, rejecting NaN/Inf."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


def _check_finite(x: np.ndarray, where: str) -> None:
    if DEBUG_CHECKS and not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values after op '{where}'")


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray


class ParamStore:
    """Ordered, named parameter matrices with paired grad and Adam buffers."""

    def __init__(self):
        self.entries: dict[str, ParamEntry] = {}
        self.step_count = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"parameter '{name}' already exists")
        v = as_mat(value)
        self.entries[name] = ParamEntry(
            value=v,
            grad=np.zeros_like(v),
            adam_m=np.zeros_like(v),
            adam_v=np.zeros_like(v),
        )
        return v

    def __getitem__(self, name: str) -> ParamEntry:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for e in self.entries.values():
            e.grad.fill(0.0)

    def total_params(self) -> int:
        return sum(e.value.size for e in self.entries.values())

    def grad_norm(self) -> float:
        total = 0.0
        for e in self.entries.values():
            total += float(np.sum(e.grad * e.grad))
        return float(np.sqrt(total))

    def clone(self, names: list[str] | None = None) -> "ParamStore":
        """Deep copy of values (fresh grads/moments), optionally a name subset."""
        out = ParamStore()
        for name in names if names is not None else self.entries:
            out.add(name, self.entries[name].value.copy())
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, e in self.entries.items():
            src = other.entries[name]
            if src.value.shape != e.value.shape:
                raise DimensionError(f"shape mismatch for '{name}'")
            e.value[...] = src.value


def init_affine(store: ParamStore, name: str, fan_in: int, fan_out: int, rng) -> None:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    bound = 1.0 / np.sqrt(fan_in)
    store.add(name + ".W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(name + ".b", np.zeros((1, fan_out)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tape:
    """Forward-ordered op record; `backprop` replays it in reverse.

    Node ids index cached activations.  Gradients accumulate (+=) into the
    parameter stores referenced by affine ops and into per-node buffers
    retrievable with `grad` after a backprop pass.
    """

    def __init__(self):
        self._vals: list[np.ndarray] = []
        self._ops: list[tuple] = []
        self._grads: dict[int, np.ndarray] = {}
        self.input_id: int | None = None
        self.output_id: int | None = None

    # -- forward ----------------------------------------------------------

    def _push(self, x: np.ndarray) -> int:
        self._vals.append(x)
        return len(self._vals) - 1

    def value(self, nid: int) -> np.ndarray:
        return self._vals[nid]

    def input(self, x) -> int:
        return self._push(as_mat(x))

    def affine(self, store: ParamStore, name: str, x_id: int) -> int:
        w_name, b_name = name + ".W", name + ".b"
        if w_name not in store or b_name not in store:
            raise KeyError(f"layer '{name}' not found in parameter store")
        W = store[w_name].value
        b = store[b_name].value
        x = self._vals[x_id]
        if x.shape[1] != W.shape[0]:
            raise DimensionError(
                f"layer '{name}': input has {x.shape[1]} cols, weights expect {W.shape[0]}"
            )
        out = x @ W + b
        _check_finite(out, f"affine:{name}")
        nid = self._push(out)
        self._ops.append(("affine", nid, x_id, store, name))
        return nid

    def relu(self, x_id: int) -> int:
        out = np.maximum(self._vals[x_id], 0.0)
        nid = self._push(out)
        self._ops.append(("relu", nid, x_id))
        return nid

    def tanh(self, x_id: int) -> int:
        out = np.tanh(self._vals[x_id])
        nid = self._push(out)
        self._ops.append(("tanh", nid, x_id))
        return nid

    def softplus(self, x_id: int) -> int:
        out = np.logaddexp(0.0, self._vals[x_id])
        nid = self._push(out)
        self._ops.append(("softplus", nid, x_id))
        return nid

    def clip(self, x_id: int, lo: float, hi: float, escape: bool = False) -> int:
        """Clamp to [lo, hi].  With `escape`, saturated elements still pass
        gradients that point back inside the box (projected subgradient), so
        a parameter pinned at a rail can be pulled off it by later descent.
        """
        out = np.clip(self._vals[x_id], lo, hi)
        nid = self._push(out)
        self._ops.append(("clip", nid, x_id, lo, hi, escape))
        return nid

    def concat(self, ids: list[int]) -> int:
        parts = [self._vals[i] for i in ids]
        rows = parts[0].shape[0]
        for p in parts:
            if p.shape[0] != rows:
                raise DimensionError("concat: row counts differ")
        out = np.concatenate(parts, axis=1)
        nid = self._push(out)
        self._ops.append(("concat", nid, tuple(ids), tuple(p.shape[1] for p in parts)))
        return nid

    def slice_cols(self, x_id: int, lo: int, hi: int) -> int:
        out = self._vals[x_id][:, lo:hi].copy()
        nid = self._push(out)
        self._ops.append(("slice", nid, x_id, lo, hi))
        return nid

    def add(self, a_id: int, b_id: int) -> int:
        out = self._vals[a_id] + self._vals[b_id]
        nid = self._push(out)
        self._ops.append(("add", nid, a_id, b_id))
        return nid

    def mul(self, a_id: int, b_id: int) -> int:
        out = self._vals[a_id] * self._vals[b_id]
        nid = self._push(out)
        self._ops.append(("mul", nid, a_id, b_id))
        return nid

    def scale(self, x_id: int, c: float) -> int:
        out = self._vals[x_id] * c
        nid = self._push(out)
        self._ops.append(("scale", nid, x_id, c))
        return nid

    def activation(self, kind: str, x_id: int) -> int:
        if kind == "linear":
            return x_id
        if kind == "relu":
            return self.relu(x_id)
        if kind == "tanh":
            return self.tanh(x_id)
        if kind == "softplus":
            return self.softplus(x_id)
        raise ValueError(f"unknown activation '{kind}'")

    def mlp(self, store: ParamStore, layer_spec: list[tuple[str, str]], x_id: int) -> int:
        h = x_id
        for name, act in layer_spec:
            h = self.affine(store, name, h)
            h = self.activation(act, h)
        return h

    # -- backward ---------------------------------------------------------

    def backprop(self, seeds: dict[int, np.ndarray]) -> None:
        """Accumulate gradients from one or more seeded output nodes."""
        grads: dict[int, np.ndarray] = {}

        def acc(nid: int, g: np.ndarray) -> None:
            if nid in grads:
                grads[nid] += g
            else:
                grads[nid] = np.array(g, dtype=np.float64)

        for nid, dy in seeds.items():
            dy = np.asarray(dy, dtype=np.float64)
            if dy.shape != self._vals[nid].shape:
                raise DimensionError(
                    f"seed shape {dy.shape} does not match node shape {self._vals[nid].shape}"
                )
            acc(nid, dy)

        for op in reversed(self._ops):
            kind, out = op[0], op[1]
            d = grads.get(out)
            if d is None:
                continue
            if kind == "affine":
                _, _, x_id, store, name = op
                x = self._vals[x_id]
                W = store[name + ".W"].value
                store[name + ".W"].grad += x.T @ d
                store[name + ".b"].grad += d.sum(axis=0, keepdims=True)
                acc(x_id, d @ W.T)
            elif kind == "relu":
                x_id = op[2]
                acc(x_id, d * (self._vals[x_id] > 0.0))
            elif kind == "tanh":
                x_id = op[2]
                y = self._vals[out]
                acc(x_id, d * (1.0 - y * y))
            elif kind == "softplus":
                x_id = op[2]
                acc(x_id, d * _sigmoid(self._vals[x_id]))
            elif kind == "clip":
                _, _, x_id, lo, hi, escape = op
                x = self._vals[x_id]
                mask = (x > lo) & (x < hi)
                if escape:
                    # descent direction is -d: allow moves off a rail, block
                    # moves further into it
                    mask = mask | ((x >= hi) & (d > 0)) | ((x <= lo) & (d < 0))
                acc(x_id, d * mask)
            elif kind == "concat":
                _, _, ids, widths = op
                col = 0
                for i, w in zip(ids, widths):
                    acc(i, d[:, col:col + w])
                    col += w
            elif kind == "slice":
                _, _, x_id, lo, hi = op
                g = np.zeros_like(self._vals[x_id])
                g[:, lo:hi] = d
                acc(x_id, g)
            elif kind == "add":
                _, _, a_id, b_id = op
                acc(a_id, d)
                acc(b_id, d)
            elif kind == "mul":
                _, _, a_id, b_id = op
                acc(a_id, d * self._vals[b_id])
                acc(b_id, d * self._vals[a_id])
            elif kind == "scale":
                _, _, x_id, c = op
                acc(x_id, d * c)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown tape op '{kind}'")

        self._grads = grads

    def grad(self, nid: int) -> np.ndarray:
        """Gradient at a node after backprop (zeros if nothing flowed there)."""
        g = self._grads.get(nid)
        if g is None:
            return np.zeros_like(self._vals[nid])
        return g


def forward_mlp(
    params: ParamStore, layer_spec: list[tuple[str, str]], x
) -> tuple[np.ndarray, Tape]:
    """Run an MLP forward, returning the output and a replayable tape."""
    t = Tape()
    t.input_id = t.input(x)
    t.output_id = t.mlp(params, layer_spec, t.input_id)
    return t.value(t.output_id), t


def eval_mlp(params: ParamStore, layer_spec: list[tuple[str, str]], x) -> np.ndarray:
    """Tape-free MLP forward for hot paths (acting, evaluation)."""
    h = as_mat(x)
    for name, act in layer_spec:
        W = params[name + ".W"].value
        b = params[name + ".b"].value
        if h.shape[1] != W.shape[0]:
            raise DimensionError(
                f"layer '{name}': input has {h.shape[1]} cols, weights expect {W.shape[0]}"
            )
        h = h @ W + b
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
        elif act == "softplus":
            h = np.logaddexp(0.0, h)
        elif act != "linear":
            raise ValueError(f"unknown activation '{act}'")
    return h


def backward(tape: Tape, dy, params: ParamStore) -> None:
    """Accumulate d(dy^T y)/d(param) into the store the tape was built on."""
    if tape.output_id is None:
        raise TapeMismatchError("tape has no designated output; was it built by forward_mlp?")
    for op in tape._ops:
        if op[0] == "affine" and op[3] is not params:
            raise TapeMismatchError(
                f"tape layer '{op[4]}' belongs to a different parameter store"
            )
    tape.backprop({tape.output_id: np.asarray(dy, dtype=np.float64)})


def adam_step(
    params: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; grads are left untouched for the caller."""
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, e in params.entries.items():
        g = e.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        e.adam_m *= beta1
        e.adam_m += (1.0 - beta1) * g
        e.adam_v *= beta2
        e.adam_v += (1.0 - beta2) * (g * g)
        m_hat = e.adam_m / bc1
        v_hat = e.adam_v / bc2
        e.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    norm = params.grad_norm()
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for e in params.entries.values():
            e.grad *= scale
    return norm


def finite_diff_check(loss_fn, params: ParamStore, h: float = 1e-5, forward_fn=None) -> float:
    """Max relative error of analytic grads vs central finite differences.

    `loss_fn()` must return the scalar loss and add its gradient into the
    store's grad buffers (grads are zeroed here first).  `forward_fn`, when
    given, is a cheaper gradient-free evaluation used for the numeric probes.
    Error metric per element: |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"h={h} outside [1e-7, 1e-3]")
    probe = forward_fn if forward_fn is not None else loss_fn
    params.zero_grads()
    loss_fn()
    analytic = {name: e.grad.copy() for name, e in params.entries.items()}
    max_err = 0.0
    for name, e in params.entries.items():
        v = e.value
        flat = v.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(probe())
            flat[i] = orig - h
            lm = float(probe())
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    params.zero_grads()
    return max_err


# -- checkpoint serialization ---------------------------------------------


def save_params(params: ParamStore, path) -> None:
    """Write a `.net` checkpoint (values only; moments are not persisted)."""
    with open(path, "wb") as f:
        f.write(NET_MAGIC)
        f.write(struct.pack("<I", NET_FORMAT_VERSION))
        f.write(struct.pack("<I", len(params.entries)))
        for name, e in params.entries.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            rows, cols = e.value.shape
            f.write(struct.pack("<II", rows, cols))
            f.write(np.ascontiguousarray(e.value, dtype="<f8").tobytes())


def load_params(path) -> ParamStore:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != NET_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {NET_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != NET_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        store = ParamStore()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", f.read(8))
            raw = f.read(rows * cols * 8)
            if len(raw) != rows * cols * 8:
                raise ValueError(f"{path}: truncated entry '{name}'")
            store.add(name, np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy())
        return store
