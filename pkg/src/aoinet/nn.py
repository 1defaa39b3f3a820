"""Small dense-network toolkit: parameter store, taped reverse mode, MLPs, Adam.

Only the primitives the GNN and PPO need are supported. A :class:`Tape`
records each primitive's backward closure as it runs forward;
:meth:`Tape.backward` replays them in reverse and deposits parameter
gradients into the owning :class:`ParamStore`. With ``Tape(record=False)``
the same code runs as plain numpy inference.
"""

from dataclasses import dataclass
import json
import math

import numpy as np

from . import _kernels

CHECKPOINT_FORMAT = "aoinet-checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter arrays, gradient accumulators and Adam moments."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=float)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def shapes(self):
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def size(self):
        return sum(p.size for p in self.params.values())

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self):
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, vec):
        i = 0
        for p in self.params.values():
            p[...] = vec[i : i + p.size].reshape(p.shape)
            i += p.size

    def copy(self):
        out = ParamStore()
        for k, p in self.params.items():
            out.add(k, p.copy())
            out.grads[k][...] = self.grads[k]
            out.m[k][...] = self.m[k]
            out.v[k][...] = self.v[k]
        out.step = self.step
        return out

    def load_from(self, other):
        """Overwrite values, moments and step counter from ``other`` (same layout)."""
        for k in self.params:
            self.params[k][...] = other.params[k]
            self.grads[k][...] = other.grads[k]
            self.m[k][...] = other.m[k]
            self.v[k][...] = other.v[k]
        self.step = other.step

    def assert_finite(self, what="parameters"):
        for k, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite values in {what} {k!r}")


class Var:
    __slots__ = ("value", "grad", "source")

    def __init__(self, value, source=None):
        self.value = value
        self.grad = None
        self.source = source  # (store, name) for parameters

    def accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self, record=True):
        self.record = record
        self._ops = []
        self._params = []

    def _push(self, out, back):
        if self.record:
            self._ops.append((out, back))
        return out

    # -- leaves -----------------------------------------------------------
    def param(self, store, name):
        v = Var(store.params[name], (store, name))
        if self.record:
            self._params.append(v)
        return v

    def const(self, value):
        return Var(np.asarray(value, dtype=float))

    # -- primitives -------------------------------------------------------
    def affine(self, x, w, b, exact=False):
        """``x @ w + b``; ``exact`` makes every row independent of the batch bit for bit."""
        if exact:
            out = Var(_kernels.affine_rows(x.value, w.value, b.value))
        else:
            out = Var(x.value @ w.value + b.value)

        def back(g):
            x.accum(g @ w.value.T)
            w.accum(x.value.T @ g)
            b.accum(g.sum(axis=0))

        return self._push(out, back)

    def relu(self, x):
        mask = x.value > 0
        out = Var(np.where(mask, x.value, 0.0))

        def back(g):
            x.accum(g * mask)

        return self._push(out, back)

    def concat(self, xs):
        widths = [x.value.shape[1] for x in xs]
        out = Var(np.concatenate([x.value for x in xs], axis=1))

        def back(g):
            i = 0
            for x, w in zip(xs, widths):
                x.accum(g[:, i : i + w])
                i += w

        return self._push(out, back)

    def gather(self, x, idx):
        idx = np.asarray(idx, dtype=np.int64)
        n = x.value.shape[0]
        out = Var(x.value[idx])

        def back(g):
            x.accum(_kernels.segment_sum(g, idx, n))

        return self._push(out, back)

    def sub(self, a, b):
        out = Var(a.value - b.value)

        def back(g):
            a.accum(g)
            b.accum(-g)

        return self._push(out, back)

    def segment_sum(self, x, segments, n_segments):
        segments = np.asarray(segments, dtype=np.int64)
        out = Var(_kernels.segment_sum(x.value, segments, n_segments))

        def back(g):
            x.accum(g[segments])

        return self._push(out, back)

    def segment_mean(self, x, segments, n_segments):
        """Mean of rows per segment; empty segments give zeros."""
        segments = np.asarray(segments, dtype=np.int64)
        counts = np.bincount(segments, minlength=n_segments).astype(float)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        out = Var(_kernels.segment_sum(x.value, segments, n_segments) * inv[:, None])

        def back(g):
            x.accum((g * inv[:, None])[segments])

        return self._push(out, back)

    def square(self, x):
        out = Var(x.value**2)

        def back(g):
            x.accum(2.0 * x.value * g)

        return self._push(out, back)

    def sum(self, x):
        out = Var(np.array(x.value.sum()))

        def back(g):
            x.accum(np.broadcast_to(g, x.value.shape))

        return self._push(out, back)

    def scale(self, x, c):
        out = Var(x.value * c)

        def back(g):
            x.accum(g * c)

        return self._push(out, back)

    def softmax_xent(self, logits, labels):
        """Mean cross-entropy of row-wise softmax against integer labels."""
        z = logits.value
        labels = np.asarray(labels)
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(len(z))
        out = Var(np.array(-logp[rows, labels].mean()))

        def back(g):
            d = np.exp(logp)
            d[rows, labels] -= 1.0
            logits.accum(g * d / len(z))

        return self._push(out, back)

    # -- reverse pass -----------------------------------------------------
    def backward(self, seeds):
        """``seeds`` maps output Vars to their upstream gradients (scalar outputs may pass 1.0)."""
        if not self.record:
            raise RuntimeError("tape was not recording")
        for var, g in seeds.items() if isinstance(seeds, dict) else seeds:
            var.accum(np.broadcast_to(np.asarray(g, dtype=float), var.value.shape))
        for out, back in reversed(self._ops):
            if out.grad is not None:
                back(out.grad)
        for p in self._params:
            if p.grad is not None:
                store, name = p.source
                store.grads[name] += p.grad


def glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


@dataclass
class Mlp:
    """Affine layers with ReLU after every layer but the last."""

    prefix: str
    widths: tuple

    @classmethod
    def create(cls, store, prefix, widths, rng):
        widths = tuple(int(w) for w in widths)
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            store.add(f"{prefix}.w{k}", glorot(rng, a, b))
            store.add(f"{prefix}.b{k}", np.zeros(b))
        return cls(prefix, widths)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def forward(self, tape, store, x, exact=False):
        if x.value.shape[-1] != self.widths[0]:
            raise ValueError(f"{self.prefix}: input width {x.value.shape[-1]} != {self.widths[0]}")
        h = x
        for k in range(self.n_layers):
            w, b = tape.param(store, f"{self.prefix}.w{k}"), tape.param(store, f"{self.prefix}.b{k}")
            h = tape.affine(h, w, b, exact)
            if k < self.n_layers - 1:
                h = tape.relu(h)
        return h


def mlp_forward(mlp: Mlp, store, x):
    """Straight numpy evaluation; returns the output and the per-layer pre-activations."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.widths[0]:
        raise ValueError(f"{mlp.prefix}: input width {x.shape[-1]} != {mlp.widths[0]}")
    cache = []
    h = x
    for k in range(mlp.n_layers):
        z = h @ store[f"{mlp.prefix}.w{k}"] + store[f"{mlp.prefix}.b{k}"]
        cache.append(z)
        h = np.maximum(z, 0.0) if k < mlp.n_layers - 1 else z
    return h, cache


@dataclass
class LrSchedule:
    base: float = 1e-4
    decay: float = 0.95
    every: int = 500

    def __call__(self, step):
        return self.base * self.decay ** (step // self.every)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(store: ParamStore, schedule=None):
    """One Adam update from the accumulated gradients, which are then zeroed."""
    schedule = schedule or LrSchedule()
    lr = schedule(store.step)
    t = store.step + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for k, p in store.params.items():
        g = store.grads[k]
        m, v = store.m[k], store.v[k]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        g.fill(0.0)
    store.step += 1
    return lr


def save_checkpoint(path, stores: dict, meta: dict):
    """Write named stores as one JSON document; floats use round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "stores": {
            sname: {
                "step": store.step,
                "params": {
                    k: {"shape": list(p.shape), "data": p.ravel().tolist()} for k, p in store.params.items()
                },
            }
            for sname, store in stores.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def read_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return doc


def fill_store(store: ParamStore, saved: dict):
    """Copy saved arrays into a freshly built store, validating every shape."""
    params = saved["params"]
    missing = set(store.params) - set(params)
    extra = set(params) - set(store.params)
    if missing or extra:
        raise ValueError(f"checkpoint layout mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, p in store.params.items():
        shape = tuple(params[k]["shape"])
        if shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {k}: {shape} vs {p.shape}")
        p[...] = np.asarray(params[k]["data"], dtype=float).reshape(shape)
    store.step = int(saved.get("step", 0))
    return store
