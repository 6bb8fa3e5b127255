"""Named parameters, optimizer state, seeding and the MGF1 weight format."""
import struct
from pathlib import Path

import numpy as np

from . import kernels
from .tensor import Tensor

MAGIC = b"MGF1"


def make_rng(seed, *stream):
    """PCG64 generator keyed by ``seed`` plus optional stream indices.

    ``make_rng(7, 3)`` and ``make_rng(7, 4)`` are independent streams; the
    sequence depends only on the key, never on thread count.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


class ParamStore:
    """Ordered named parameters plus non-trainable buffers and Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self._flat = None

    def add(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._flat = None
        return t

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def n_values(self):
        return sum(t.data.size for t in self.params.values())

    def state_arrays(self):
        """All persistable arrays, parameters first, in insertion order."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays, strict=True):
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        if strict and (missing or extra):
            raise ValueError(f"weight mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, a in arrays.items():
            target = self.params[k].data if k in self.params else self.buffers.get(k)
            if target is None:
                continue
            if target.shape != a.shape:
                raise ValueError(f"weight {k!r}: shape {a.shape} != expected {target.shape}")
            target[...] = a

    def copy(self):
        other = ParamStore()
        for k, t in self.params.items():
            other.add(k, t.data.copy())
        for k, b in self.buffers.items():
            other.add_buffer(k, b.copy())
        return other


    def pack(self):
        """Move all parameters and Adam moments into three flat buffers.

        Each ``params[k].data`` (and ``m[k]``, ``v[k]``) becomes a view into
        the shared buffer, so the optimizer can update everything with a
        handful of vector operations.  Arrays obtained from ``.data`` before
        packing are no longer the live parameters.
        """
        if self._flat is not None:
            return self._flat
        sizes = [t.data.size for t in self.params.values()]
        total = int(sum(sizes))
        bufs = {"p": np.empty(total), "m": np.zeros(total), "v": np.zeros(total)}
        off = 0
        for (k, t), n in zip(self.params.items(), sizes):
            sl = slice(off, off + n)
            view = bufs["p"][sl].reshape(t.data.shape)
            view[...] = t.data
            t.data = view
            for key, d in (("m", self.m), ("v", self.v)):
                mv = bufs[key][sl].reshape(view.shape)
                if k in d:
                    mv[...] = d[k]
                d[k] = mv
            off += n
        self._flat = bufs
        return bufs


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter in ``store``."""
    missing = [k for k, t in store.params.items() if t.grad is None]
    if missing:
        raise RuntimeError(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    if not store.params:
        return store
    flat = store.pack()
    g = np.concatenate([t.grad.reshape(-1) for t in store.params.values()])
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    kernels.adam_update(flat["p"], flat["m"], flat["v"], g, lr, beta1, beta2, c1, c2, eps)
    return store


# ---------------------------------------------------------------------------
# MGF1: b"MGF1", u64 count, then per tensor
#   u64 name length, UTF-8 name, u64 rank, rank x u64 extents, f64 values
# all little endian, values row-major.
# ---------------------------------------------------------------------------


def save_mgf(path, arrays):
    chunks = [MAGIC, struct.pack("<Q", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_mgf(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an MGF1 file")
    pos = 4
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_store(path, store):
    save_mgf(path, store.state_arrays())


def load_store(path, store):
    store.load_arrays(load_mgf(path))
    return store


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
