"""Model persistence: a small self-describing binary container.

Layout (all integers little-endian):
  magic  b"ADVLAB\\0"            7 bytes
  version u32                    currently 1
  arch    u32 length + utf-8
  regime  u32 length + utf-8     flat-text regime snapshot (may be empty)
  seed    i64
  epoch   u32
  nblobs  u32
  blob*   name (u32 len + utf-8), ndim u32, dims u32*, float32 payload

Floats are raw little-endian IEEE-754 singles, so save -> load -> save is
byte-identical. Loading validates magic, version, arch, blob names and
shapes; any violation raises before any parameter is touched.
"""

import io
import struct

import numpy as np

from . import nn
from .ioutil import atomic_write_bytes

MAGIC = b"ADVLAB\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading "
                                  f"{what} at offset {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def i64(self, what):
        return struct.unpack("<q", self.take(8, what))[0]

    def string(self, what):
        n = self.u32(what + " length")
        return self.take(n, what).decode("utf-8")


def save_checkpoint(net, meta, path):
    """meta: dict with optional 'seed', 'epoch', 'regime' (flat text)."""
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(_pack_str(net.arch))
    out.write(_pack_str(meta.get("regime", "")))
    out.write(struct.pack("<q", int(meta.get("seed", 0))))
    out.write(struct.pack("<I", int(meta.get("epoch", 0))))
    params = net.state_arrays()
    out.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.write(_pack_str(name))
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    atomic_write_bytes(path, out.getvalue())


def load_checkpoint(path):
    """Returns (net, meta). Raises CheckpointError before touching any
    parameter if the container is invalid."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, "
                              f"expected {VERSION}")
    arch = r.string("arch")
    regime = r.string("regime snapshot")
    seed = r.i64("seed")
    epoch = r.u32("epoch")
    nblobs = r.u32("blob count")
    blobs = {}
    for _ in range(nblobs):
        name = r.string("blob name")
        ndim = r.u32(f"{name} ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} dims"))
        count = int(np.prod(dims)) if ndim else 1
        payload = r.take(4 * count, f"{name} payload")
        blobs[name] = np.frombuffer(payload, "<f4").reshape(dims)
    if r.off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.off} trailing bytes")
    net = nn.build_network(arch)
    want = set(net.params)
    if set(blobs) != want:
        raise CheckpointError(f"{path}: blob names {sorted(blobs)} do not "
                              f"match architecture {arch}")
    net.load_state(blobs)
    return net, {"seed": seed, "epoch": epoch, "regime": regime}
