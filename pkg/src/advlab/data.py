"""Datasets: IDX and CIFAR-binary ingestion plus a synthetic digit corpus.

Images are float32 NCHW in [0,1] (raw bytes / 255); labels are int64. The
synthetic corpus renders a 5x7 bitmap font into 28x28 frames with random
affine jitter, so the lab runs end to end with no external downloads. It is
deliberately MNIST-shaped: one channel, ten classes, soft strokes.
"""

import os
import struct

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised when a dataset file violates its binary format."""


class Dataset:
    """images: float32 [N,C,H,W] in [0,1]; labels: int64 [N]."""

    def __init__(self, images, labels, split, subset=None):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError("images must be [N,C,H,W] with matching labels")
        if len(images) and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image values must lie in [0,1]")
        if len(labels) and (labels.min() < 0 or labels.max() > 9):
            raise ValueError("labels must lie in [0, 10)")
        self.images = images
        self.labels = labels
        self.split = split
        self.subset = subset

    def __len__(self):
        return len(self.images)


def subset(ds, spec, seed=0):
    """Restrict a dataset: spec 'first:K' or 'sample:K' (seeded, no repeats)."""
    kind, _, arg = spec.partition(":")
    try:
        k = int(arg)
    except ValueError:
        raise ValueError(f"bad subset spec {spec!r}") from None
    if k < 0 or k > len(ds):
        raise ValueError(f"subset size {k} out of range for {len(ds)} samples")
    if kind == "first":
        idx = np.arange(k)
    elif kind == "sample":
        idx = np.sort(np.random.default_rng(seed).choice(len(ds), k, False))
    else:
        raise ValueError(f"bad subset spec {spec!r}")
    return Dataset(ds.images[idx], ds.labels[idx], ds.split, subset=spec)


# ------------------------------------------------------------------ IDX files

def _read_exact(path):
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx_header(buf, path, magic_want, ndim):
    if len(buf) < 4 * (1 + ndim):
        raise DataFormatError(f"{path}: truncated header "
                              f"({len(buf)} bytes at offset 0)")
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic != magic_want:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0 "
                              f"(expected 0x{magic_want:08x})")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    return dims, 4 * (1 + ndim)


def load_idx(images_path, labels_path):
    """Parse the big-endian IDX pair into a Dataset (pixels / 255)."""
    ibuf = _read_exact(images_path)
    (n, h, w), off = _parse_idx_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    want = n * h * w
    if len(ibuf) - off != want:
        raise DataFormatError(f"{images_path}: expected {want} pixel bytes "
                              f"after offset {off}, found {len(ibuf) - off}")
    images = np.frombuffer(ibuf, np.uint8, count=want, offset=off)
    images = images.reshape(n, 1, h, w).astype(np.float32) / 255.0

    lbuf = _read_exact(labels_path)
    (nl,), loff = _parse_idx_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbuf) - loff != nl:
        raise DataFormatError(f"{labels_path}: expected {nl} label bytes "
                              f"after offset {loff}, found {len(lbuf) - loff}")
    if nl != n:
        raise DataFormatError(f"label count {nl} != image count {n}")
    labels = np.frombuffer(lbuf, np.uint8, count=nl, offset=loff)
    split = "train" if "train" in os.path.basename(images_path) else "test"
    return Dataset(images, labels.astype(np.int64), split)


def write_idx(images_u8, labels_u8, images_path, labels_path):
    """Emit an IDX pair (uint8 images [N,H,W]); atomic, bit-exact round trip."""
    images_u8 = np.ascontiguousarray(images_u8, dtype=np.uint8)
    labels_u8 = np.ascontiguousarray(labels_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    from .ioutil import atomic_write_bytes
    atomic_write_bytes(images_path,
                       struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w)
                       + images_u8.tobytes())
    atomic_write_bytes(labels_path,
                       struct.pack(">II", IDX_LABELS_MAGIC, n)
                       + labels_u8.tobytes())


# ------------------------------------------------------------- CIFAR binary

def load_cifar_binary(path):
    """Records of 1 label byte + 3072 channel-major pixel bytes."""
    buf = _read_exact(path)
    if len(buf) == 0 or len(buf) % 3073 != 0:
        raise DataFormatError(f"{path}: size {len(buf)} is not a whole number "
                              f"of 3073-byte records (truncated record)")
    raw = np.frombuffer(buf, np.uint8).reshape(-1, 3073)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    split = "train" if "train" in os.path.basename(path) else "test"
    return Dataset(images, labels, split)


# -------------------------------------------------------- synthetic corpus

_GLYPHS = {
    0: (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    1: ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    2: (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    3: (".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."),
    4: ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    5: ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    6: ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    7: ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    8: (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    9: (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


def _glyph_canvas(digit):
    """Upscaled glyph centered on a 28x28 canvas, float in {0,1}."""
    g = np.array([[c == "#" for c in row] for row in _GLYPHS[digit]],
                 dtype=np.float32)
    big = np.kron(g, np.ones((3, 3), np.float32))  # 21x15
    canvas = np.zeros((28, 28), np.float32)
    canvas[3:24, 6:21] = big
    return canvas


_BASE = None


def _bases():
    global _BASE
    if _BASE is None:
        _BASE = np.stack([_glyph_canvas(d) for d in range(10)])
    return _BASE


def synth_digits(n, seed):
    """Render n jittered digit images. Returns (uint8 [n,28,28], uint8 [n]).

    Per image, a fixed-order draw of rotation, log-scale, shear, translation
    and brightness keeps the stream reproducible; labels cycle 0..9 and the
    order is shuffled once at the end.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = np.empty((n, 28, 28), np.uint8)
    bases = _bases()
    center = np.array([13.5, 13.5])
    for i in range(n):
        theta = rng.uniform(-0.25, 0.25)
        s = np.exp(rng.uniform(-0.12, 0.12))
        shear = rng.uniform(-0.15, 0.15)
        shift = rng.uniform(-1.5, 1.5, size=2)
        bright = rng.uniform(0.75, 1.0)
        c, sn = np.cos(theta), np.sin(theta)
        mat = np.array([[c, -sn], [sn, c]]) @ np.array([[1.0, shear],
                                                        [0.0, 1.0]]) * s
        # affine_transform pulls: output(o) = input(mat @ o + offset)
        offset = center - mat @ center + shift
        img = ndimage.affine_transform(bases[labels[i]], mat, offset=offset,
                                       order=1, mode="constant", cval=0.0)
        np.clip(img * bright, 0.0, 1.0, out=img)
        images[i] = np.round(img * 255.0).astype(np.uint8)
    perm = rng.permutation(n)
    return images[perm], labels[perm].astype(np.uint8)


def write_synth_idx(out_dir, n_train, n_test, seed):
    """Generate and save the synthetic corpus as standard IDX pairs."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for split, count, sub in (("train", n_train, 0), ("test", n_test, 1)):
        imgs, labels = synth_digits(count, np.random.SeedSequence(
            [seed, sub]).generate_state(1)[0])
        ip = os.path.join(out_dir, f"{split}-images-idx3-ubyte")
        lp = os.path.join(out_dir, f"{split}-labels-idx1-ubyte")
        write_idx(imgs, labels, ip, lp)
        paths[split] = (ip, lp)
    return paths


def load_synth(n_train, n_test, seed):
    """In-memory synthetic corpus, same pixels as the IDX route."""
    tr_i, tr_l = synth_digits(n_train,
                              np.random.SeedSequence([seed, 0]).generate_state(1)[0])
    te_i, te_l = synth_digits(n_test,
                              np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    train = Dataset(tr_i[:, None].astype(np.float32) / 255.0,
                    tr_l.astype(np.int64), "train")
    test = Dataset(te_i[:, None].astype(np.float32) / 255.0,
                   te_l.astype(np.int64), "test")
    return train, test
