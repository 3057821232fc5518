"""Datasets: IDX and CSV ingestion, synthetic mixtures, dense-tensor files."""
from __future__ import annotations

import csv
import gzip
import itertools
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import FormatError, InputError
from .families import Categorical, Gaussian, family_from_spec

__all__ = [
    "Dataset",
    "load_idx",
    "save_idx",
    "load_csv",
    "save_csv",
    "MixtureGenerator",
    "synth",
    "split_dataset",
    "save_dense",
    "load_dense",
    "IDX_IMAGES_MAGIC",
    "IDX_LABELS_MAGIC",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "valid", "test")


@dataclass
class Dataset:
    """An ``N x d`` data matrix plus per-variable families.

    Attributes
    ----------
    values : ndarray of shape (N, d)
        Integer categories or reals.
    families : list of Family
    split : {"train", "valid", "test"}
    image_shape : tuple of int, optional
        ``(height, width)`` for image data stored row-major.
    labels : ndarray, optional
    meta : dict
    """

    values: np.ndarray
    families: list
    split: str = "train"
    image_shape: tuple | None = None
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InputError("dataset values must be a 2-D matrix")
        if len(self.families) != self.values.shape[1]:
            raise InputError(f"{len(self.families)} families for {self.values.shape[1]} columns")
        if self.split not in SPLITS:
            raise InputError(f"split must be one of {SPLITS}")
        self.families = [family_from_spec(f) for f in self.families]
        for j, fam in enumerate(self.families):
            if isinstance(fam, Categorical):
                col = self.values[:, j]
                col = col[col != -1] if np.issubdtype(col.dtype, np.integer) else col[~np.isnan(col)]
                if col.size and (col.min() < 0 or col.max() >= fam.num_categories):
                    raise InputError(f"column {j}: values outside 0..{fam.num_categories - 1}")

    @property
    def num_vars(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    def subset(self, idx, split=None) -> Dataset:
        return Dataset(
            self.values[idx],
            self.families,
            split or self.split,
            self.image_shape,
            None if self.labels is None else self.labels[idx],
            dict(self.meta),
        )


def _open(path, mode="rb"):
    path = os.fspath(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def _read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0: expected 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimensions at offset 4: expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = int(np.prod(dims, dtype=np.int64))
    if len(raw) != header + body:
        raise FormatError(
            f"{path}: payload at offset {header}: expected {header + body} bytes in total, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, split="train") -> Dataset:
    """Load IDX image (and optional label) files; ``.gz`` files are decompressed.

    Pixels become ``Categorical(256)`` variables in row-major order.
    """
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC)
    if imgs.ndim != 3:
        raise FormatError(f"{images_path}: image files need 3 dimensions, got {imgs.ndim}")
    n, h, w = imgs.shape
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if labels.shape != (n,):
            raise FormatError(f"{labels_path}: {labels.shape[0]} labels for {n} images")
        labels = labels.astype(np.int64)
    values = imgs.reshape(n, h * w).astype(np.int64)
    return Dataset(values, [Categorical(256)] * (h * w), split, (h, w), labels)


def save_idx(path, array) -> None:
    """Write a uint8 array as IDX: 3-D arrays as images, 1-D arrays as labels."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif arr.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise InputError("IDX export supports 3-D image stacks and 1-D label vectors")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise InputError("IDX export needs values in 0..255")
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(np.uint8).tobytes())


def load_csv(path, schema=None, header="auto", split="train") -> Dataset:
    """Read a numeric CSV file.

    Parameters
    ----------
    schema : sequence of family specs, optional
        One entry per column; defaults to Gaussian for every column.
    header : bool or "auto"
        ``"auto"`` treats a first row containing a non-numeric cell as header.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise FormatError(f"{path}: empty file")

    def numeric(cell):
        try:
            float(cell)
            return True
        except ValueError:
            return False

    start = 0
    if header is True or (header == "auto" and not all(numeric(c) for c in rows[0])):
        start = 1
    width = len(rows[start]) if len(rows) > start else len(rows[0])
    if schema is not None and len(schema) != width:
        raise FormatError(f"{path}: schema has {len(schema)} columns, file has {width}")
    out = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise FormatError(f"{path}: row {i} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row, start=1):
            cell = cell.strip()
            if cell in ("", "?", "nan", "NaN"):
                out[i - start - 1, j - 1] = np.nan
                continue
            try:
                out[i - start - 1, j - 1] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell {cell!r} at row {i}, column {j}") from None
    families = [family_from_spec(s) for s in schema] if schema is not None else [Gaussian()] * width
    if all(not isinstance(f, Gaussian) for f in families):
        obs = out[~np.isnan(out)]
        if np.all(obs == np.floor(obs)):
            out = np.where(np.isnan(out), -1, out).astype(np.int64)
    return Dataset(out, families, split)


def save_csv(path, values, header=None) -> None:
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        if header is not None:
            wr.writerow(header)
        for row in values:
            wr.writerow([("" if (isinstance(v, float) and math.isnan(v)) else
                          (int(v) if float(v).is_integer() else repr(float(v)))) for v in row])


@dataclass
class MixtureGenerator:
    """Mixture of fully factorized categorical distributions.

    ``weights`` has shape ``(M,)`` and ``probs`` shape ``(M, d, C)``.
    """

    weights: np.ndarray
    probs: np.ndarray

    @classmethod
    def random(cls, num_vars=16, num_components=3, num_categories=2, concentration=0.3, seed=0):
        """Random generator whose components are well separated for small ``concentration``."""
        rng = np.random.Generator(np.random.PCG64(seed))
        weights = rng.dirichlet(np.full(num_components, 5.0))
        probs = rng.dirichlet(np.full(num_categories, concentration), size=(num_components, num_vars))
        probs = np.clip(probs, 1e-3, None)
        probs /= probs.sum(axis=-1, keepdims=True)
        return cls(weights, probs)

    @property
    def num_vars(self):
        return self.probs.shape[1]

    @property
    def num_categories(self):
        return self.probs.shape[2]

    def log_prob(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.intp)
        lp = np.log(self.probs)  # (M, d, C)
        per = lp[:, np.arange(self.num_vars)[None, :], X].sum(axis=2)  # (M, N)
        return logsumexp(per + np.log(self.weights)[:, None], axis=0)

    def sample(self, n, seed=0) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(seed))
        z = rng.choice(len(self.weights), size=n, p=self.weights)
        cdf = np.cumsum(self.probs[z], axis=2)  # (n, d, C)
        u = rng.random((n, self.num_vars, 1))
        return np.minimum((cdf < u).sum(axis=2), self.num_categories - 1).astype(np.int64)

    def entropy(self, max_states=2**22) -> float | None:
        """Exact joint entropy in nats by enumeration, ``None`` if too large."""
        total = self.num_categories ** self.num_vars
        if total > max_states:
            return None
        h = 0.0
        chunk = 1 << 16
        states = itertools.product(range(self.num_categories), repeat=self.num_vars)
        while True:
            block = np.array(list(itertools.islice(states, chunk)))
            if block.size == 0:
                break
            lp = self.log_prob(block)
            h -= float(np.sum(np.exp(lp) * lp))
        return h

    def entropy_bracket(self) -> tuple[float, float]:
        """``(H(X|Z), H(Z) + H(X|Z))`` bounds on the joint entropy (nats)."""
        p = self.probs
        h_comp = -np.sum(p * np.log(p), axis=(1, 2))
        cond = float(np.dot(self.weights, h_comp))
        h_z = -float(np.sum(self.weights * np.log(self.weights)))
        return cond, cond + h_z

    def entropy_mc(self, n=10**6, seed=0) -> float:
        """Monte-Carlo entropy estimate ``-mean log p(x)`` (nats)."""
        total, done, k = 0.0, 0, 0
        while done < n:
            m = min(100_000, n - done)
            total -= float(self.log_prob(self.sample(m, seed=seed + k)).sum())
            done += m
            k += 1
        return total / n


def synth(generator: MixtureGenerator, n: int, seed: int = 0, split="train") -> Dataset:
    """Sample a dataset and record the generator's entropy in ``meta``."""
    values = generator.sample(n, seed)
    h = generator.entropy()
    lo, hi = generator.entropy_bracket()
    meta = {
        "entropy_nats": h,
        "entropy_bracket_nats": (lo, hi),
        "entropy_bpd": None if h is None else h / (generator.num_vars * math.log(2.0)),
    }
    side = int(round(math.sqrt(generator.num_vars)))
    shape = (side, side) if side * side == generator.num_vars else None
    return Dataset(values, [Categorical(generator.num_categories)] * generator.num_vars, split, shape,
                   meta=meta)


def split_dataset(ds: Dataset, sizes, seed=0):
    """Shuffle and cut into train/valid/test datasets of the given sizes."""
    sizes = list(sizes)
    if sum(sizes) > len(ds):
        raise InputError(f"requested {sum(sizes)} rows from a dataset of {len(ds)}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(ds))
    out, start = [], 0
    for name, size in zip(SPLITS, sizes):
        out.append(ds.subset(perm[start: start + size], name))
        start += size
    return out


def save_dense(path, tensor) -> None:
    """Flat little-endian float64 binary preceded by ``dims: i1,...,id``."""
    t = np.asarray(tensor, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(("dims: " + ",".join(str(i) for i in t.shape) + "\n").encode("ascii"))
        fh.write(t.tobytes(order="C"))


def load_dense(path) -> np.ndarray:
    with open(path, "rb") as fh:
        line = fh.readline().decode("ascii", errors="replace")
        if not line.startswith("dims:"):
            raise FormatError(f"{path}: missing 'dims:' header at offset 0")
        try:
            dims = tuple(int(v) for v in line[5:].strip().split(",") if v)
        except ValueError:
            raise FormatError(f"{path}: malformed dims header {line.strip()!r}") from None
        raw = fh.read()
    expected = 8 * int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(float)
