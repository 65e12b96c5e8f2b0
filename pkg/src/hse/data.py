"""Dataset ingestion and the seeded synthetic hierarchical image generator.

Synthetic images are built with integer arithmetic only, from a SplitMix64
stream, so a given spec produces bit-identical files on every platform:

* level 1 picks the global shape (circle, square, triangle, cross),
* level 2 picks the colour family of the shape,
* level 3 stamps a small pattern in one quadrant of the object; the quadrant is
  fixed by the level-2 parent, so siblings differ only inside that sub-region.

SplitMix64: ``state += 0x9E3779B97F4A7C15``, then
``z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9``,
``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``, output ``z ^ (z >> 31)``
(all mod 2**64). Each image gets its own stream seeded with
:func:`derive_seed`; integers in ``[0, m)`` are drawn as ``next() % m``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .taxonomy import Taxonomy, TaxonomyError, is_consistent, parse_taxonomy, write_taxonomy

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
SHAPES = ("circle", "square", "triangle", "cross")
COLOURS = {"red": (200, 60, 50), "green": (60, 180, 70), "blue": (60, 90, 210), "yellow": (210, 190, 60)}
MARKS = ("white", "black", "checker", "stripes")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """64-bit SplitMix generator with a vectorised bulk draw."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix64(self.state)

    def below(self, m: int) -> int:
        return self.next() % m

    def bulk(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as uint64, identical to ``n`` calls of :meth:`next`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        self.state = (self.state + n * GAMMA) & MASK64
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed: ``s <- mix64(s ^ key + GAMMA)`` per key."""
    s = seed & MASK64
    for k in keys:
        s = _mix64(((s ^ (k & MASK64)) + GAMMA) & MASK64)
    return s


# -- PPM / PGM -----------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Write an 8-bit [H, W, 3] array as binary P6 or an [H, W] array as P5."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataError("PPM output requires uint8 pixels")
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise DataError(f"cannot write image of shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def _header_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read binary P6 (returns [H, W, 3]) or P5 (returns [H, W]) with maxval 255."""
    try:
        blob = Path(path).read_bytes()
        (magic, w, h, maxval), start = _header_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (OSError, ValueError, IndexError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    if magic not in (b"P6", b"P5") or maxval != 255:
        raise DataError(f"unsupported image {path}: only 8-bit P5/P6")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(blob) - start < need:
        raise DataError(f"truncated image {path}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=need, offset=start)
    return pixels.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


# -- synthetic generator --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    branching: tuple[int, ...] = (4, 2, 2)
    image_size: int = 64
    counts: tuple[int, int, int] = (40, 10, 30)
    noise: int = 24
    seed: int = 0

    def __post_init__(self):
        b = tuple(int(x) for x in self.branching)
        object.__setattr__(self, "branching", b)
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not 1 <= len(b) <= 3 or any(not 1 <= x <= 4 for x in b):
            raise DataError(f"invalid branching {b}: 1-3 levels with 1-4 children each")
        if len(self.counts) != 3 or any(c < 1 for c in self.counts):
            raise DataError(f"per-leaf counts must be three positive ints, got {self.counts}")
        if self.image_size < 16:
            raise DataError("image_size must be at least 16")
        if self.noise < 0:
            raise DataError("noise amplitude must be non-negative")

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.prod(self.branching[:i + 1])) for i in range(len(self.branching)))


def synthetic_taxonomy(spec: SyntheticSpec) -> Taxonomy:
    rows = []
    colours = list(COLOURS)
    for path in np.ndindex(*spec.branching):
        names = [SHAPES[path[0]]]
        if len(path) > 1:
            names.append(colours[path[1]])
        if len(path) > 2:
            names.append(f"mark-{MARKS[path[2]]}")
        rows.append(names)
    return Taxonomy.from_paths(rows)


def _inside(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) * 10 <= r * 8) & (np.abs(dx) * 10 <= r * 8)
    if shape == "triangle":
        # apex up; base at cy + r*7/10, sides of slope 2
        return (dy * 10 <= r * 7) & (2 * np.abs(dx) <= dy + r)
    arm = max(r // 3, 2)
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def _mark(kind: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == 0:
        return np.full((size, size), 245, dtype=np.int64)
    if kind == 1:
        return np.full((size, size), 10, dtype=np.int64)
    if kind == 2:
        return np.where(((yy // 2) + (xx // 2)) % 2 == 0, 245, 10)
    return np.where((yy // 2) % 2 == 0, 245, 10)


def render_sample(spec: SyntheticSpec, path: Sequence[int], parent_index: int, stream: SplitMix64) -> np.ndarray:
    """One [S, S, 3] uint8 image for label path ``path`` (per-level child indices)."""
    S = spec.image_size
    yy, xx = np.mgrid[0:S, 0:S]
    jitter = max(S // 20, 1)
    cy = S // 2 + stream.below(2 * jitter + 1) - jitter
    cx = S // 2 + stream.below(2 * jitter + 1) - jitter
    r = (S * 3) // 10 + stream.below(5) - 2
    img = np.empty((S, S, 3), dtype=np.int64)
    img[:] = 40 + stream.below(21)
    if len(path) > 1:
        base = COLOURS[list(COLOURS)[path[1]]]
    else:
        base = (170, 170, 170)
    colour = [c + stream.below(31) - 15 for c in base]
    mask = _inside(SHAPES[path[0]], yy, xx, cy, cx, r)
    img[mask] = colour
    if len(path) > 2:
        quadrant = parent_index % 4
        size = max(S // 8, 3)
        oy = cy + (r // 2 if quadrant >= 2 else -r // 2) - size // 2
        ox = cx + (r // 2 if quadrant % 2 else -r // 2) - size // 2
        oy, ox = min(max(oy, 0), S - size), min(max(ox, 0), S - size)
        img[oy:oy + size, ox:ox + size] = _mark(path[2], size)[..., None]
    if spec.noise:
        raw = stream.bulk(S * S * 3).reshape(S, S, 3)
        img += (raw % np.uint64(2 * spec.noise + 1)).astype(np.int64) - spec.noise
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> Path:
    """Write {taxonomy.tsv, train.tsv, val.tsv, test.tsv, images/} under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    tax = synthetic_taxonomy(spec)
    write_taxonomy(tax, out / "taxonomy.tsv")
    leaf_paths = tax.leaf_paths()
    child_paths = list(np.ndindex(*spec.branching))
    for split_id, (split, count) in enumerate(zip(SPLITS, spec.counts)):
        (out / "images" / split).mkdir(exist_ok=True)
        lines = []
        for leaf, child_path in enumerate(child_paths):
            parent = int(leaf_paths[leaf][1]) if len(child_path) > 2 else 0
            names = tax.path_names(leaf_paths[leaf])
            for k in range(count):
                stream = SplitMix64(derive_seed(spec.seed, split_id, leaf, k))
                rel = f"images/{split}/{leaf:05d}_{k:04d}.ppm"
                write_ppm(out / rel, render_sample(spec, child_path, parent, stream))
                lines.append("\t".join((rel, *names)))
        (out / f"{split}.tsv").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return out


# -- datasets -------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    label_path: tuple[int, ...]


@dataclass
class Dataset:
    taxonomy: Taxonomy
    images: list[np.ndarray] = field(default_factory=list)  # [H, W, 3] uint8
    labels: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    files: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        return Sample(to_chw(self.images[i]), tuple(int(c) for c in self.labels[i]))

    def arrays(self, dtype="float64") -> tuple[np.ndarray, np.ndarray]:
        """Stack into ``X`` [N, 3, H, W] in [0, 1] and label paths ``Y`` [N, L]."""
        if not self.images:
            return np.zeros((0, 3, 0, 0), dtype=dtype), self.labels
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise DataError(f"images have differing sizes {sorted(shapes)[:3]}; resize offline")
        X = np.stack(self.images).transpose(0, 3, 1, 2).astype(dtype) / 255.0
        return X, self.labels


def to_chw(image: np.ndarray, dtype="float64") -> np.ndarray:
    return np.asarray(image).transpose(2, 0, 1).astype(dtype) / 255.0


def load_manifest(taxonomy: Taxonomy, manifest, image_root=None) -> Dataset:
    """Read a manifest TSV (``relative_path<TAB>name_1<TAB>...<TAB>name_L``)."""
    manifest = Path(manifest)
    root = Path(image_root) if image_root is not None else manifest.parent
    ds = Dataset(taxonomy)
    labels = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        rel, *names = line.split("\t")
        try:
            path = taxonomy.resolve(names)
        except TaxonomyError as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from exc
        if not is_consistent(taxonomy, path):
            raise DataError(f"{manifest}:{lineno}: inconsistent label path {path}")
        image = read_ppm(root / rel)
        if image.ndim != 3:
            raise DataError(f"{manifest}:{lineno}: expected a colour (P6) image")
        ds.images.append(image)
        ds.files.append(rel)
        labels.append(path)
    ds.labels = np.asarray(labels, dtype=np.int64).reshape(len(labels), taxonomy.level_count)
    return ds


def load_dataset_dir(root, splits: Sequence[str] = SPLITS) -> tuple[Taxonomy, dict[str, Dataset]]:
    """Load a generated dataset directory: its taxonomy and the requested splits."""
    root = Path(root)
    tax_file = root / "taxonomy.tsv"
    if not tax_file.exists():
        raise DataError(f"{root}: missing taxonomy.tsv")
    tax = parse_taxonomy(tax_file.read_text(encoding="utf-8"))
    return tax, {s: load_manifest(tax, root / f"{s}.tsv", root) for s in splits}


def batch_iterator(n: int, batch_size: int, seed: int = 0, epoch: int = 0,
                   shuffle: bool = True) -> Iterator[np.ndarray]:
    """Index batches over ``n`` samples; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
