"""
Synthetic lithography layout data
Generates 12x12 binary layout clips (hotspot / non-hotspot), reads and writes
the LHD1 dataset file format, splits public/private data and partitions the
private pool across clients (IID or Dirichlet label skew).
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

GRID = 12
NON_HOTSPOT = 0
HOTSPOT = 1
MOTIFS = ("bridge", "necking", "shorten")
# Design rule used by both the generator and the verifier (pixels)
MIN_FEATURE = 2
RECT_SIZES = (2, 7)

MAGIC = b"LHD1"
_HEADER = struct.Struct("<4sIHH")
_RECORD = 1 + GRID * GRID

# int seed or a sequence of ints (independent stream key)
SeedLike = Union[int, Sequence[int]]


class DatasetPreset(NamedTuple):
    train: int
    train_hotspots: int
    test: int
    test_hotspots: int

    @property
    def train_rate(self) -> float:
        return self.train_hotspots / self.train

    @property
    def test_rate(self) -> float:
        return self.test_hotspots / self.test


# Class balance of the two benchmark datasets (train / test)
PRESETS = {
    "iccad": DatasetPreset(18300, 1204, 141372, 2524),
    "fab": DatasetPreset(59112, 2903, 14853, 565),
}


class DatasetError(ValueError):
    """Invalid dataset operation"""


class DatasetFormatError(DatasetError):
    """Dataset file could not be decoded"""

    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


class Sample(NamedTuple):
    grid: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered, immutable collection of labeled 12x12 clips"""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64).reshape(-1, GRID, GRID)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if not np.isin(images, (0.0, 1.0)).all():
            raise DatasetError("grid entries must be 0.0 or 1.0")
        if not np.isin(labels, (NON_HOTSPOT, HOTSPOT)).all():
            raise DatasetError("labels must be 0 (non-hotspot) or 1 (hotspot)")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], name: str = "dataset") -> "Dataset":
        images = np.array([s.grid for s in samples], dtype=np.float64).reshape(-1, GRID, GRID)
        return cls(images, np.array([s.label for s in samples], dtype=np.int64), name)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.images[index], int(self.labels[index]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        """Same clips and labels in the same order; the name is a display label only"""
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.images, other.images) and np.array_equal(self.labels, other.labels)

    __hash__ = None

    def inputs(self, indices=None) -> np.ndarray:
        """Model input batch of shape (n, 12, 12, 1)"""
        images = self.images if indices is None else self.images[indices]
        return images[..., np.newaxis]

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name)

    @property
    def hotspot_count(self) -> int:
        return int(self.labels.sum())

    @property
    def hotspot_rate(self) -> float:
        return self.hotspot_count / len(self) if len(self) else 0.0


# ---------------------------------------------------------------------------
# Rule-based verifier
# ---------------------------------------------------------------------------

def _line_violations(line: np.ndarray) -> bool:
    edges = np.flatnonzero(np.diff(np.concatenate(([0], line.astype(np.int8), [0]))))
    starts, ends = edges[0::2], edges[1::2]
    if np.any(ends - starts < MIN_FEATURE):
        return True
    # interior spacing between consecutive features on this line
    return bool(np.any(starts[1:] - ends[:-1] < MIN_FEATURE))


def has_violation(grid: np.ndarray) -> bool:
    """Min-width / min-spacing scan over every row and column"""
    grid = np.asarray(grid)
    return any(_line_violations(row) for row in grid) or any(_line_violations(col) for col in grid.T)


def rule_label(grid: np.ndarray) -> int:
    return HOTSPOT if has_violation(grid) else NON_HOTSPOT


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

class Rect(NamedTuple):
    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def height(self) -> int:
        return self.r1 - self.r0 + 1

    @property
    def width(self) -> int:
        return self.c1 - self.c0 + 1


def _gap(a0: int, a1: int, b0: int, b1: int) -> int:
    """Empty pixels between two closed intervals, -1 when they overlap"""
    if a1 < b0:
        return b0 - a1 - 1
    if b1 < a0:
        return a0 - b1 - 1
    return -1


def _separated(a: Rect, b: Rect) -> bool:
    return (_gap(a.r0, a.r1, b.r0, b.r1) >= MIN_FEATURE
            or _gap(a.c0, a.c1, b.c0, b.c1) >= MIN_FEATURE)


class LayoutGenerator:
    """Draws clean base layouts and stamps bridge / necking / shorten defects"""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def random_rect(self) -> Rect:
        low, high = RECT_SIZES
        h = int(self.rng.integers(low, high + 1))
        w = int(self.rng.integers(low, high + 1))
        r0 = int(self.rng.integers(0, GRID - h + 1))
        c0 = int(self.rng.integers(0, GRID - w + 1))
        return Rect(r0, c0, r0 + h - 1, c0 + w - 1)

    def base_layout(self, max_attempts: int = 100) -> List[Rect]:
        """2-3 rectangles with pairwise spacing >= MIN_FEATURE"""
        while True:
            count = int(self.rng.integers(2, 4))
            rects: List[Rect] = []
            for _ in range(max_attempts):
                candidate = self.random_rect()
                if all(_separated(candidate, r) for r in rects):
                    rects.append(candidate)
                    if len(rects) == count:
                        return rects

    @staticmethod
    def render(rects: Sequence[Rect]) -> np.ndarray:
        grid = np.zeros((GRID, GRID), dtype=np.float64)
        for r in rects:
            grid[r.r0:r.r1 + 1, r.c0:r.c1 + 1] = 1.0
        return grid

    def _bridge(self, grid: np.ndarray, rects: Sequence[Rect]) -> Optional[np.ndarray]:
        options = []
        for i, a in enumerate(rects):
            for b in rects[i + 1:]:
                if _gap(a.r0, a.r1, b.r0, b.r1) < 0:
                    options.append(("h", a, b))
                if _gap(a.c0, a.c1, b.c0, b.c1) < 0:
                    options.append(("v", a, b))
        if not options:
            return None
        axis, a, b = options[int(self.rng.integers(len(options)))]
        if axis == "h":
            left, right = (a, b) if a.c1 < b.c0 else (b, a)
            row = int(self.rng.integers(max(a.r0, b.r0), min(a.r1, b.r1) + 1))
            grid[row, left.c1 + 1:right.c0] = 1.0
        else:
            top, bottom = (a, b) if a.r1 < b.r0 else (b, a)
            col = int(self.rng.integers(max(a.c0, b.c0), min(a.c1, b.c1) + 1))
            grid[top.r1 + 1:bottom.r0, col] = 1.0
        return grid

    def _necking(self, grid: np.ndarray, rects: Sequence[Rect]) -> Optional[np.ndarray]:
        options = [(r, "col") for r in rects if r.width >= 3] + [(r, "row") for r in rects if r.height >= 3]
        if not options:
            return None
        rect, axis = options[int(self.rng.integers(len(options)))]
        if axis == "col":
            col = int(self.rng.integers(rect.c0 + 1, rect.c1))
            keep = int(self.rng.integers(rect.r0, rect.r1 + 1))
            grid[rect.r0:rect.r1 + 1, col] = 0.0
            grid[keep, col] = 1.0
        else:
            row = int(self.rng.integers(rect.r0 + 1, rect.r1))
            keep = int(self.rng.integers(rect.c0, rect.c1 + 1))
            grid[row, rect.c0:rect.c1 + 1] = 0.0
            grid[row, keep] = 1.0
        return grid

    def _shorten(self, grid: np.ndarray, rects: Sequence[Rect]) -> Optional[np.ndarray]:
        options = ([(r, "col") for r in rects if r.width >= 2 * MIN_FEATURE + 1]
                   + [(r, "row") for r in rects if r.height >= 2 * MIN_FEATURE + 1])
        if not options:
            return None
        rect, axis = options[int(self.rng.integers(len(options)))]
        if axis == "col":
            col = int(self.rng.integers(rect.c0 + MIN_FEATURE, rect.c1 - MIN_FEATURE + 1))
            grid[rect.r0:rect.r1 + 1, col] = 0.0
        else:
            row = int(self.rng.integers(rect.r0 + MIN_FEATURE, rect.r1 - MIN_FEATURE + 1))
            grid[row, rect.c0:rect.c1 + 1] = 0.0
        return grid

    def draw(self, label: int) -> np.ndarray:
        """One clip whose rule-based label equals `label`"""
        motif = MOTIFS[int(self.rng.integers(len(MOTIFS)))] if label == HOTSPOT else None
        stamp = {"bridge": self._bridge, "necking": self._necking, "shorten": self._shorten}.get(motif)
        while True:
            rects = self.base_layout()
            grid = self.render(rects)
            if stamp is not None:
                grid = stamp(grid, rects)
                if grid is None:
                    continue
            if rule_label(grid) == label:
                return grid


def hotspot_count(n: int, hotspot_rate: float) -> int:
    """Hotspots in a generated set: round half up, at least one of each class"""
    if not 0 < hotspot_rate < 1:
        raise DatasetError(f"hotspot_rate must be in (0, 1), got {hotspot_rate}")
    if n < 2:
        raise DatasetError(f"n={n} is too small to hold both classes")
    return min(n - 1, max(1, round_half_up(n * hotspot_rate)))


def generate_synthetic(n: int, hotspot_rate: float, seed: SeedLike, name: str = "synthetic") -> Dataset:
    """Deterministic synthetic dataset of n clips"""
    hotspots = hotspot_count(n, hotspot_rate)
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64)
    labels[:hotspots] = HOTSPOT
    labels = rng.permutation(labels)
    generator = LayoutGenerator(rng)
    images = np.stack([generator.draw(int(label)) for label in labels])
    logger.info(f"Generated {name}: {n} clips, {hotspots} hotspots (seed={seed})")
    return Dataset(images, labels, name)


# ---------------------------------------------------------------------------
# Splitting and partitioning
# ---------------------------------------------------------------------------

def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total`; ties go to the lower index"""
    counts = np.floor(quotas).astype(np.int64)
    remaining = total - int(counts.sum())
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remaining]:
        counts[i] += 1
    return counts


def split_public_private(d: Dataset, public_fraction: float, seed: SeedLike) -> Tuple[Dataset, Dataset]:
    """Stratified split into (public, private_pool); both keep source order"""
    if not 0 < public_fraction < 1:
        raise DatasetError(f"public_fraction must be in (0, 1), got {public_fraction}")
    rng = np.random.default_rng(seed)
    total = round_half_up(len(d) * public_fraction)
    # hotspots first so they win remainder ties
    classes = (HOTSPOT, NON_HOTSPOT)
    members = [np.flatnonzero(d.labels == c) for c in classes]
    takes = _largest_remainder(np.array([len(m) * public_fraction for m in members]), total)
    public_idx = []
    for idx, take in zip(members, takes):
        public_idx.extend(rng.permutation(idx)[:take].tolist())
    mask = np.zeros(len(d), dtype=bool)
    mask[public_idx] = True
    if mask.all() or not mask.any():
        raise DatasetError(f"splitting {len(d)} samples at {public_fraction} leaves an empty stratum")
    public = d.subset(np.flatnonzero(mask), f"{d.name}-public")
    private = d.subset(np.flatnonzero(~mask), f"{d.name}-private")
    return public, private


def concat_datasets(datasets: Sequence[Dataset], name: str = "dataset") -> Dataset:
    """Samples of every dataset, in the given order"""
    if not datasets:
        raise DatasetError("nothing to concatenate")
    return Dataset(np.concatenate([d.images for d in datasets]), np.concatenate([d.labels for d in datasets]), name)


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    n_clients: int
    assignment: np.ndarray
    mode: str = "iid"
    alpha: Optional[float] = None

    def client_indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def shard_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_clients)

    def shards(self, d: Dataset) -> List[Dataset]:
        return [d.subset(self.client_indices(i), f"{d.name}-client{i}") for i in range(self.n_clients)]

    def class_counts(self, d: Dataset) -> np.ndarray:
        """(n_clients, 2) table of non-hotspot / hotspot counts"""
        counts = np.zeros((self.n_clients, 2), dtype=np.int64)
        np.add.at(counts, (self.assignment, d.labels), 1)
        return counts


def partition(d: Dataset, n_clients: int, mode: str = "iid", alpha: Optional[float] = None,
              seed: SeedLike = 0) -> PartitionPlan:
    """Assign every sample to exactly one of n_clients non-empty shards.

    iid: round-robin over a seeded shuffle.
    dirichlet: for each class in ascending label order, shuffle its indices,
    draw client proportions p = g / sum(g) with g_i ~ Gamma(alpha, 1), turn
    p * class_size into counts by largest remainder and deal the shuffled
    indices to clients 0..N-1 in order. Clients left empty then take the last
    sample of the currently largest shard.
    """
    if n_clients < 1:
        raise DatasetError(f"need at least one client, got {n_clients}")
    if n_clients > len(d):
        raise DatasetError(f"{n_clients} clients but only {len(d)} samples")
    rng = np.random.default_rng(seed)
    assignment = np.full(len(d), -1, dtype=np.int64)

    if mode == "iid":
        order = rng.permutation(len(d))
        assignment[order] = np.arange(len(d)) % n_clients
    elif mode == "dirichlet":
        if alpha is None or alpha <= 0:
            raise DatasetError(f"dirichlet partition needs alpha > 0, got {alpha}")
        for label in (NON_HOTSPOT, HOTSPOT):
            idx = rng.permutation(np.flatnonzero(d.labels == label))
            draws = rng.gamma(alpha, 1.0, size=n_clients)
            total = draws.sum()
            proportions = draws / total if total > 0 else np.full(n_clients, 1.0 / n_clients)
            counts = _largest_remainder(proportions * len(idx), len(idx))
            start = 0
            for client, count in enumerate(counts):
                assignment[idx[start:start + count]] = client
                start += count
        sizes = np.bincount(assignment, minlength=n_clients)
        for client in range(n_clients):
            if sizes[client] == 0:
                donor = int(np.argmax(sizes))
                moved = int(np.flatnonzero(assignment == donor)[-1])
                assignment[moved] = client
                sizes[donor] -= 1
                sizes[client] += 1
    else:
        raise DatasetError(f"unknown partition mode {mode!r}")

    assignment.setflags(write=False)
    plan = PartitionPlan(n_clients, assignment, mode, alpha if mode == "dirichlet" else None)
    logger.debug(f"Partitioned {d.name} ({mode}) into shard sizes {plan.shard_sizes().tolist()}")
    return plan


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def save_dataset(d: Dataset, path: Union[str, Path]) -> Path:
    """Write the LHD1 binary format (little-endian)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.empty((len(d), _RECORD), dtype=np.uint8)
    records[:, 0] = d.labels
    records[:, 1:] = d.images.reshape(len(d), GRID * GRID)
    path.write_bytes(_HEADER.pack(MAGIC, len(d), GRID, GRID) + records.tobytes())
    return path


def load_dataset(path: Union[str, Path], name: Optional[str] = None) -> Dataset:
    path = Path(path)
    data = path.read_bytes()
    if not data:
        raise DatasetFormatError(f"{path}: empty file", "empty")
    if data[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:len(MAGIC)]!r}", "bad_magic")
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"{path}: header is {len(data)} bytes, expected {_HEADER.size}", "malformed_header")
    _, count, height, width = _HEADER.unpack_from(data)
    if (height, width) != (GRID, GRID):
        raise DatasetFormatError(f"{path}: clip size {height}x{width}, expected {GRID}x{GRID}", "malformed_header")
    expected = _HEADER.size + count * _RECORD
    if len(data) < expected:
        raise DatasetFormatError(f"{path}: {len(data)} bytes, header promises {expected}", "truncated")
    if len(data) > expected:
        raise DatasetFormatError(f"{path}: {len(data) - expected} trailing bytes", "trailing_data")
    records = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(count, _RECORD)
    if records.size and records.max() > 1:
        raise DatasetFormatError(f"{path}: labels and pixels must be 0 or 1", "bad_values")
    return Dataset(records[:, 1:].astype(np.float64), records[:, 0].astype(np.int64), name or path.stem)


def import_csv(path: Union[str, Path], name: Optional[str] = None) -> Dataset:
    """Read a CSV of 144 flattened pixel columns plus a `label` column"""
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise DatasetFormatError(f"{path}: {e}", "malformed_header") from e
    df.columns = [str(col).strip() for col in df.columns]
    if "label" not in df.columns:
        raise DatasetFormatError(f"{path}: no 'label' column", "malformed_header")
    pixels = df.drop(columns=["label"])
    if pixels.shape[1] != GRID * GRID:
        raise DatasetFormatError(f"{path}: {pixels.shape[1]} pixel columns, expected {GRID * GRID}",
                                 "malformed_header")
    try:
        return Dataset(pixels.to_numpy(dtype=np.float64), df["label"].to_numpy(dtype=np.int64), name or path.stem)
    except (DatasetError, ValueError) as e:
        raise DatasetFormatError(f"{path}: {e}", "bad_values") from e


def dataset_stats(datasets: Sequence[Dataset]) -> pd.DataFrame:
    """Per-dataset class balance table"""
    rows = [
        {
            "dataset": d.name,
            "samples": len(d),
            "hotspot": d.hotspot_count,
            "non_hotspot": len(d) - d.hotspot_count,
            "hotspot_fraction": round(d.hotspot_rate, 4),
        }
        for d in datasets
    ]
    return pd.DataFrame(rows, columns=["dataset", "samples", "hotspot", "non_hotspot", "hotspot_fraction"])
