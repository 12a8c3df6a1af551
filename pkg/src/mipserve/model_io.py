"""Factor-matrix models: file formats, synthetic generation, and the rating primitive.

A model is a pair of dense float64 matrices, one row per user / item vector.
Matrices are stored on disk in a small self-describing binary format ("MFMAT001"
magic, row/column counts, little-endian float64 payload); a headerless CSV with
one comma-separated vector per line is accepted as an import path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"MFMAT001"
_HEADER = struct.Struct("<8sQQ")


class ModelIOError(Exception):
    """Base class for model loading/validation failures."""


class FormatError(ModelIOError):
    """File is not a readable matrix (bad magic, truncated payload, bad CSV)."""


class DimensionMismatchError(ModelIOError):
    """Vector lengths or factor dimensions disagree."""


class NonFiniteValueError(ModelIOError):
    """A matrix contains NaN or infinity."""


def _as_matrix(values, *, context: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"{context}: expected a 2-D array, got shape {arr.shape}")
    rows, factors = arr.shape
    if rows < 1 or factors < 1:
        raise FormatError(f"{context}: need at least one row and one factor, got {rows}x{factors}")
    finite = np.isfinite(arr)
    if not finite.all():
        bad_row = int(np.argwhere(~finite)[0, 0])
        raise NonFiniteValueError(f"{context}: non-finite value at row {bad_row}")
    return arr


@dataclass(frozen=True)
class FactorMatrix:
    """Dense row-major matrix of latent vectors, immutable after construction."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_matrix(self.values)
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def factors(self) -> int:
        return self.values.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.values[i]


@dataclass(frozen=True)
class ModelPair:
    """User and item factor matrices sharing one latent dimension."""

    users: FactorMatrix
    items: FactorMatrix

    def __post_init__(self):
        if self.users.factors != self.items.factors:
            raise DimensionMismatchError(
                f"user factors ({self.users.factors}) != item factors ({self.items.factors})"
            )

    @property
    def factors(self) -> int:
        return self.users.factors

    @property
    def num_users(self) -> int:
        return self.users.rows

    @property
    def num_items(self) -> int:
        return self.items.rows


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic model with controlled user similarity.

    Users are drawn around ``archetype_count`` random unit directions, each
    perturbed by an angle drawn uniformly from [0, angular_spread] along a
    random tangent, then scaled by a norm drawn uniformly from
    [norm_low, norm_high]. Items are uniform directions with norms from the
    same range. Small spreads with few archetypes give highly clusterable
    users; ``archetype_count == num_users`` gives uniform directions.
    """

    num_users: int
    num_items: int
    factors: int
    archetype_count: int = 8
    angular_spread: float = 0.3
    norm_low: float = 1.0
    norm_high: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.factors < 1:
            raise ValueError("num_users, num_items and factors must all be >= 1")
        if not 1 <= self.archetype_count <= self.num_users:
            raise ValueError("archetype_count must be in [1, num_users]")
        if not 0.0 <= self.angular_spread <= np.pi:
            raise ValueError("angular_spread must be in [0, pi]")
        if not 0.0 < self.norm_low <= self.norm_high:
            raise ValueError("need 0 < norm_low <= norm_high")


def save_matrix(matrix: FactorMatrix, path) -> None:
    """Write one matrix in the binary MFMAT001 format."""
    path = Path(path)
    header = _HEADER.pack(MATRIX_MAGIC, matrix.rows, matrix.factors)
    payload = np.ascontiguousarray(matrix.values, dtype="<f8").tobytes()
    path.write_bytes(header + payload)


def _load_binary_matrix(raw: bytes, path: Path) -> FactorMatrix:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, rows, factors = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    expected = _HEADER.size + rows * factors * 8
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    if rows < 1 or factors < 1:
        raise FormatError(f"{path}: header declares empty matrix {rows}x{factors}")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, factors)
    try:
        return FactorMatrix(values.astype(np.float64))
    except ModelIOError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _load_csv_matrix(text: str, path: Path) -> FactorMatrix:
    rows: list[list[float]] = []
    width = None
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        fields = line.split(",")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise DimensionMismatchError(
                f"{path}: row {lineno} has {len(fields)} values, expected {width}"
            )
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise FormatError(f"{path}: row {lineno} is not comma-separated decimals") from None
    if not rows:
        raise FormatError(f"{path}: no vectors found")
    try:
        return FactorMatrix(np.asarray(rows, dtype=np.float64))
    except ModelIOError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def load_matrix(path) -> FactorMatrix:
    """Load a matrix, accepting MFMAT001 binary or headerless CSV."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MATRIX_MAGIC)] == MATRIX_MAGIC:
        return _load_binary_matrix(raw, path)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: neither MFMAT001 binary nor text CSV") from None
    return _load_csv_matrix(text, path)


def save_model(model: ModelPair, user_path, item_path) -> None:
    """Persist both matrices; a reload reproduces the model bit-exactly."""
    save_matrix(model.users, user_path)
    save_matrix(model.items, item_path)


def load_model(user_path, item_path) -> ModelPair:
    users = load_matrix(user_path)
    items = load_matrix(item_path)
    if users.factors != items.factors:
        raise DimensionMismatchError(
            f"{user_path} has {users.factors} factors but {item_path} has {items.factors}"
        )
    return ModelPair(users, items)


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    # A zero draw from a continuous distribution is essentially impossible;
    # the guard keeps the division defined anyway.
    norms[norms == 0.0] = 1.0
    return arr / norms


def generate_synthetic(spec: SyntheticSpec) -> ModelPair:
    """Deterministically build a model from a SyntheticSpec (pure in the spec)."""
    rng = np.random.default_rng(spec.seed)
    f = spec.factors

    archetypes = _unit_rows(rng.standard_normal((spec.archetype_count, f)))
    which = rng.integers(0, spec.archetype_count, size=spec.num_users)
    tangents = rng.standard_normal((spec.num_users, f))
    angles = rng.uniform(0.0, spec.angular_spread, size=spec.num_users)
    user_norms = rng.uniform(spec.norm_low, spec.norm_high, size=spec.num_users)

    base = archetypes[which]
    tangents = tangents - (tangents * base).sum(axis=1, keepdims=True) * base
    tnorms = np.linalg.norm(tangents, axis=1)
    degenerate = tnorms < 1e-300  # no tangent direction exists when f == 1
    tnorms[degenerate] = 1.0
    angles[degenerate] = 0.0
    tangents = tangents / tnorms[:, None]

    directions = np.cos(angles)[:, None] * base + np.sin(angles)[:, None] * tangents
    users = directions * user_norms[:, None]

    item_dirs = _unit_rows(rng.standard_normal((spec.num_items, f)))
    item_norms = rng.uniform(spec.norm_low, spec.norm_high, size=spec.num_items)
    items = item_dirs * item_norms[:, None]

    return ModelPair(FactorMatrix(users), FactorMatrix(items))


def predicted_rating(u, i) -> float:
    """Inner product of one user vector with one item vector."""
    u = np.asarray(u, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if u.shape != i.shape or u.ndim != 1:
        raise DimensionMismatchError(f"vector shapes differ: {u.shape} vs {i.shape}")
    return float(u @ i)
