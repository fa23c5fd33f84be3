"""Shared value types: random streams, transitions, datasets, Gaussian predictions."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

StateVec = np.ndarray
Provenance = Literal["environment", "model"]

CORR_DIAG_TOL = 1e-12
CORR_EIG_TOL = 1e-9


class DimensionError(ValueError):
    """A state vector does not have the dimension the container expects."""


class CorrelationError(ValueError):
    """Raw entries do not describe a valid correlation matrix."""


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based random stream (Philox) identified by a seed and a label path.

    Child streams are derived with :func:`split_rng`; a child depends only on
    the parent's seed and path plus its own label, never on how many numbers
    the parent has already produced.  All ``numpy.random.Generator`` sampling
    methods are available directly on the stream.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_key(p) for p in self.path)
        )
        self.generator = np.random.Generator(np.random.Philox(seq))

    def __getattr__(self, name):
        # only reached for attributes not set in __init__
        return getattr(self.generator, name)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"


def split_rng(parent: RngStream, label: str) -> RngStream:
    """Derive a reproducible child stream named ``label``."""
    if not label:
        raise ValueError("label must be nonempty")
    return RngStream(parent.seed, parent.path + (str(label),))


def as_rng(rng: RngStream | int) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(int(rng))


# --------------------------------------------------------------------------
# States and transitions
# --------------------------------------------------------------------------


def state_vec(x, dim: Optional[int] = None) -> StateVec:
    """Validate ``x`` as a finite 1-D float64 vector (optionally of size ``dim``)."""
    arr = np.array(x, dtype=np.float64).reshape(-1)
    if arr.size < 1:
        raise DimensionError("state must have at least one component")
    if dim is not None and arr.size != dim:
        raise DimensionError(f"expected dim {dim}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"state has non-finite components: {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TransitionRecord:
    state: StateVec
    action: int
    next_state: StateVec
    reward: float
    terminal: bool = False

    def __post_init__(self):
        s = state_vec(self.state)
        sp = state_vec(self.next_state)
        if s.size != sp.size:
            raise DimensionError(f"state dim {s.size} != next_state dim {sp.size}")
        if int(self.action) < 0:
            raise ValueError("action index must be nonnegative")
        object.__setattr__(self, "state", s)
        object.__setattr__(self, "next_state", sp)
        object.__setattr__(self, "action", int(self.action))
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "terminal", bool(self.terminal))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable, array-backed list of transitions.

    ``push``/``extend`` return new datasets.  When ``capacity`` is set the
    oldest records are dropped first (FIFO).
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    provenance: Provenance = "environment"
    capacity: Optional[int] = None

    def __post_init__(self):
        n = len(self.actions)
        for name in ("states", "next_states"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionError(f"{name} must have shape (n, dim)")
        if self.states.shape != self.next_states.shape:
            raise DimensionError("states and next_states differ in shape")
        if len(self.rewards) != n or len(self.terminals) != n:
            raise ValueError("column lengths differ")
        if self.provenance not in ("environment", "model"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be positive")
        for name in ("states", "actions", "next_states", "rewards", "terminals"):
            _frozen(getattr(self, name))

    @classmethod
    def empty(cls, dim: int, provenance: Provenance = "environment",
              capacity: Optional[int] = None) -> "Dataset":
        return cls(np.empty((0, dim)), np.empty(0, dtype=np.int64), np.empty((0, dim)),
                   np.empty(0), np.empty(0, dtype=bool), provenance, capacity)

    @classmethod
    def from_arrays(cls, states, actions, next_states, rewards, terminals=None,
                    provenance: Provenance = "environment",
                    capacity: Optional[int] = None) -> "Dataset":
        states = np.array(states, dtype=np.float64, ndmin=2)
        n = states.shape[0]
        if terminals is None:
            terminals = np.zeros(n, dtype=bool)
        ds = cls(states, np.array(actions, dtype=np.int64).reshape(n),
                 np.array(next_states, dtype=np.float64, ndmin=2),
                 np.array(rewards, dtype=np.float64).reshape(n),
                 np.array(terminals, dtype=bool).reshape(n), provenance, capacity)
        return ds._trimmed()

    @classmethod
    def from_records(cls, records: Sequence[TransitionRecord],
                     provenance: Provenance = "environment") -> "Dataset":
        if not records:
            raise ValueError("need at least one record (use Dataset.empty)")
        dims = {r.state.size for r in records}
        if len(dims) != 1:
            raise DimensionError(f"records have mixed dims {sorted(dims)}")
        return cls.from_arrays([r.state for r in records], [r.action for r in records],
                               [r.next_state for r in records], [r.reward for r in records],
                               [r.terminal for r in records], provenance)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> TransitionRecord:
        return TransitionRecord(self.states[i], int(self.actions[i]), self.next_states[i],
                                float(self.rewards[i]), bool(self.terminals[i]))

    def __iter__(self) -> Iterator[TransitionRecord]:
        return (self[i] for i in range(len(self)))

    def _trimmed(self) -> "Dataset":
        if self.capacity is None or len(self) <= self.capacity:
            return self
        k = len(self) - self.capacity
        return Dataset(self.states[k:], self.actions[k:], self.next_states[k:],
                       self.rewards[k:], self.terminals[k:], self.provenance, self.capacity)

    def push(self, rec: TransitionRecord) -> "Dataset":
        return dataset_push(self, rec)

    def extend(self, other: "Dataset") -> "Dataset":
        if len(other) and other.dim != self.dim:
            raise DimensionError(f"cannot extend dim {self.dim} dataset with dim {other.dim}")
        return Dataset(
            np.concatenate([self.states, other.states]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.next_states, other.next_states]),
            np.concatenate([self.rewards, other.rewards]),
            np.concatenate([self.terminals, other.terminals]),
            self.provenance, self.capacity,
        )._trimmed()

    def sample_indices(self, n: int, rng: RngStream) -> np.ndarray:
        return rng.integers(0, len(self), size=n)

    # -- CSV ---------------------------------------------------------------

    def header(self) -> list[str]:
        n = self.dim
        return [f"s{i}" for i in range(n)] + ["a"] + [f"sp{i}" for i in range(n)] + ["r", "done"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for i in range(len(self)):
                w.writerow([_fmt(x) for x in self.states[i]] + [int(self.actions[i])]
                           + [_fmt(x) for x in self.next_states[i]]
                           + [_fmt(self.rewards[i]), int(self.terminals[i])])

    @classmethod
    def from_csv(cls, path, provenance: Provenance = "environment") -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = (len(header) - 3) // 2
        expected = [f"s{i}" for i in range(n)] + ["a"] + [f"sp{i}" for i in range(n)] + ["r", "done"]
        if header != expected:
            raise ValueError(f"unexpected dataset header {header}")
        if not body:
            return cls.empty(n, provenance)
        data = np.array([[float(x) for x in row] for row in body])
        return cls.from_arrays(data[:, :n], data[:, n].astype(np.int64), data[:, n + 1:2 * n + 1],
                               data[:, 2 * n + 1], data[:, 2 * n + 2].astype(bool), provenance)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dataset_push(ds: Dataset, rec: TransitionRecord) -> Dataset:
    """Append one record, rejecting a state-dimension mismatch."""
    if len(ds) and rec.state.size != ds.dim:
        raise DimensionError(f"record dim {rec.state.size} does not match dataset dim {ds.dim}")
    if not len(ds):
        ds = Dataset.empty(rec.state.size, ds.provenance, ds.capacity)
    return ds.extend(Dataset.from_arrays(rec.state[None], [rec.action], rec.next_state[None],
                                         [rec.reward], [rec.terminal], ds.provenance))


# --------------------------------------------------------------------------
# Correlation matrices and Gaussian predictions
# --------------------------------------------------------------------------


class CorrelationMatrix:
    """Validated correlation matrix: symmetric, unit diagonal, entries in [-1, 1], PSD."""

    __slots__ = ("_entries",)

    def __init__(self, entries):
        m = np.array(entries, dtype=np.float64)
        problems = correlation_problems(m)
        if problems:
            raise CorrelationError("; ".join(problems))
        m = 0.5 * (m + m.T)
        np.fill_diagonal(m, 1.0)
        self._entries = _frozen(m)

    @classmethod
    def identity(cls, n: int) -> "CorrelationMatrix":
        return cls(np.eye(n))

    @classmethod
    def from_entries(cls, entries, repair: bool = False) -> "CorrelationMatrix":
        """Build from raw entries; with ``repair`` indefinite input is projected first."""
        return repair_correlation(entries) if repair else cls(entries)

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def n(self) -> int:
        return self._entries.shape[0]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self._entries, np.eye(self.n)))

    def __array__(self, dtype=None, copy=None):
        return self._entries if dtype is None else self._entries.astype(dtype)

    def __eq__(self, other):
        if isinstance(other, CorrelationMatrix):
            return np.array_equal(self._entries, other._entries)
        return NotImplemented

    def __repr__(self) -> str:
        return f"CorrelationMatrix({self._entries.tolist()})"


def correlation_problems(m: np.ndarray) -> list[str]:
    """List every violated correlation-matrix invariant (empty if valid)."""
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        return [f"must be a nonempty square matrix, got shape {m.shape}"]
    out = []
    if not np.all(np.isfinite(m)):
        return ["entries must be finite"]
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
        out.append(f"not symmetric (max asymmetry {np.abs(m - m.T).max():.3g})")
    d = np.abs(np.diag(m) - 1.0)
    if d.max() >= CORR_DIAG_TOL:
        out.append(f"diagonal deviates from 1 by {d.max():.3g}")
    if np.abs(m).max() > 1.0 + 1e-12:
        out.append("off-diagonal entries outside [-1, 1]")
    if not out:
        lam = np.linalg.eigvalsh(0.5 * (m + m.T)).min()
        if lam < -CORR_EIG_TOL:
            out.append(f"not positive semidefinite (smallest eigenvalue {lam:.3g})")
    return out


def repair_correlation(m) -> CorrelationMatrix:
    """Clip eigenvalues at zero, then rescale back to a unit diagonal."""
    m = np.array(m, dtype=np.float64)
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    m = (v * np.clip(w, 0.0, None)) @ v.T
    d = np.sqrt(np.clip(np.diag(m), 1e-300, None))
    m = m / np.outer(d, d)
    m = np.clip(0.5 * (m + m.T), -1.0, 1.0)
    np.fill_diagonal(m, 1.0)
    # clipping off-diagonals can reintroduce tiny negative eigenvalues
    lam = np.linalg.eigvalsh(m).min()
    if lam < 0:
        m = (m + (-lam) * np.eye(len(m))) / (1.0 - lam)
        np.fill_diagonal(m, 1.0)
    return CorrelationMatrix(m)


@dataclass(frozen=True)
class GaussianPrediction:
    """Predictive next-state distribution N(mean, D corr D) with D = diag(scales)."""

    mean: StateVec
    scales: np.ndarray
    corr: CorrelationMatrix = field(default=None)

    def __post_init__(self):
        mean = state_vec(self.mean)
        scales = np.array(self.scales, dtype=np.float64).reshape(-1)
        if scales.shape != mean.shape:
            raise DimensionError("scales must match the mean dimension")
        if np.any(scales < 0) or not np.all(np.isfinite(scales)):
            raise ValueError("scales must be finite and nonnegative")
        corr = self.corr if self.corr is not None else CorrelationMatrix.identity(mean.size)
        if corr.n != mean.size:
            raise DimensionError("correlation matrix does not match the mean dimension")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scales", _frozen(scales))
        object.__setattr__(self, "corr", corr)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.corr.entries * np.outer(self.scales, self.scales)
