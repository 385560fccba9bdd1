"""Volumes, slice stacks and the axis-aware operators shared by every stage.

Axes follow the usual CT naming: ``x`` is sagittal, ``y`` coronal and ``z``
axial. A sagittal slice is indexed ``(y, z)``, a coronal slice ``(x, z)`` and
an axial slice ``(x, y)``.
"""

from __future__ import annotations

import json
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractViolation, DataError

AXES = ("x", "y", "z")
AXIS_NAMES = {"x": "sagittal", "y": "coronal", "z": "axial"}
DECIMATE = "decimate-index0"


def axis_index(axis) -> int:
    """Map an axis id (``'x'``/``'y'``/``'z'`` or 0/1/2) to an array axis."""
    if isinstance(axis, str) and axis in AXES:
        return AXES.index(axis)
    if isinstance(axis, (int, np.integer)) and not isinstance(axis, bool) and 0 <= axis < 3:
        return int(axis)
    raise ContractViolation(f"unknown axis id {axis!r}; expected one of {AXES}")


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D intensity grid indexed ``(x, y, z)`` with values in [0, 1].

    ``value_range`` records the raw intensity window that was mapped onto
    [0, 1] at ingest; it is metadata only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ContractViolation(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
            raise ContractViolation("volume values must be finite and within [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, spacing=None) -> "Volume":
        return Volume(data, self.spacing if spacing is None else spacing, self.value_range)

    def equals(self, other: "Volume") -> bool:
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class SliceStack:
    """Ordered 2D cross-sections of a volume, stored as one ``(n, a, b)`` array."""

    slices: np.ndarray
    source_axis: str
    index_origin: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __len__(self) -> int:
        return self.slices.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.slices[i]


@dataclass(frozen=True)
class DegradeSpec:
    """How a sparse volume is produced from a dense one.

    ``r_inplane`` is the factor used for the in-plane self-supervision task
    and defaults to ``r_z``.
    """

    r_z: int = 4
    r_inplane: int | None = None
    convention: str = DECIMATE

    def __post_init__(self):
        if self.r_inplane is None:
            object.__setattr__(self, "r_inplane", self.r_z)
        if int(self.r_z) < 2 or int(self.r_inplane) < 2:
            raise ContractViolation(f"sparsity factors must be >= 2, got r_z={self.r_z}, r_inplane={self.r_inplane}")
        if self.convention != DECIMATE:
            raise ContractViolation(f"unsupported degradation convention {self.convention!r}")

    def degraded_extent(self, extent: int, r: int | None = None) -> int:
        return math.ceil(extent / (self.r_z if r is None else r))


def extract_slices(v: Volume, axis) -> SliceStack:
    a = axis_index(axis)
    return SliceStack(np.moveaxis(v.data, a, 0).copy(), AXES[a], 0, v.spacing)


def reformat_volume(s: SliceStack) -> Volume:
    slices = s.slices if isinstance(s.slices, np.ndarray) else _stack_uniform(s.slices)
    if slices.ndim != 3 or slices.shape[0] < 1:
        raise ContractViolation("slice stack must hold at least one 2D slice")
    a = axis_index(s.source_axis)
    return Volume(np.moveaxis(slices, 0, a).copy(), s.spacing)


def _stack_uniform(slices: Sequence[np.ndarray]) -> np.ndarray:
    if len(slices) == 0:
        raise ContractViolation("slice stack is empty")
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1:
        raise ContractViolation(f"ragged slice shapes {sorted(shapes)}")
    return np.stack([np.asarray(s, dtype=np.float32) for s in slices])


def stack_from_slices(slices: Sequence[np.ndarray], axis, spacing=(1.0, 1.0, 1.0)) -> SliceStack:
    """Build a validated stack from a list of 2D grids."""
    return SliceStack(_stack_uniform(slices), AXES[axis_index(axis)], 0, tuple(spacing))


def subsample_axis(v: Volume, axis, r: int) -> Volume:
    """Keep indices ``0, r, 2r, ...`` along ``axis`` (no pre-filtering)."""
    a = axis_index(axis)
    if int(r) < 2:
        raise ContractViolation(f"subsampling factor must be >= 2, got {r}")
    index = [slice(None)] * 3
    index[a] = slice(0, None, int(r))
    spacing = list(v.spacing)
    spacing[a] *= r
    return v.with_data(v.data[tuple(index)].copy(), tuple(spacing))


def combine_average(a: Volume, b: Volume) -> Volume:
    if a.shape != b.shape:
        raise ContractViolation(f"cannot average volumes of shape {a.shape} and {b.shape}")
    return a.with_data((a.data + b.data) * np.float32(0.5))


def make_triplets(s: SliceStack | np.ndarray) -> np.ndarray:
    """Return ``(n, 3, a, b)`` inputs of (previous, current, next) slices.

    Out-of-range neighbours are replaced by the edge slice.
    """
    slices = s.slices if isinstance(s, SliceStack) else np.asarray(s, dtype=np.float32)
    n = slices.shape[0]
    if n < 1:
        raise ContractViolation("cannot build triplets from an empty stack")
    idx = np.arange(n)
    prev = np.clip(idx - 1, 0, n - 1)
    nxt = np.clip(idx + 1, 0, n - 1)
    return np.stack([slices[prev], slices[idx], slices[nxt]], axis=1)


def keys_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def cubic_upsample_matrix(n: int, r: int, a: float = -0.5) -> np.ndarray:
    """Dense ``(r*n, n)`` interpolation matrix; output ``j`` sits at input
    coordinate ``j / r`` and taps outside the signal are edge-replicated."""
    pos = np.arange(r * n) / r
    base = np.floor(pos).astype(int)
    m = np.zeros((r * n, n))
    rows = np.arange(r * n)
    for k in range(-1, 3):
        tap = base + k
        w = keys_kernel(pos - tap, a)
        np.add.at(m, (rows, np.clip(tap, 0, n - 1)), w)
    return m


def bicubic_upsample_axis(v: Volume, axis, r: int) -> Volume:
    """Cubic-convolution upsampling by ``r`` along one axis, clamped to [0, 1]."""
    a = axis_index(axis)
    if int(r) < 2:
        raise ContractViolation(f"upsampling factor must be >= 2, got {r}")
    m = cubic_upsample_matrix(v.shape[a], int(r))
    moved = np.moveaxis(v.data.astype(np.float64), a, -1)
    out = np.clip(moved @ m.T, 0.0, 1.0)
    spacing = list(v.spacing)
    spacing[a] /= r
    return v.with_data(np.moveaxis(out, -1, a).astype(np.float32), tuple(spacing))


def normalize(raw: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    """Min-max map ``window`` onto [0, 1], clipping outside values."""
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ContractViolation(f"normalization window must have hi > lo, got {window}")
    return np.clip((np.asarray(raw, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


# -- access auditing ---------------------------------------------------------

class AccessAudit:
    """Records volume reads by role while active (see :func:`audit_access`)."""

    def __init__(self):
        self.records: list[tuple[str, str]] = []

    def record(self, role: str, ident: str) -> None:
        self.records.append((role, ident))

    @property
    def hr_reads(self) -> int:
        return sum(1 for role, _ in self.records if role == "hr")


_audits: list[AccessAudit] = []
_audit_lock = threading.Lock()


@contextmanager
def audit_access() -> Iterator[AccessAudit]:
    audit = AccessAudit()
    with _audit_lock:
        _audits.append(audit)
    try:
        yield audit
    finally:
        with _audit_lock:
            _audits.remove(audit)


def record_access(role: str, ident: str) -> None:
    with _audit_lock:
        for audit in _audits:
            audit.record(role, ident)


# -- .vol files --------------------------------------------------------------

def write_vol(v: Volume, path) -> None:
    """Write a JSON header line followed by little-endian f32 samples.

    Samples are ordered with x varying slowest and z fastest.
    """
    header = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": "f32le",
        "value_range": list(v.value_range),
    }
    path = Path(path)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_vol(path, role: str = "lr") -> Volume:
    path = Path(path)
    record_access(role, str(path))
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: bad header: {exc}") from exc
    if header.get("dtype") != "f32le":
        raise DataError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    body = raw[nl + 1:]
    expected = 4 * int(np.prod(shape))
    if len(body) != expected:
        raise DataError(f"{path}: expected {expected} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, tuple(header.get("spacing", (1, 1, 1))), tuple(header.get("value_range", (0, 1))))
