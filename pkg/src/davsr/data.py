"""Training pairs, patch sampling and synthetic phantoms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ContractViolation
from .volume import (
    DegradeSpec,
    Volume,
    extract_slices,
    make_triplets,
    record_access,
    subsample_axis,
)

TASKS = ("through_plane", "in_plane", "refine")


@dataclass(frozen=True, eq=False)
class PairedSample:
    """A triplet-formatted network input and its single-slice target.

    The upsampled axis is always the last one: ``hr_target.shape[-1]`` is
    ``r * lr_input.shape[-1]`` (``r == 1`` for refinement pairs).
    """

    lr_input: np.ndarray
    hr_target: np.ndarray
    task: str
    meta: dict = field(default_factory=dict)

    @property
    def scale(self) -> int:
        return self.hr_target.shape[-1] // self.lr_input.shape[-1]


def _crop_to_multiple(data: np.ndarray, axes, r: int) -> np.ndarray:
    index = [slice(None)] * data.ndim
    for a in axes:
        n = (data.shape[a] // r) * r
        if n < r:
            raise ContractViolation(f"extent {data.shape[a]} along axis {a} is smaller than factor {r}")
        index[a] = slice(0, n)
    return data[tuple(index)]


def make_through_plane_pairs(v: Volume, spec: DegradeSpec, volume_id: str = "") -> list[PairedSample]:
    """Sagittal then coronal pairs from the axially decimated volume.

    The dense volume is cropped along z to a multiple of ``r_z`` so that each
    target is exactly ``r_z`` times the input extent.
    """
    r = spec.r_z
    if v.shape[2] < r:
        raise ContractViolation(f"axial extent {v.shape[2]} leaves no slices at r_z={r}")
    dense = v.with_data(_crop_to_multiple(v.data, [2], r))
    sparse = subsample_axis(dense, "z", r)
    pairs = []
    for axis in ("x", "y"):
        inputs = make_triplets(extract_slices(sparse, axis))
        targets = extract_slices(dense, axis).slices
        for i in range(len(targets)):
            pairs.append(PairedSample(inputs[i], targets[i], "through_plane",
                                      {"volume": volume_id, "axis": axis, "index": i}))
    return pairs


def make_in_plane_pairs(v_lr: Volume, spec: DegradeSpec, volume_id: str = "") -> list[PairedSample]:
    """Self-supervised pairs from the axial slices of a sparse volume.

    Each axial slice yields a y-decimated sample and an x-decimated sample;
    the latter is transposed so the decimated axis is last. Targets are the
    sparse volume's own slices.
    """
    r = spec.r_inplane
    data = _crop_to_multiple(v_lr.data, [0, 1], r)
    triplets = make_triplets(np.moveaxis(data, 2, 0))
    pairs = []
    for i, trip in enumerate(triplets):
        target = trip[1]
        pairs.append(PairedSample(trip[:, :, ::r].copy(), target.copy(), "in_plane",
                                  {"volume": volume_id, "axis": "z", "index": i, "branch": "y"}))
        x_deg = trip[:, ::r, :].transpose(0, 2, 1).copy()
        pairs.append(PairedSample(x_deg, target.T.copy(), "in_plane",
                                  {"volume": volume_id, "axis": "z", "index": i, "branch": "x"}))
    return pairs


def make_refine_pairs(v_comb: Volume, v_gt: Volume, volume_id: str = "") -> list[PairedSample]:
    if v_comb.shape != v_gt.shape:
        raise ContractViolation(f"combined volume {v_comb.shape} and ground truth {v_gt.shape} differ")
    inputs = make_triplets(extract_slices(v_comb, "z"))
    targets = extract_slices(v_gt, "z").slices
    return [PairedSample(inputs[i], targets[i], "refine", {"volume": volume_id, "axis": "z", "index": i})
            for i in range(len(targets))]


def sample_patches(pairs: list[PairedSample], patch: tuple[int, int], count: int, seed: int) -> list[PairedSample]:
    """Uniformly sample aligned crops; ``patch`` is given in input pixels."""
    if count <= 0:
        return []
    if not pairs:
        raise ContractViolation("cannot sample patches from an empty pair list")
    h, w = patch
    for p in pairs:
        if h > p.lr_input.shape[-2] or w > p.lr_input.shape[-1]:
            raise ContractViolation(f"patch {patch} exceeds input extent {p.lr_input.shape[-2:]}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        p = pairs[rng.integers(len(pairs))]
        H, W = p.lr_input.shape[-2:]
        i = int(rng.integers(H - h + 1))
        j = int(rng.integers(W - w + 1))
        r = p.scale
        out.append(PairedSample(
            p.lr_input[:, i:i + h, j:j + w],
            p.hr_target[i:i + h, r * j:r * (j + w)],
            p.task,
            {**p.meta, "crop": (i, j)},
        ))
    return out


# -- evaluation volumes with audited ground truth ------------------------------

class EvalVolume:
    """A test case whose sparse input is free to read but whose dense ground
    truth is loaded lazily and logged to any active access audit."""

    def __init__(self, ident: str, lr: Volume, hr_loader: Callable[[], Volume]):
        self.ident = ident
        self.lr = lr
        self._hr_loader = hr_loader

    @property
    def hr(self) -> Volume:
        record_access("hr", self.ident)
        return self._hr_loader()


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class TextureFamily:
    name: str = "blobs-sheets"
    blob_count: tuple[int, int] = (10, 16)
    blob_radius: tuple[float, float] = (4.0, 11.0)
    edge_width: float = 0.9
    sheet_count: tuple[int, int] = (2, 4)
    sheet_thickness: tuple[float, float] = (1.5, 2.5)
    background_scale: float = 10.0


@dataclass(frozen=True)
class IntensityStats:
    mean: float = 0.3
    contrast: float = 0.3
    background_std: float = 0.04
    sheet_intensity: float = 0.45


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic volume.

    ``shift_level`` moves the draw away from the training family: blobs get
    smaller and more numerous, edges sharper, contrast and mean brighter.
    """

    shape: tuple[int, int, int] = (64, 64, 64)
    texture_family: TextureFamily = TextureFamily()
    intensity_stats: IntensityStats = IntensityStats()
    structure_seed: int = 0
    shift_level: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        tex = d.get("texture_family", {})
        ints = d.get("intensity_stats", {})
        return cls(
            shape=tuple(d.get("shape", (64, 64, 64))),
            texture_family=TextureFamily(**{k: tuple(v) if isinstance(v, list) else v for k, v in tex.items()}),
            intensity_stats=IntensityStats(**ints),
            structure_seed=int(d.get("structure_seed", 0)),
            shift_level=float(d.get("shift_level", 0.0)),
        )


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def generate_phantom(spec: PhantomSpec) -> Volume:
    s = float(np.clip(spec.shift_level, 0.0, 1.0))
    tex, ints = spec.texture_family, spec.intensity_stats
    shape = tuple(int(n) for n in spec.shape)
    rng = np.random.default_rng([spec.structure_seed, 7919])

    radius_scale = 1.0 - 0.5 * s
    count_scale = 1.0 + 1.5 * s
    edge = tex.edge_width * (1.0 - 0.5 * s)
    contrast = ints.contrast * (1.0 + 0.6 * s)
    mean = ints.mean + 0.15 * s

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"), axis=-1)
    dims = np.array(shape, dtype=np.float64)
    # structure sizes are specified for a 64-voxel field of view
    size_scale = min(1.0, dims.min() / 64.0)

    noise = rng.standard_normal(shape)
    background = ndimage.gaussian_filter(noise, tex.background_scale * size_scale, mode="wrap")
    background *= ints.background_std / (background.std() + 1e-12)
    vol = mean + background

    max_blobs = int(np.ceil(tex.blob_count[1] * 2.5))
    u = rng.random((max_blobs, 8))
    rots = Rotation.random(max_blobs, random_state=rng).as_matrix()
    n_blobs = int(round((tex.blob_count[0] + u[0, 7] * (tex.blob_count[1] - tex.blob_count[0])) * count_scale))
    lo, hi = tex.blob_radius
    for k in range(n_blobs):
        center = dims * (0.1 + 0.8 * u[k, :3])
        radii = (lo + (hi - lo) * u[k, 3:6]) * radius_scale * size_scale
        amp = contrast * (0.5 + 0.5 * u[k, 6]) * (1.0 if k % 3 else -1.0)
        local = (grid - center) @ rots[k]
        d = np.sqrt(np.sum((local / radii) ** 2, axis=-1))
        vol += amp * _sigmoid((1.0 - d) * radii.mean() / edge)

    max_sheets = tex.sheet_count[1]
    v = rng.random((max_sheets, 6))
    normals = rng.standard_normal((max_sheets, 3))
    n_sheets = tex.sheet_count[0] + int(v[0, 5] * (tex.sheet_count[1] - tex.sheet_count[0] + 1))
    n_sheets = min(n_sheets, max_sheets)
    for k in range(n_sheets):
        normal = normals[k] / np.linalg.norm(normals[k])
        center = dims * (0.2 + 0.6 * v[k, :3])
        thick = tex.sheet_thickness[0] + (tex.sheet_thickness[1] - tex.sheet_thickness[0]) * v[k, 3]
        extent = (0.15 + 0.15 * v[k, 4]) * dims.min()
        rel = grid - center
        along = rel @ normal
        across = np.sqrt(np.maximum(np.sum(rel ** 2, axis=-1) - along ** 2, 0.0))
        plate = _sigmoid((thick / 2 - np.abs(along)) / (0.5 * edge)) * _sigmoid(extent - across)
        vol += ints.sheet_intensity * plate

    return Volume(np.clip(vol, 0.0, 1.0).astype(np.float32))
