"""Volume containers, the NFAVOL1 file format, coordinates and phantoms.

Axis convention everywhere: ``(y, x, z)`` = (axial, fast lateral, slow
lateral). A B-scan is the ``(y, x)`` plane at a fixed slow index ``z``;
en-face images live on the ``(x, z)`` plane.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "NFAVOL1"
_HEADER_LIMIT = 1 << 16


class VolumeFormatError(ValueError):
    """Base class for unreadable NFAVOL1 files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar grid of shape (ny, nx, nz) with physical spacing in mm."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"Volume needs 3 dims, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"invalid spacing {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def bscan(self, z):
        return self.data[:, :, z]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer class grid aligned with a :class:`Volume`."""

    labels: np.ndarray
    n_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise ValueError(f"LabelVolume needs 3 dims, got shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.labels.shape

    def onehot(self, dtype=np.float32):
        return np.eye(self.n_classes, dtype=dtype)[self.labels]


@dataclass(frozen=True, eq=False)
class EnFaceImage:
    """Dense lateral image of shape (nx, nz) aligned with a volume's A-scans."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"EnFaceImage needs 2 dims, got shape {self.data.shape}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def lookup(self, x, z):
        """Bilinear sample at normalized lateral coordinates in [-1, 1]."""
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if np.any(np.abs(x) > 1 + 1e-9) or np.any(np.abs(z) > 1 + 1e-9):
            raise ValueError("lateral coordinate outside the en-face domain")
        nx, nz = self.data.shape
        px = np.clip((x + 1) * 0.5 * (nx - 1), 0, nx - 1)
        pz = np.clip((z + 1) * 0.5 * (nz - 1), 0, nz - 1)
        x0 = np.minimum(np.floor(px).astype(int), max(nx - 2, 0))
        z0 = np.minimum(np.floor(pz).astype(int), max(nz - 2, 0))
        x1 = np.minimum(x0 + 1, nx - 1)
        z1 = np.minimum(z0 + 1, nz - 1)
        fx, fz = px - x0, pz - z0
        d = self.data
        out = ((1 - fx) * (1 - fz) * d[x0, z0] + fx * (1 - fz) * d[x1, z0]
               + (1 - fx) * fz * d[x0, z1] + fx * fz * d[x1, z1])
        return out.astype(self.data.dtype)


# ---------------------------------------------------------------------------
# file format


def _write(path, kind, array, spacing, extra=None):
    arr = np.ascontiguousarray(array)
    dtype = arr.dtype.newbyteorder("<")
    header = {"magic": MAGIC, "kind": kind, "dims": list(arr.shape),
              "spacing": list(spacing), "dtype": dtype.str}
    header.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(arr.astype(dtype, copy=False).tobytes())


def _read(path, kind, ndim):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n", 0, _HEADER_LIMIT)
    if nl < 0:
        raise BadMagicError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise BadMagicError(f"{path}: header is not JSON") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise BadMagicError(f"{path}: bad magic, expected {MAGIC}")
    if header.get("kind") != kind:
        raise DimensionMismatchError(f"{path}: file holds {header.get('kind')!r}, expected {kind!r}")
    dims = header.get("dims")
    spacing = header.get("spacing")
    if (not isinstance(dims, list) or len(dims) != ndim or any(int(d) < 1 for d in dims)
            or not isinstance(spacing, list) or len(spacing) != ndim):
        raise DimensionMismatchError(f"{path}: dims {dims} / spacing {spacing} invalid for {kind}")
    dtype = np.dtype(header["dtype"])
    payload = raw[nl + 1:]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return header, data.astype(dtype.newbyteorder("="))


def write_volume(path, v: Volume):
    _write(path, "volume", v.data, v.spacing)


def read_volume(path) -> Volume:
    header, data = _read(path, "volume", 3)
    return Volume(data, tuple(header["spacing"]))


def write_labels(path, lv: LabelVolume):
    _write(path, "labels", lv.labels, lv.spacing, {"n_classes": int(lv.n_classes)})


def read_labels(path) -> LabelVolume:
    header, data = _read(path, "labels", 3)
    if "n_classes" not in header:
        raise DimensionMismatchError(f"{path}: label file without n_classes")
    return LabelVolume(data, int(header["n_classes"]), tuple(header["spacing"]))


def write_enface(path, ef: EnFaceImage):
    _write(path, "enface", ef.data, ef.spacing)


def read_enface(path) -> EnFaceImage:
    header, data = _read(path, "enface", 2)
    return EnFaceImage(data, tuple(header["spacing"]))


# ---------------------------------------------------------------------------
# coordinates


def normalize_index(n, index):
    """Map voxel index in [0, n-1] affinely onto [-1, 1]."""
    index = np.asarray(index, dtype=np.float64)
    if np.any(index < 0) or np.any(index > n - 1):
        raise IndexError(f"index outside [0, {n - 1}]")
    if n == 1:
        return np.zeros_like(index)
    return (2.0 * index - (n - 1)) / (n - 1)


def denormalize_index(n, coord):
    coord = np.asarray(coord, dtype=np.float64)
    if n == 1:
        return np.zeros_like(coord)
    return (coord * (n - 1) + (n - 1)) / 2.0


def normalize_coords(dims, index):
    """Voxel index triple(s) ``(..., 3)`` to normalized coordinates."""
    index = np.asarray(index, dtype=np.float64)
    return np.stack([normalize_index(n, index[..., a]) for a, n in enumerate(dims)], axis=-1)


def denormalize_coords(dims, coords):
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([denormalize_index(n, coords[..., a]) for a, n in enumerate(dims)], axis=-1)


def grid_coords(dims, z_positions=None, y_positions=None, x_positions=None):
    """Normalized coordinates of a (possibly fractional) index grid.

    Returns an array of shape (ny', nx', nz', 3). Positions default to the
    integer grid of ``dims``; fractional slow-axis positions give
    resolution-independent resampling.
    """
    ny, nx, nz = dims
    ys = np.arange(ny) if y_positions is None else np.asarray(y_positions, dtype=np.float64)
    xs = np.arange(nx) if x_positions is None else np.asarray(x_positions, dtype=np.float64)
    zs = np.arange(nz) if z_positions is None else np.asarray(z_positions, dtype=np.float64)
    cy = normalize_index(ny, ys)
    cx = normalize_index(nx, xs)
    cz = normalize_index(nz, zs)
    g = np.empty((len(cy), len(cx), len(cz), 3))
    g[..., 0] = cy[:, None, None]
    g[..., 1] = cx[None, :, None]
    g[..., 2] = cz[None, None, :]
    return g


def slice_schedule(n_total, n_keep, mode="equidistant"):
    """Indices of the B-scans kept for training."""
    if not 2 <= n_keep <= n_total:
        raise ValueError(f"n_keep={n_keep} must lie in [2, {n_total}]")
    if mode == "equidistant":
        idx = np.rint(np.linspace(0, n_total - 1, n_keep)).astype(int)
    elif mode == "every_kth":
        k = (n_total - 1) // (n_keep - 1)
        idx = np.arange(n_keep) * k
    else:
        raise ValueError(f"unknown slice schedule mode {mode!r}")
    return np.unique(idx)


# ---------------------------------------------------------------------------
# phantoms

# bright/dark alternation loosely following retinal OCT reflectivity
_LAYER_INTENSITY = (0.80, 0.45, 0.70, 0.30, 0.65, 0.25, 0.85, 0.55, 0.75, 0.40, 0.60, 0.35)


@dataclass
class PhantomSpec:
    """Parameters of a synthetic layered retina-like volume."""

    dims: tuple = (64, 96, 64)
    spacing: tuple = (0.004, 0.0625, 0.094)
    n_layers: int = 8
    top: float = 0.25
    thickness: float = 0.5
    thickness_weights: tuple | None = None
    min_thickness: float = 1.0
    surface_amplitude: tuple = (1.0, 3.0)
    surface_frequency: tuple = (0.5, 1.5)
    n_waves: int = 3
    thickness_variation: float = 0.25
    fovea_pit: bool = True
    pit_depth: float = 0.6
    pit_radius: float = 0.15
    pit_jitter: float = 0.1
    vessel_count: int = 2
    vessel_radius: float = 1.5
    vessel_contrast: float = 0.5
    vessel_intensity: float = 0.55
    shadow_factor: float = 0.35
    vessel_slope: float = 0.3
    vessel_wiggle: float = 0.0
    vessel_wiggle_period: float = 10.0
    background: float = 0.05
    noise: float = 0.15
    expansion: float = 1.0
    slow_wave_amplitude: float = 0.0
    slow_wave_frequency: tuple = (4.0, 6.0)
    seed: int = 0
    max_attempts: int = 50

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.surface_amplitude = tuple(self.surface_amplitude)
        self.surface_frequency = tuple(self.surface_frequency)
        self.slow_wave_frequency = tuple(self.slow_wave_frequency)
        if self.thickness_weights is not None:
            self.thickness_weights = tuple(self.thickness_weights)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"phantom dims {self.dims} invalid")
        if self.n_layers < 2:
            raise ValueError("phantom needs at least 2 layers")
        if not 0 <= self.noise < 1:
            raise ValueError("noise level must lie in [0, 1)")

    @property
    def n_classes(self):
        return self.n_layers + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Phantom:
    volume: Volume
    labels: LabelVolume
    enface: EnFaceImage
    surfaces: np.ndarray
    vessel_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def _smooth_field(rng, X, Z, n_waves, amp, freq):
    out = np.zeros_like(X)
    for _ in range(n_waves):
        a = rng.uniform(*amp) / np.sqrt(n_waves)
        f = rng.uniform(*freq)
        theta = rng.uniform(0, 2 * np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        out += a * np.sin(2 * np.pi * f * (np.cos(theta) * X + np.sin(theta) * Z) + ph)
    return out


def _sample_surfaces(spec, rng, X, Z):
    ny = spec.dims[0]
    n_thick = spec.n_layers - 1
    w = np.asarray(spec.thickness_weights if spec.thickness_weights is not None
                   else np.ones(n_thick), dtype=np.float64)
    if w.size != n_thick:
        raise ValueError(f"thickness_weights needs {n_thick} entries")
    base = spec.thickness * ny * spec.expansion * w / w.sum()
    top = spec.top * ny + _smooth_field(rng, X, Z, spec.n_waves, spec.surface_amplitude,
                                        spec.surface_frequency)
    if spec.fovea_pit:
        cx = 0.5 + rng.uniform(-spec.pit_jitter, spec.pit_jitter)
        cz = 0.5 + rng.uniform(-spec.pit_jitter, spec.pit_jitter)
        pit = np.exp(-((X - cx) ** 2 + (Z - cz) ** 2) / (2 * spec.pit_radius ** 2))
    else:
        pit = np.zeros_like(X)
    n_inner = max(1, n_thick // 2)
    # relative thickness undulation along the slow axis only
    slow = np.ones_like(Z)
    if spec.slow_wave_amplitude > 0:
        f = rng.uniform(*spec.slow_wave_frequency)
        slow = 1.0 + spec.slow_wave_amplitude * np.sin(2 * np.pi * f * Z + rng.uniform(0, 2 * np.pi))
    surfaces = [top]
    for k in range(n_thick):
        var = 1.0 + spec.thickness_variation * _smooth_field(rng, X, Z, 2, (0.5, 1.0), (0.3, 1.0))
        t = base[k] * var * slow
        if k < n_inner:
            t = t * (1.0 - spec.pit_depth * pit)
        surfaces.append(surfaces[-1] + t)
    return np.stack(surfaces)


def phantom_generate(spec: PhantomSpec) -> Phantom:
    """Build (volume, labels, en-face) for ``spec``; deterministic in ``spec.seed``."""
    ny, nx, nz = spec.dims
    rng = np.random.default_rng(spec.seed)
    X, Z = np.meshgrid(np.linspace(0, 1, nx), np.linspace(0, 1, nz), indexing="ij")
    for _ in range(spec.max_attempts):
        surfaces = _sample_surfaces(spec, rng, X, Z)
        thick = np.diff(surfaces, axis=0)
        if (thick.min() >= spec.min_thickness and surfaces[0].min() >= 1.0
                and surfaces[-1].max() <= ny - 2.0):
            break
    else:
        raise RuntimeError(f"layer surfaces cross or leave the volume after {spec.max_attempts} attempts")

    y = np.arange(ny, dtype=np.float64)[:, None, None] + 0.5
    labels = (y >= surfaces[:, None, :, :]).sum(axis=0).astype(np.uint8)

    layer_int = np.array([spec.background]
                         + [_LAYER_INTENSITY[k % len(_LAYER_INTENSITY)] for k in range(spec.n_layers)])
    clean = layer_int[labels]

    # vessels: tubes inside the top layer, running along the slow axis
    vessel_x = np.zeros((spec.vessel_count, nz))
    vessel_w = np.zeros((nx, nz))
    zz = np.arange(nz)
    xs = np.arange(nx)[:, None]
    for v in range(spec.vessel_count):
        x0 = rng.uniform(0.15, 0.85) * (nx - 1)
        slope = rng.uniform(-spec.vessel_slope, spec.vessel_slope)
        phase = rng.uniform(0, 2 * np.pi)
        path = (x0 + slope * (zz - nz / 2)
                + spec.vessel_wiggle * np.sin(2 * np.pi * zz / spec.vessel_wiggle_period + phase))
        path = np.clip(path, 0, nx - 1)
        vessel_x[v] = path
        prof = np.exp(-0.5 * ((xs - path[None, :]) / max(spec.vessel_radius, 1e-6)) ** 2)
        vessel_w = np.maximum(vessel_w, prof)
        mid = 0.5 * (surfaces[0] + surfaces[1])
        half = 0.5 * (surfaces[1] - surfaces[0])
        dy = (y - mid[None]) / np.maximum(half[None], 0.5)
        inside = (dy ** 2 + ((xs - path[None, :]) / max(spec.vessel_radius, 1e-6))[None] ** 2) <= 1.0
        clean = np.where(inside, spec.vessel_intensity, clean)
        below = y > (mid + half)[None]
        shadow = 1.0 - (1.0 - spec.shadow_factor) * prof[None] * below
        clean = clean * shadow

    if spec.noise > 0:
        speckle = rng.uniform(1 - spec.noise, 1 + spec.noise, size=clean.shape)
        data = np.clip(clean * speckle, 0.0, 1.0)
    else:
        data = clean

    # integrated reflectance of the retinal slab (classes between the first
    # and last surface), so thicker retina reads brighter
    slab = (labels >= 1) & (labels < spec.n_layers)
    proj = (layer_int[labels] * slab).sum(axis=0) / (spec.thickness * ny)
    ef = np.clip(1.5 * proj, 0.0, 1.0) * (1.0 - spec.vessel_contrast * vessel_w)

    spacing = spec.spacing
    return Phantom(
        volume=Volume(data.astype(np.float32), spacing),
        labels=LabelVolume(labels, spec.n_classes, spacing),
        enface=EnFaceImage(ef.astype(np.float32), (spacing[1], spacing[2])),
        surfaces=surfaces,
        vessel_x=vessel_x,
    )


def minmax_normalize(v: Volume) -> Volume:
    lo, hi = float(v.data.min()), float(v.data.max())
    scale = hi - lo if hi > lo else 1.0
    return Volume(((v.data - lo) / scale).astype(v.data.dtype), v.spacing)
