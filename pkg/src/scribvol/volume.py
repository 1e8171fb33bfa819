"""Domain types for anisotropic 3D volumes and their bit-exact file formats.

All grids use x-fastest index ordering: a voxel (x, y, z) lives at flat
index ``x + nx*(y + ny*z)``.  Arrays are indexed ``data[x, y, z]`` and carry
a physical ``spacing`` in millimetres per voxel along each axis.  Every type
is immutable after construction; constructors reject invariant violations so
no instance can exist in an invalid state.

File formats (``.svol`` and ``.scrib``) are a UTF-8 text header followed by
a raw little-endian payload; see :func:`save_volume` for the layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimsMismatchError, FormatError, ValidationError

MAGIC = "SVOL1"
ENCODING_TAG = "little-endian x-fastest"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("<u1"), "u32": np.dtype("<u4")}


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValidationError(f"spacing components must be finite and > 0, got {sp}")
    return sp


def _check_dims(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ValidationError(f"expected a 3D grid, got shape {tuple(shape)}")
    dims = tuple(int(n) for n in shape)
    if any(n <= 0 for n in dims):
        raise ValidationError(f"all dims must be positive, got {dims}")
    return dims


def _freeze(arr: np.ndarray) -> np.ndarray:
    # Copy before freezing so a caller's array never changes flags under them.
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued intensity grid with physical spacing.

    ``data`` is stored as float32 (the on-disk precision); intensities must
    be finite.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        dims = _check_dims(arr.shape)
        sp = _check_spacing(self.spacing)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("intensities must be finite")
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "_dims", dims)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self._dims))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Non-negative integer label grid.

    ``num_labels`` is one past the largest storable label (labels live in
    ``0..num_labels-1``); by default it is inferred as ``max(data)+1``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    num_labels: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"labels must be integers, got dtype {arr.dtype}")
        if arr.size and arr.min() < 0:
            raise ValidationError("labels must be non-negative")
        dims = _check_dims(arr.shape)
        sp = _check_spacing(self.spacing)
        arr = arr.astype(np.uint32, copy=False)
        n = self.num_labels if self.num_labels is not None else int(arr.max()) + 1
        n = int(n)
        if arr.max(initial=0) >= n:
            raise ValidationError(
                f"label {int(arr.max())} out of range for num_labels={n}"
            )
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "num_labels", n)
        object.__setattr__(self, "_dims", dims)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-voxel K-class soft prediction, shape (nx, ny, nz, K).

    Values must lie in [0, 1].  When ``simplex`` is set, each voxel's
    K-vector must sum to 1 within 1e-6.  Held at float64 so downstream
    gradients stay accurate; the file payload is still f32.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    simplex: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValidationError(f"expected (nx, ny, nz, K) data, got shape {arr.shape}")
        dims = _check_dims(arr.shape[:3])
        if arr.shape[3] < 1:
            raise ValidationError("num_classes must be >= 1")
        sp = _check_spacing(self.spacing)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("probabilities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.simplex:
            sums = arr.astype(np.float64).sum(axis=3)
            err = float(np.abs(sums - 1.0).max())
            if err > 1e-6:
                raise ValidationError(
                    f"simplex-flagged volume has per-voxel sums off by {err:.2e}"
                )
        object.__setattr__(self, "data", _freeze(arr))
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "_dims", dims)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims

    @property
    def num_classes(self) -> int:
        return self.data.shape[3]


@dataclass(frozen=True, eq=False)
class ScribbleSet:
    """Sparse labeled voxels: an (n, 4) array of ``x y z label`` rows.

    Label 0 is background; foreground classes are 1..K.  A voxel may appear
    more than once only with a consistent label.
    """

    entries: np.ndarray
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.int64)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValidationError(f"entries must be (n, 4), got shape {arr.shape}")
        dims = _check_dims(self.dims)
        sp = _check_spacing(self.spacing)
        if arr.shape[0]:
            if arr[:, 3].min() < 0:
                raise ValidationError("scribble labels must be non-negative")
            oob = (arr[:, :3] < 0).any(axis=1) | (arr[:, :3] >= np.array(dims)).any(axis=1)
            if oob.any():
                bad = arr[np.argmax(oob), :3]
                raise ValidationError(
                    f"scribble voxel {tuple(int(v) for v in bad)} outside dims {dims}"
                )
            flat = arr[:, 0] + dims[0] * (arr[:, 1] + dims[1] * arr[:, 2])
            order = np.argsort(flat, kind="stable")
            f, lab = flat[order], arr[order, 3]
            dup = (f[1:] == f[:-1]) & (lab[1:] != lab[:-1])
            if dup.any():
                i = int(np.argmax(dup))
                x, y, z = arr[order[i], :3]
                raise ValidationError(
                    f"voxel ({x}, {y}, {z}) carries labels "
                    f"{int(lab[i])} and {int(lab[i + 1])}"
                )
        object.__setattr__(self, "entries", _freeze(arr.astype(np.int32)))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", sp)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def num_classes(self) -> int:
        """One past the largest scribble label (0 when empty)."""
        return int(self.entries[:, 3].max()) + 1 if len(self) else 0

    def labels_present(self) -> np.ndarray:
        return np.unique(self.entries[:, 3])

    def annotated_slices(self) -> np.ndarray:
        """Sorted z indices that carry at least one scribble voxel."""
        return np.unique(self.entries[:, 2])

    def dense_labels(self, fill: int = -1) -> np.ndarray:
        """Rasterize to an (nx, ny, nz) int array, ``fill`` where unannotated."""
        out = np.full(self.dims, fill, dtype=np.int32)
        e = self.entries
        out[e[:, 0], e[:, 1], e[:, 2]] = e[:, 3]
        return out


def validate_scribbles(scribbles: ScribbleSet, volume: ScalarVolume) -> ScribbleSet:
    """Check a scribble set against a paired volume; return it unchanged.

    Raises ``DimsMismatchError`` when the grids differ and ``ValidationError``
    for out-of-bounds voxels or conflicting labels (re-checked defensively).
    """
    if scribbles.dims != volume.dims or scribbles.spacing != volume.spacing:
        raise DimsMismatchError(
            f"scribbles on {scribbles.dims}/{scribbles.spacing} do not match "
            f"volume {volume.dims}/{volume.spacing}"
        )
    # Re-running the constructor replays the in-bounds and conflict checks.
    ScribbleSet(scribbles.entries, volume.dims, volume.spacing)
    return scribbles


def normalize_intensities(volume: ScalarVolume) -> ScalarVolume:
    """Affinely rescale intensities to [0, 1] (constant volumes map to 0)."""
    data = volume.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        data = (data - lo) / (hi - lo)
    else:
        data = np.zeros_like(data)
    return ScalarVolume(data, volume.spacing)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _header_lines(kind: str, dims, spacing, extra: list[tuple[str, str]]) -> str:
    lines = [MAGIC, f"kind {kind}", f"dims {dims[0]} {dims[1]} {dims[2]}",
             f"spacing_mm {_format_floats(spacing)}"]
    lines += [f"{k} {v}" for k, v in extra]
    lines.append("end\n")
    return "\n".join(lines)


def _parse_header(blob: bytes, path) -> tuple[dict, bytes]:
    marker = b"\nend\n"
    pos = blob.find(marker)
    if pos < 0:
        raise FormatError(f"{path}: missing header terminator 'end'")
    try:
        text = blob[:pos].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: header is not valid UTF-8") from e
    lines = text.split("\n")
    if lines[0] != MAGIC:
        raise FormatError(f"{path}: bad magic {lines[0]!r}, expected {MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        key, _, value = line.partition(" ")
        if not key or not value:
            raise FormatError(f"{path}: malformed header line {line!r}")
        if key in fields:
            raise FormatError(f"{path}: duplicate header key {key!r}")
        fields[key] = value
    return fields, blob[pos + len(marker):]


def _require(fields: dict, key: str, path) -> str:
    if key not in fields:
        raise FormatError(f"{path}: header missing key {key!r}")
    return fields[key]


def _parse_dims_spacing(fields: dict, path):
    try:
        dims = tuple(int(t) for t in _require(fields, "dims", path).split())
        spacing = tuple(float(t) for t in _require(fields, "spacing_mm", path).split())
    except ValueError as e:
        raise FormatError(f"{path}: unparseable dims/spacing") from e
    if len(dims) != 3 or len(spacing) != 3:
        raise FormatError(f"{path}: dims and spacing_mm need 3 components")
    return dims, spacing


def _read_blob(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p.read_bytes()


def _check_payload(payload: bytes, expected: int, path):
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )


def _load_grid(path, want_kind: str):
    fields, payload = _parse_header(_read_blob(path), path)
    kind = _require(fields, "kind", path)
    if kind != want_kind:
        raise FormatError(f"{path}: kind is {kind!r}, expected {want_kind!r}")
    if _require(fields, "encoding", path) != ENCODING_TAG:
        raise FormatError(f"{path}: unsupported encoding {fields['encoding']!r}")
    dtype_tag = _require(fields, "dtype", path)
    if dtype_tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype {dtype_tag!r}")
    dims, spacing = _parse_dims_spacing(fields, path)
    return fields, payload, dims, spacing, _DTYPES[dtype_tag]


def save_volume(volume: ScalarVolume, path) -> None:
    """Write a ScalarVolume as a ``.svol`` container.

    Layout: the text header (magic, kind, dims, spacing_mm, dtype, encoding,
    terminated by an ``end`` line) followed by the raw little-endian payload
    in x-fastest order.  ``load_volume(save_volume(v)) == v`` bit for bit.
    """
    header = _header_lines("scalar", volume.dims, volume.spacing,
                           [("dtype", "f32"), ("encoding", ENCODING_TAG)])
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header.encode("utf-8") + payload)


def load_volume(path) -> ScalarVolume:
    fields, payload, dims, spacing, dtype = _load_grid(path, "scalar")
    _check_payload(payload, int(np.prod(dims)) * dtype.itemsize, path)
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return ScalarVolume(data, spacing)


def save_labels(volume: LabelVolume, path) -> None:
    """Label counterpart of :func:`save_volume`; u8 payload when it fits."""
    tag = "u8" if volume.num_labels <= 256 else "u32"
    header = _header_lines("label", volume.dims, volume.spacing,
                           [("dtype", tag), ("encoding", ENCODING_TAG),
                            ("num_labels", str(volume.num_labels))])
    payload = volume.data.astype(_DTYPES[tag]).tobytes(order="F")
    Path(path).write_bytes(header.encode("utf-8") + payload)


def load_labels(path) -> LabelVolume:
    fields, payload, dims, spacing, dtype = _load_grid(path, "label")
    _check_payload(payload, int(np.prod(dims)) * dtype.itemsize, path)
    try:
        num_labels = int(_require(fields, "num_labels", path))
    except ValueError as e:
        raise FormatError(f"{path}: unparseable num_labels") from e
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    return LabelVolume(data.astype(np.uint32), spacing, num_labels=num_labels)


def save_probabilities(volume: ProbabilityVolume, path) -> None:
    """Probability counterpart; K planes interleaved per voxel (class-fastest)."""
    k = volume.num_classes
    header = _header_lines("prob", volume.dims, volume.spacing,
                           [("dtype", "f32"), ("encoding", ENCODING_TAG),
                            ("num_classes", str(k)),
                            ("simplex", "1" if volume.simplex else "0")])
    interleaved = np.ascontiguousarray(np.moveaxis(volume.data, 3, 0), dtype="<f4")
    Path(path).write_bytes(header.encode("utf-8") + interleaved.tobytes(order="F"))


def load_probabilities(path) -> ProbabilityVolume:
    fields, payload, dims, spacing, dtype = _load_grid(path, "prob")
    try:
        k = int(_require(fields, "num_classes", path))
    except ValueError as e:
        raise FormatError(f"{path}: unparseable num_classes") from e
    if k < 1:
        raise FormatError(f"{path}: num_classes must be >= 1")
    simplex = _require(fields, "simplex", path) == "1"
    _check_payload(payload, int(np.prod(dims)) * k * dtype.itemsize, path)
    data = np.frombuffer(payload, dtype=dtype).reshape((k,) + dims, order="F")
    return ProbabilityVolume(np.moveaxis(data, 0, 3), spacing, simplex=simplex)


def save_scribbles(scribbles: ScribbleSet, path) -> None:
    """Write a ``.scrib`` file: the header preamble plus ``x y z label`` lines."""
    header = _header_lines("scribbles", scribbles.dims, scribbles.spacing,
                           [("count", str(len(scribbles)))])
    body = "".join(f"{x} {y} {z} {c}\n" for x, y, z, c in scribbles.entries)
    Path(path).write_bytes(header.encode("utf-8") + body.encode("utf-8"))


def load_scribbles(path) -> ScribbleSet:
    fields, payload = _parse_header(_read_blob(path), path)
    if _require(fields, "kind", path) != "scribbles":
        raise FormatError(f"{path}: kind is {fields['kind']!r}, expected 'scribbles'")
    dims, spacing = _parse_dims_spacing(fields, path)
    try:
        count = int(_require(fields, "count", path))
    except ValueError as e:
        raise FormatError(f"{path}: unparseable count") from e
    lines = payload.decode("utf-8").splitlines()
    if len(lines) != count:
        raise FormatError(f"{path}: {len(lines)} entry lines, header declares {count}")
    try:
        entries = np.array([[int(t) for t in line.split()] for line in lines],
                           dtype=np.int64).reshape(count, 4)
    except ValueError as e:
        raise FormatError(f"{path}: malformed scribble entry") from e
    return ScribbleSet(entries, dims, spacing)
