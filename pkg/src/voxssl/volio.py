"""Volume ingestion and preparation.

A minimal single-file NIfTI-1 reader/writer (348-byte header, uncompressed
payload), a project raw format, the standard preprocessing chain (reorient
to RAS, resample to 1 mm isotropic, centre crop/pad, min-max intensity
scaling) and a synthetic ellipsoid phantom generator with known class and
segmentation labels.

All operations are pure given their inputs; distinct volumes may be
processed concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

PAPER_TARGET_EXTENT = (144, 192, 192)

RAW_MAGIC = b"VXR1"
_RAW_HEADER = struct.Struct("<4s3I3f3sx")  # magic, extent, spacing, orientation

# NIfTI-1 datatype codes we load
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_NIFTI_BITPIX = {2: 8, 4: 16, 16: 32, 64: 64}
_DTYPE_CODES = {np.dtype(np.float32): 16, np.dtype(np.float64): 64}

_AXIS_OF = {"R": (0, 1), "L": (0, -1), "A": (1, 1), "P": (1, -1),
            "S": (2, 1), "I": (2, -1)}
_POS_LETTER = "RAS"
_NEG_LETTER = "LPI"


class NiftiParseError(ValueError):
    """Malformed NIfTI-1 bytes; ``offset`` locates the offending field."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RawParseError(ValueError):
    pass


class PhantomSpecError(ValueError):
    pass


def _check_orientation_code(code: str) -> None:
    if len(code) != 3 or any(c not in _AXIS_OF for c in code):
        raise ValueError(f"bad orientation code {code!r}")
    if sorted(_AXIS_OF[c][0] for c in code) != [0, 1, 2]:
        raise ValueError(f"orientation code {code!r} does not cover all three axes")


@dataclass
class Volume:
    """A dense 3-d scalar grid with spacing (mm) and orientation metadata.

    ``orientation`` is a three-letter code giving, per voxel axis, the
    anatomical direction of increasing index (canonical is "RAS").
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = "RAS"
    provenance: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-d, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        _check_orientation_code(self.orientation)

    @property
    def extent(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------


@dataclass
class Nifti1Header:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow: np.ndarray  # 3x4
    magic: bytes
    endian: str = "<"


def parse_nifti_header(blob: bytes) -> Nifti1Header:
    if len(blob) < 348:
        raise NiftiParseError(f"truncated header: need 348 bytes, got {len(blob)}",
                              offset=len(blob))
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        endian = ">"
    if sizeof_hdr != 348:
        raise NiftiParseError(f"sizeof_hdr must be 348, got {sizeof_hdr}", offset=0)

    dim = struct.unpack_from(endian + "8h", blob, 40)
    datatype, bitpix = struct.unpack_from(endian + "2h", blob, 70)
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)
    qform_code, sform_code = struct.unpack_from(endian + "2h", blob, 252)
    quatern = struct.unpack_from(endian + "3f", blob, 256)
    qoffset = struct.unpack_from(endian + "3f", blob, 268)
    srow = np.array([struct.unpack_from(endian + "4f", blob, 280 + 16 * i)
                     for i in range(3)])
    magic = blob[344:348]

    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiParseError(f"bad magic {magic!r}", offset=344)
    if not 1 <= dim[0] <= 7:
        raise NiftiParseError(f"dim[0] must be in [1,7], got {dim[0]}", offset=40)

    return Nifti1Header(sizeof_hdr=sizeof_hdr, dim=dim, datatype=datatype,
                        bitpix=bitpix, pixdim=pixdim, vox_offset=vox_offset,
                        scl_slope=scl_slope, scl_inter=scl_inter,
                        qform_code=qform_code, sform_code=sform_code,
                        quatern=quatern, qoffset=qoffset, srow=srow,
                        magic=magic, endian=endian)


def _axcodes_from_matrix(rot: np.ndarray) -> str:
    """Dominant-direction orientation letters for a voxel->world 3x3 matrix."""
    codes = []
    used: set[int] = set()
    for j in range(3):
        col = rot[:, j]
        for i in np.argsort(-np.abs(col)):
            if int(i) not in used:
                used.add(int(i))
                break
        codes.append(_POS_LETTER[int(i)] if col[int(i)] >= 0 else _NEG_LETTER[int(i)])
    return "".join(codes)


def _quaternion_matrix(hdr: Nifti1Header) -> np.ndarray:
    b, c, d = hdr.quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < -1e-4:
        raise NiftiParseError(
            f"qform quaternion is not unit length (b,c,d = {hdr.quatern})", offset=256)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = hdr.pixdim[0]
    if qfac == 0:
        qfac = 1.0
    rot[:, 2] *= qfac
    return rot


def _header_orientation(hdr: Nifti1Header) -> str:
    if hdr.sform_code > 0:
        return _axcodes_from_matrix(hdr.srow[:, :3])
    if hdr.qform_code > 0:
        return _axcodes_from_matrix(_quaternion_matrix(hdr))
    return "RAS"  # no transform recorded; assume canonical


def read_nifti(blob: bytes) -> Volume:
    """Load a single-file (.nii) NIfTI-1 byte string.

    Values are scaled by scl_slope/scl_inter when scl_slope is nonzero,
    spacing comes from pixdim, orientation from the sform (preferred) or a
    unit-quaternion qform.
    """
    hdr = parse_nifti_header(blob)
    if hdr.magic == b"ni1\x00":
        raise NiftiParseError("paired .hdr/.img files are not supported", offset=344)
    if hdr.datatype not in _NIFTI_DTYPES:
        raise NiftiParseError(f"unsupported datatype {hdr.datatype}", offset=70)
    if hdr.bitpix != _NIFTI_BITPIX[hdr.datatype]:
        raise NiftiParseError(
            f"bitpix {hdr.bitpix} inconsistent with datatype {hdr.datatype}", offset=72)

    ndim = hdr.dim[0]
    extents = list(hdr.dim[1:1 + ndim])
    if any(e > 1 for e in extents[3:]):
        raise NiftiParseError(f"only 3-d volumes supported, dim={hdr.dim}", offset=40)
    extents = (extents + [1, 1, 1])[:3]
    if any(e < 1 for e in extents):
        raise NiftiParseError(f"non-positive extent in dim={hdr.dim}", offset=40)

    offset = int(round(hdr.vox_offset))
    if offset < 348:
        raise NiftiParseError(f"vox_offset {offset} overlaps the header", offset=108)
    dtype = np.dtype(_NIFTI_DTYPES[hdr.datatype]).newbyteorder(hdr.endian)
    need = int(np.prod(extents)) * dtype.itemsize
    if len(blob) < offset + need:
        raise NiftiParseError(
            f"truncated payload: need {need} bytes at offset {offset}, have {len(blob) - offset}",
            offset=len(blob))

    flat = np.frombuffer(blob, dtype=dtype, count=int(np.prod(extents)), offset=offset)
    data = flat.reshape(extents, order="F")
    if hdr.datatype == 64:
        data = data.astype(np.float64)
    else:
        data = data.astype(np.float32)
    if hdr.scl_slope != 0.0:
        data = data * data.dtype.type(hdr.scl_slope) + data.dtype.type(hdr.scl_inter)

    spacing = tuple(abs(p) if p != 0 else 1.0 for p in hdr.pixdim[1:4])
    return Volume(data=data, spacing=spacing, orientation=_header_orientation(hdr),
                  provenance="nifti")


def write_nifti(v: Volume) -> bytes:
    """Serialise to a single-file NIfTI-1 byte string (bit-exact round trip)."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *v.data.shape, 1, 1, 1, 1)
    code = _DTYPE_CODES[v.data.dtype]
    struct.pack_into("<2h", hdr, 70, code, _NIFTI_BITPIX[code])
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 0.0, 0.0)  # slope 0: stored values are final
    struct.pack_into("<2h", hdr, 252, 0, 1)      # qform unset, sform "scanner"
    rot = np.zeros((3, 4))
    for j, ch in enumerate(v.orientation):
        world, sign = _AXIS_OF[ch]
        rot[world, j] = sign * v.spacing[j]
    for i in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * i, *rot[i])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00" * 4 + v.data.tobytes(order="F")


# ---------------------------------------------------------------------------
# Project raw format
# ---------------------------------------------------------------------------


def write_raw(v: Volume) -> bytes:
    """Fixed little-endian header (magic, extent, spacing, orientation) + float32 payload."""
    head = _RAW_HEADER.pack(RAW_MAGIC, *v.data.shape,
                            *(np.float32(s) for s in v.spacing),
                            v.orientation.encode("ascii"))
    return head + v.data.astype(np.float32).tobytes(order="C")


def read_raw(blob: bytes) -> Volume:
    if len(blob) < _RAW_HEADER.size:
        raise RawParseError(f"truncated raw header: need {_RAW_HEADER.size} bytes, got {len(blob)}")
    magic, ex, ey, ez, sx, sy, sz, orient = _RAW_HEADER.unpack_from(blob, 0)
    if magic != RAW_MAGIC:
        raise RawParseError(f"bad raw magic {magic!r}")
    extent = (ex, ey, ez)
    if any(e < 1 for e in extent):
        raise RawParseError(f"non-positive extent {extent}")
    need = int(np.prod(extent)) * 4
    if len(blob) < _RAW_HEADER.size + need:
        raise RawParseError(f"truncated raw payload: need {need} bytes, have {len(blob) - _RAW_HEADER.size}")
    data = np.frombuffer(blob, dtype="<f4", count=int(np.prod(extent)),
                         offset=_RAW_HEADER.size).reshape(extent)
    try:
        code = orient.decode("ascii")
        _check_orientation_code(code)
    except (UnicodeDecodeError, ValueError) as exc:
        raise RawParseError(f"bad orientation field {orient!r}") from exc
    return Volume(data=data.copy(), spacing=(sx, sy, sz), orientation=code,
                  provenance="raw")


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def reorient_to_ras(v: Volume) -> Volume:
    if v.orientation == "RAS":
        return v
    axes = [_AXIS_OF[ch] for ch in v.orientation]
    perm = [0, 0, 0]
    for j, (world, _sign) in enumerate(axes):
        perm[world] = j
    data = v.data.transpose(perm)
    spacing = tuple(v.spacing[perm[i]] for i in range(3))
    for i in range(3):
        if axes[perm[i]][1] < 0:
            data = np.flip(data, axis=i)
    return Volume(data=np.ascontiguousarray(data), spacing=spacing,
                  orientation="RAS", provenance=v.provenance)


def _trilinear_gather(data: np.ndarray, cx: np.ndarray, cy: np.ndarray,
                      cz: np.ndarray) -> np.ndarray:
    """Sample ``data`` at per-axis fractional coordinates with edge clamping."""
    out_dtype = data.dtype
    parts = []
    for c, n in zip((cx, cy, cz), data.shape):
        c = np.clip(c, 0.0, n - 1.0)
        i0 = np.floor(c).astype(np.intp)
        i0 = np.minimum(i0, n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        parts.append((i0, i1, (c - i0).astype(out_dtype)))
    (x0, x1, wx), (y0, y1, wy), (z0, z1, wz) = parts
    wx = wx[:, None, None]
    wy = wy[None, :, None]
    wz = wz[None, None, :]
    ix0, ix1 = x0[:, None, None], x1[:, None, None]
    iy0, iy1 = y0[None, :, None], y1[None, :, None]
    iz0, iz1 = z0[None, None, :], z1[None, None, :]
    out = (data[ix0, iy0, iz0] * (1 - wx) * (1 - wy) * (1 - wz)
           + data[ix1, iy0, iz0] * wx * (1 - wy) * (1 - wz)
           + data[ix0, iy1, iz0] * (1 - wx) * wy * (1 - wz)
           + data[ix0, iy0, iz1] * (1 - wx) * (1 - wy) * wz
           + data[ix1, iy1, iz0] * wx * wy * (1 - wz)
           + data[ix1, iy0, iz1] * wx * (1 - wy) * wz
           + data[ix0, iy1, iz1] * (1 - wx) * wy * wz
           + data[ix1, iy1, iz1] * wx * wy * wz)
    return out.astype(out_dtype, copy=False)


def resize_trilinear(data: np.ndarray, out_extent: tuple[int, int, int]) -> np.ndarray:
    """Resize with align-corners coordinate mapping; exact copy when extents match."""
    if tuple(data.shape) == tuple(out_extent):
        return data.copy()
    coords = []
    for n_in, n_out in zip(data.shape, out_extent):
        if n_out == 1:
            coords.append(np.array([(n_in - 1) / 2.0]))
        else:
            coords.append(np.arange(n_out) * ((n_in - 1) / (n_out - 1)))
    return _trilinear_gather(data, *coords)


def resample_isotropic(v: Volume) -> Volume:
    """Trilinear resample to 1 mm^3; voxel i sits at physical i * spacing mm."""
    if v.spacing == (1.0, 1.0, 1.0):
        return v
    out_extent = tuple(max(1, int(round(e * s))) for e, s in zip(v.data.shape, v.spacing))
    coords = [np.arange(n) / s for n, s in zip(out_extent, v.spacing)]
    data = _trilinear_gather(v.data, *coords)
    return Volume(data=data, spacing=(1.0, 1.0, 1.0), orientation=v.orientation,
                  provenance=v.provenance)


def crop_pad_center(data: np.ndarray, target: tuple[int, int, int]) -> np.ndarray:
    if tuple(data.shape) == tuple(target):
        return data
    if any(t < 1 for t in target):
        raise ValueError(f"target extent must be positive, got {target}")
    out = np.zeros(target, dtype=data.dtype)
    src, dst = [], []
    for n, t in zip(data.shape, target):
        if n >= t:
            s = (n - t) // 2
            src.append(slice(s, s + t))
            dst.append(slice(0, t))
        else:
            d = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(d, d + n))
    out[tuple(dst)] = data[tuple(src)]
    return out


def scale_minmax(data: np.ndarray) -> np.ndarray:
    """Map intensities to [0,1]; a constant volume maps to all zeros."""
    mn = data.min()
    mx = data.max()
    if mx == mn:
        return np.zeros_like(data)
    return (data - mn) / (mx - mn)


def preprocess(v: Volume, target_extent: tuple[int, int, int]) -> Volume:
    """Reorient to RAS, resample to 1 mm^3, centre crop/pad, scale to [0,1].

    Idempotent: a second application returns the input bit-exactly.
    """
    v = reorient_to_ras(v)
    v = resample_isotropic(v)
    data = crop_pad_center(v.data, target_extent)
    if data.size == 0:
        raise ValueError(f"zero-extent volume after crop to {target_extent}")
    data = scale_minmax(data)
    return Volume(data=data, spacing=(1.0, 1.0, 1.0), orientation="RAS",
                  provenance=v.provenance)


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipsoid head phantom with two lateral target structures.

    ``class_bit`` selects the latent class; class 1 differs from class 0
    only by ``class_delta`` added to the head radius along axis 0. The two
    target structures provide 3-class segmentation labels (background,
    left, right).
    """

    extent: tuple[int, int, int] = (16, 16, 16)
    noise_level: float = 0.05
    center_jitter: float = 1.0
    radii_range: tuple[float, float] = (4.0, 5.5)
    class_bit: int = 0
    class_delta: float = 0.0
    structure_radii: tuple[float, float, float] = (2.2, 1.8, 1.8)
    structure_offset: float = 3.0
    head_intensity: float = 0.55
    structure_intensity: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.class_bit not in (0, 1):
            raise PhantomSpecError(f"class_bit must be 0 or 1, got {self.class_bit}")
        if any(e < 4 for e in self.extent):
            raise PhantomSpecError(f"extent too small: {self.extent}")
        if self.structure_offset <= self.structure_radii[0]:
            raise PhantomSpecError("left/right structures would overlap")


def _ellipsoid_mask(extent, center, radii) -> np.ndarray:
    grids = np.indices(extent, dtype=np.float64)
    acc = np.zeros(extent)
    for g, c, r in zip(grids, center, radii):
        acc += ((g - c) / r) ** 2
    return acc <= 1.0


def _check_inside(extent, center, radii, what: str) -> None:
    for e, c, r in zip(extent, center, radii):
        if c - r < 0 or c + r > e - 1:
            raise PhantomSpecError(
                f"{what} ellipsoid (center {center}, radii {radii}) leaves the {extent} grid")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, int, np.ndarray]:
    """Deterministic phantom: returns (volume, class label, segmentation labels).

    Label map classes: 0 background, 1 left structure, 2 right structure.
    """
    rng = np.random.default_rng(spec.seed)
    extent = spec.extent
    base_center = np.array([(e - 1) / 2.0 for e in extent])
    center = base_center + rng.uniform(-spec.center_jitter, spec.center_jitter, size=3)
    radii = rng.uniform(*spec.radii_range, size=3)
    if spec.class_bit == 1:
        radii = radii + np.array([spec.class_delta, 0.0, 0.0])

    left_center = center - np.array([spec.structure_offset, 0.0, 0.0])
    right_center = center + np.array([spec.structure_offset, 0.0, 0.0])
    _check_inside(extent, center, radii, "head")
    _check_inside(extent, left_center, spec.structure_radii, "left structure")
    _check_inside(extent, right_center, spec.structure_radii, "right structure")

    head = _ellipsoid_mask(extent, center, radii)
    left = _ellipsoid_mask(extent, left_center, spec.structure_radii)
    right = _ellipsoid_mask(extent, right_center, spec.structure_radii)

    data = np.zeros(extent, dtype=np.float32)
    data[head] = spec.head_intensity
    data[left] = spec.structure_intensity
    data[right] = spec.structure_intensity
    data = data + rng.normal(0.0, spec.noise_level, size=extent).astype(np.float32)
    data = np.clip(data, 0.0, 1.0)

    labels = np.zeros(extent, dtype=np.int8)
    labels[left] = 1
    labels[right] = 2

    vol = Volume(data=data, spacing=(1.0, 1.0, 1.0), orientation="RAS",
                 provenance=f"phantom(seed={spec.seed}, class={spec.class_bit})")
    return vol, spec.class_bit, labels


def phantom_dataset(base: PhantomSpec, n: int, seed: int = 0,
                    ) -> list[tuple[Volume, int, np.ndarray]]:
    """n phantoms with alternating class bits and per-item derived seeds."""
    out = []
    for i in range(n):
        spec = replace(base, seed=seed + i, class_bit=i % 2)
        out.append(generate_phantom(spec))
    return out
