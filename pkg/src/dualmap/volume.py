"""Regular 3D grids, masked scalar volumes, and minimal NIfTI-1 I/O.

Only the subset of NIfTI-1 needed here is supported: single-file ``.nii``
(optionally gzipped), 3D scalar volumes (or 4D with a singleton fourth
dimension), float32/float64 data, and affine scale+offset geometry.
Rotations and shears in the sform are rejected since the model only needs
inter-voxel distances.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HDR_SIZE = 348
VOX_OFFSET = 352
DT_FLOAT32 = 16
DT_FLOAT64 = 64
GZIP_MAGIC = b"\x1f\x8b"


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


@dataclass(frozen=True)
class Grid3:
    """A regular 3D lattice: voxel counts, voxel sizes (mm), world origin (mm)."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.voxel_size) != 3 or any(s <= 0 for s in self.voxel_size):
            raise ValueError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def world_coords(self, index) -> np.ndarray:
        """World coordinates (mm) of a voxel index: origin + index * voxel_size."""
        idx = np.asarray(index)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            raise IndexError(f"index {index} out of range for dims {self.dims}")
        return np.asarray(self.origin) + idx * np.asarray(self.voxel_size)

    def all_world_coords(self) -> np.ndarray:
        """World coordinates of every voxel, (n_voxels, 3), column-major order."""
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]), np.arange(self.dims[1]), np.arange(self.dims[2]),
            indexing="ij",
        )
        idx = np.stack(
            [ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1
        )
        return np.asarray(self.origin) + idx * np.asarray(self.voxel_size)


@dataclass(frozen=True)
class MaskedVolume:
    """Scalar data on a Grid3 with a boolean analysis mask.

    ``data`` is only meaningful where ``mask`` is true; unmasked values are
    never read by downstream math.
    """

    grid: Grid3
    mask: np.ndarray = field(repr=False)
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        data = np.asarray(self.data, dtype=np.float64)
        if mask.shape != self.grid.dims:
            raise ValueError(f"mask shape {mask.shape} != grid dims {self.grid.dims}")
        if data.shape != self.grid.dims:
            raise ValueError(f"data shape {data.shape} != grid dims {self.grid.dims}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "data", data)

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def masked_values(self) -> np.ndarray:
        """Masked data values in column-major voxel order."""
        return self.data.ravel(order="F")[self.mask.ravel(order="F")]

    def masked_world_coords(self) -> np.ndarray:
        """World coordinates of masked voxels, column-major order."""
        return self.grid.all_world_coords()[self.mask.ravel(order="F")]

    def with_values(self, values: np.ndarray) -> "MaskedVolume":
        """New volume on the same grid/mask with masked values replaced."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_masked,):
            raise ValueError(f"expected {self.n_masked} values, got {values.shape}")
        flat = np.zeros(self.grid.n_voxels)
        flat[self.mask.ravel(order="F")] = values
        return MaskedVolume(self.grid, self.mask, flat.reshape(self.grid.dims, order="F"))


def _open_maybe_gzip(path, mode="rb"):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == GZIP_MAGIC:
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path, mask_path=None) -> MaskedVolume:
    """Read a NIfTI-1 single-file volume.

    The mask defaults to finite-and-nonzero voxels; ``mask_path`` overrides
    with an explicit mask volume (nonzero = in analysis).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    grid, data = _parse_nifti(raw, path)
    if mask_path is not None:
        mask_vol = read_nifti(mask_path)
        if mask_vol.grid.dims != grid.dims:
            raise NiftiError(
                f"mask dims {mask_vol.grid.dims} do not match volume dims {grid.dims}"
            )
        mask = mask_vol.data != 0
    else:
        mask = np.isfinite(data) & (data != 0)
    data = np.where(np.isfinite(data), data, 0.0)
    return MaskedVolume(grid, mask, data)


def _parse_nifti(raw: bytes, path) -> tuple[Grid3, np.ndarray]:
    if len(raw) < HDR_SIZE:
        raise NiftiError(f"{path}: file shorter than the 348-byte header")
    # Endianness is detected from sizeof_hdr.
    for bo in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(bo + "i", raw[:4])
        if sizeof_hdr == HDR_SIZE:
            break
    else:
        raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
    magic = raw[344:348]
    if magic[:3] != b"n+1":
        raise NiftiError(f"{path}: bad magic {magic!r}, expected 'n+1'")
    dim = struct.unpack(bo + "8h", raw[40:56])
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        ndim = 3
    if ndim != 3:
        raise NiftiError(f"{path}: expected 3D volume, got dim[0]={dim[0]} dim={dim[1:5]}")
    dims = (dim[1], dim[2], dim[3])
    (datatype, bitpix) = struct.unpack(bo + "2h", raw[70:74])
    if datatype == DT_FLOAT32:
        dtype = np.dtype(bo + "f4")
    elif datatype == DT_FLOAT64:
        dtype = np.dtype(bo + "f8")
    else:
        raise NiftiError(f"{path}: unsupported datatype code {datatype} (float32/float64 only)")
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    voxel_size = tuple(abs(p) for p in pixdim[1:4])
    (vox_offset,) = struct.unpack(bo + "f", raw[108:112])
    vox_offset = int(vox_offset) if vox_offset >= HDR_SIZE else VOX_OFFSET
    (qform_code, sform_code) = struct.unpack(bo + "2h", raw[252:256])
    if sform_code > 0:
        srow = np.array(struct.unpack(bo + "12f", raw[280:328])).reshape(3, 4)
        rot = srow[:, :3]
        off_diag = rot - np.diag(np.diag(rot))
        if np.max(np.abs(off_diag)) > 1e-4 * max(1.0, np.max(np.abs(rot))):
            raise NiftiError(f"{path}: rotated/sheared sform is not supported")
        origin = tuple(srow[:, 3])
    elif qform_code > 0:
        origin = struct.unpack(bo + "3f", raw[268:280])
    else:
        origin = (0.0, 0.0, 0.0)
    grid = Grid3(dims, voxel_size, origin)
    n = grid.n_voxels
    payload = raw[vox_offset : vox_offset + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise NiftiError(f"{path}: truncated data section")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    return grid, data.reshape(dims, order="F")


def write_nifti(vol: MaskedVolume, path, dtype: str = "float32") -> None:
    """Write a MaskedVolume as NIfTI-1; unmasked voxels are written as 0.

    Refuses to serialize non-finite masked data.
    """
    if not np.all(np.isfinite(vol.data[vol.mask])):
        raise ValueError("masked data contains non-finite values; refusing to write")
    if dtype == "float32":
        code, np_dtype = DT_FLOAT32, np.float32
    elif dtype == "float64":
        code, np_dtype = DT_FLOAT64, np.float64
    else:
        raise ValueError(f"dtype must be float32 or float64, got {dtype}")
    grid = vol.grid
    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, np.dtype(np_dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.voxel_size, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    srow = np.zeros((3, 4))
    srow[:, :3] = np.diag(grid.voxel_size)
    srow[:, 3] = grid.origin
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = b"n+1\x00"
    payload = np.where(vol.mask, vol.data, 0.0).astype(np_dtype)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * (VOX_OFFSET - HDR_SIZE))
        fh.write(payload.tobytes(order="F"))


def dump_voxels_csv(vol: MaskedVolume, path) -> None:
    """Debug dump, one voxel per row: i,j,k,x,y,z,value,mask."""
    grid = vol.grid
    with open(path, "w") as fh:
        fh.write("i,j,k,x,y,z,value,mask\n")
        for kk in range(grid.dims[2]):
            for jj in range(grid.dims[1]):
                for ii in range(grid.dims[0]):
                    x, y, z = grid.world_coords((ii, jj, kk))
                    fh.write(
                        f"{ii},{jj},{kk},{x:.6g},{y:.6g},{z:.6g},"
                        f"{vol.data[ii, jj, kk]:.10g},{int(vol.mask[ii, jj, kk])}\n"
                    )
