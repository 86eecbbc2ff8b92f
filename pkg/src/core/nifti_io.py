"""
NIfTI-1 读写模块
仅支持单文件形式（.nii / .nii.gz，magic "n+1"），头部解析与数据解码基于 nibabel
"""
import gzip
import io
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import nibabel as nib
import numpy as np

from core.exceptions import NiftiFormatError
from core.volume import Volume3D, VolumeKind
from utils.file_utils import atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NIFTI1_HEADER_SIZE = 348
NIFTI2_HEADER_SIZE = 540

# NIfTI datatype 代码 -> numpy 类型
SUPPORTED_DATATYPES = {
    2: np.uint8,
    4: np.int16,
    512: np.uint16,
    16: np.float32,
    64: np.float64,
}


def _read_raw(path: Path) -> bytes:
    if not path.is_file():
        raise NiftiFormatError("文件不存在", path)
    with open(path, "rb") as f:
        raw = f.read()
    if path.name.endswith(".gz") or raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise NiftiFormatError(f"gzip 解压失败 ({e})", path, "payload")
    return raw


def _sizeof_hdr(raw: bytes) -> Tuple[int, int]:
    little = struct.unpack("<i", raw[:4])[0]
    big = struct.unpack(">i", raw[:4])[0]
    return little, big


def _parse_header(raw: bytes, path: Path) -> nib.Nifti1Header:
    """校验文件变体与 magic，返回 nibabel 头部对象"""
    if len(raw) < 4:
        raise NiftiFormatError("头部被截断", path, "sizeof_hdr")
    sizes = _sizeof_hdr(raw)
    if NIFTI2_HEADER_SIZE in sizes:
        raise NiftiFormatError("unsupported NIfTI variant (NIfTI-2)", path, "sizeof_hdr")
    if NIFTI1_HEADER_SIZE not in sizes:
        raise NiftiFormatError(f"头部大小无效 {sizes[0]}", path, "sizeof_hdr")
    if len(raw) < NIFTI1_HEADER_SIZE:
        raise NiftiFormatError("头部被截断", path, "header")

    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiFormatError("unsupported NIfTI variant (header/data pair 'ni1')", path, "magic")
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"malformed header: magic {magic!r} 不是 'n+1'", path, "magic")

    try:
        return nib.Nifti1Header.from_fileobj(io.BytesIO(raw), check=False)
    except Exception as e:
        raise NiftiFormatError(f"malformed header ({e})", path, "header")


def _best_affine(header: nib.Nifti1Header, spacing: Tuple[float, float, float], path: Path) -> np.ndarray:
    """sform (code>0) 优先，其次 qform，最后 diag(spacing)"""
    sform, sform_code = header.get_sform(coded=True)
    qform, qform_code = header.get_qform(coded=True)
    if sform_code and sform_code > 0:
        if qform_code and qform_code > 0 and not np.allclose(sform, qform, atol=1e-4):
            logger.info("sform 与 qform 不一致，使用 sform: %s", path)
        return np.asarray(sform, dtype=np.float64)
    if qform_code and qform_code > 0:
        return np.asarray(qform, dtype=np.float64)
    return np.diag([*spacing, 1.0])


def _read_array(path: PathLike, ndim: int) -> Tuple[np.ndarray, Tuple[float, float, float], np.ndarray, int]:
    path = Path(path)
    raw = _read_raw(path)
    header = _parse_header(raw, path)

    datatype = int(header["datatype"])
    if datatype not in SUPPORTED_DATATYPES:
        raise NiftiFormatError(f"不支持的数据类型代码 {datatype}", path, "datatype")

    dim = [int(d) for d in header["dim"]]
    if dim[0] != ndim:
        raise NiftiFormatError(f"维度数为 {dim[0]}，需要 {ndim}", path, "dim")
    shape = tuple(dim[1:ndim + 1])
    if any(n < 1 for n in shape):
        raise NiftiFormatError(f"维度非法 {shape}", path, "dim")

    vox_offset = int(header["vox_offset"])
    itemsize = np.dtype(SUPPORTED_DATATYPES[datatype]).itemsize
    expected = vox_offset + int(np.prod(shape)) * itemsize
    if len(raw) < expected:
        raise NiftiFormatError(f"数据被截断：需要 {expected} 字节，实际 {len(raw)}", path, "payload")

    data = np.asarray(header.data_from_fileobj(io.BytesIO(raw)))
    zooms = header.get_zooms()
    spacing = tuple(float(z) for z in zooms[:3])
    if not all(s > 0 for s in spacing):
        raise NiftiFormatError(f"体素间距非法 {spacing}", path, "pixdim")
    affine = _best_affine(header, spacing, path)
    return data, spacing, affine, datatype


def read_nifti(path: PathLike, kind: Optional[VolumeKind] = None) -> Volume3D:
    """
    读取三维 NIfTI-1 单文件体数据

    Args:
        path: .nii 或 .nii.gz 文件路径
        kind: 体数据类型；None 时 uint8 视为标签，其余视为强度

    Returns:
        Volume3D；float64 文件读出的强度保持 float64，数值与文件中存储的值相同

    Raises:
        NiftiFormatError: magic/变体/数据类型/维度/截断等错误
    """
    data, spacing, affine, datatype = _read_array(path, ndim=3)
    if kind is None:
        kind = VolumeKind.LABEL if datatype == 2 else VolumeKind.INTENSITY
    try:
        return Volume3D(data, spacing, affine, kind)
    except ValueError as e:
        raise NiftiFormatError(str(e), path, "data")


def read_nifti_channels(path: PathLike) -> Tuple[np.ndarray, Volume3D]:
    """
    读取四维（通道在最后）NIfTI 文件，例如多通道概率图

    Returns:
        (形状 (nx, ny, nz, C) 的 float64 数组, 描述网格的参考体数据)
    """
    data, spacing, affine, _ = _read_array(path, ndim=4)
    reference = Volume3D(np.zeros(data.shape[:3], dtype=np.float32), spacing, affine)
    return data.astype(np.float64), reference


def _to_bytes(array: np.ndarray, spacing: Tuple[float, ...], affine: np.ndarray) -> bytes:
    image = nib.Nifti1Image(array, affine)
    image.set_sform(affine, code=1)
    image.set_qform(affine, code=1)
    header = image.header
    header.set_data_dtype(array.dtype)
    header.set_zooms(tuple(spacing) + tuple(header.get_zooms()[3:]))
    header.set_xyzt_units("mm")
    return image.to_bytes()


def _write_payload(payload: bytes, path: Path) -> None:
    if path.name.endswith(".gz"):
        # mtime=0 保证同样的输入得到逐字节相同的文件
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    atomic_write_bytes(path, payload)


def write_nifti(vol: Volume3D, path: PathLike) -> None:
    """
    写出 NIfTI-1 单文件体数据

    标签体数据存为 uint8，强度存为 float32；sform_code = 1；路径以 .gz 结尾时 gzip 压缩。

    Args:
        vol: 体数据
        path: 输出路径（父目录必须存在）

    Raises:
        NiftiFormatError: 标签值超出 uint8 范围
        OSError: 写入失败
    """
    path = Path(path)
    if vol.is_label:
        if vol.data.size and (vol.data.max() > 255 or vol.data.min() < 0):
            raise NiftiFormatError(f"标签值 {int(vol.data.max())} 超出 uint8 范围", path, "data")
        array = vol.data.astype("<u1")
    else:
        array = vol.data.astype("<f4")
    _write_payload(_to_bytes(array, vol.spacing, vol.affine), path)


def write_nifti_channels(channels: np.ndarray, reference: Volume3D, path: PathLike) -> None:
    """写出四维（通道在最后）float32 NIfTI，网格取自 reference"""
    channels = np.asarray(channels)
    if channels.ndim != 4 or channels.shape[:3] != reference.dims:
        raise NiftiFormatError(f"通道数组形状 {channels.shape} 与网格 {reference.dims} 不符", path, "dim")
    _write_payload(_to_bytes(channels.astype("<f4"), reference.spacing, reference.affine), Path(path))
