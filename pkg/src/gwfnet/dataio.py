"""File formats: clip volumes, dataset manifests, raw PGM frames, checkpoints.

Clip file layout (little-endian)::

    b"GWFC" | u16 version | u8 dtype (0 = float32) | u8 rank | u32 extents[rank] | float32 payload

Checkpoint layout (little-endian)::

    b"GWCK" | u16 version
    str preset | u32 class count | u64 seed | u32 epoch | u32 window count | str extra (JSON)
    u32 tensor count
    per tensor: str name | u8 dtype (0 = f32, 1 = f64) | u8 rank | u32 extents[rank] | payload
    8-byte BLAKE2b digest of everything above

``str`` is a u16 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, CorruptionError, FormatError, InputError, ShapeError
from .sampler import ClipVolume, FrameSequence

CLIP_MAGIC = b"GWFC"
CLIP_VERSION = 1
CKPT_MAGIC = b"GWCK"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
FRAME_SUFFIXES = (".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")


# -- clip files -------------------------------------------------------------


def encode_clip(voxels: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(voxels, dtype="<f4")
    header = CLIP_MAGIC + struct.pack("<HBB", CLIP_VERSION, 0, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_clip(blob: bytes, source_id: str = "") -> ClipVolume:
    if len(blob) < 8 or blob[:4] != CLIP_MAGIC:
        raise FormatError(f"{source_id or 'clip'}: bad magic {blob[:4]!r}")
    version, dtype_tag, rank = struct.unpack_from("<HBB", blob, 4)
    if version != CLIP_VERSION:
        raise FormatError(f"{source_id}: unsupported clip version {version}")
    if dtype_tag != 0:
        raise FormatError(f"{source_id}: unsupported dtype tag {dtype_tag}")
    offset = 8 + 4 * rank
    if rank == 0 or len(blob) < offset:
        raise FormatError(f"{source_id}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape))
    if len(blob) - offset != 4 * count:
        raise FormatError(f"{source_id}: payload holds {len(blob) - offset} bytes, header promises {4 * count}")
    voxels = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
    return ClipVolume(voxels, source_id)


def write_clip(path, clip: ClipVolume | np.ndarray) -> None:
    voxels = clip.voxels if isinstance(clip, ClipVolume) else clip
    Path(path).write_bytes(encode_clip(voxels))


def read_clip(path) -> ClipVolume:
    path = Path(path)
    return decode_clip(path.read_bytes(), path.stem)


# -- manifests ----------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    subject: str
    bbox_path: Path | None = None

    @property
    def clip_id(self) -> str:
        return self.path.name


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    labels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.labels:
            self.labels = {name: i for i, name in enumerate(sorted({e.label for e in self.entries}))}

    @property
    def class_names(self) -> list[str]:
        return sorted(self.labels, key=self.labels.get)

    def label_index(self, entry: ManifestEntry) -> int:
        return self.labels[entry.label]

    def __len__(self) -> int:
        return len(self.entries)


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse ``path<TAB>label<TAB>subject[<TAB>bboxpath]`` lines.

    Relative paths resolve against the manifest's directory; ``#`` starts a comment.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(cols)}")
        clip_path = (base / cols[0]).resolve() if not Path(cols[0]).is_absolute() else Path(cols[0])
        bbox = None
        if len(cols) == 4 and cols[3]:
            bbox = (base / cols[3]).resolve() if not Path(cols[3]).is_absolute() else Path(cols[3])
        if check_paths and not clip_path.exists():
            raise FileNotFoundError(f"{path}:{lineno}: entry {cols[0]!r} does not exist")
        entries.append(ManifestEntry(clip_path, cols[1], cols[2], bbox))
    return DatasetManifest(entries)


def write_manifest(path, manifest: DatasetManifest | list[ManifestEntry]) -> None:
    entries = manifest.entries if isinstance(manifest, DatasetManifest) else manifest
    base = Path(path).resolve().parent
    lines = []
    for e in entries:
        cols = [_relative(e.path, base), e.label, e.subject]
        if e.bbox_path is not None:
            cols.append(_relative(e.bbox_path, base))
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _relative(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(p)


# -- raw frames and bounding boxes ------------------------------------------------------


def read_frame(path) -> np.ndarray:
    """Load an 8-bit grayscale frame scaled to [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def write_frame(path, frame: np.ndarray) -> None:
    """Write a [0, 1] frame as 8-bit PGM (P5)."""
    data = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


def frame_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_bboxes(path) -> list[tuple[int, int, int, int]]:
    """One ``top left height width`` box per line, one line per frame."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'top left height width'")
        boxes.append(tuple(int(v) for v in parts))
    return boxes


def _resize_bilinear(region: np.ndarray, target) -> np.ndarray:
    H, W = target
    h, w = region.shape
    if (h, w) == (H, W):
        return region.copy()
    # half-pixel centres, edges clamped
    rows = np.clip((np.arange(H) + 0.5) * (h / H) - 0.5, 0, h - 1)
    cols = np.clip((np.arange(W) + 0.5) * (w / W) - 0.5, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(region, [rr, cc], order=1, mode="nearest")


def center_box(frame_shape, target) -> tuple[int, int, int, int]:
    """Largest centred box with the aspect ratio of ``target``."""
    fh, fw = frame_shape
    H, W = target
    if fh * W >= fw * H:
        width = fw
        height = max(1, min(fh, round(fw * H / W)))
    else:
        height = fh
        width = max(1, min(fw, round(fh * W / H)))
    return ((fh - height) // 2, (fw - width) // 2, height, width)


def crop_person_bbox(frame: np.ndarray, bbox, target) -> np.ndarray:
    """Crop ``bbox = (top, left, height, width)`` and resize bilinearly to ``target``.

    With ``bbox=None`` the largest centred region of the target aspect is used.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"frame must be rank 2, got shape {frame.shape}")
    if bbox is None:
        bbox = center_box(frame.shape, target)
    top, left, height, width = (int(v) for v in bbox)
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > frame.shape[0] or left + width > frame.shape[1]:
        raise InputError(f"bounding box {tuple(bbox)} outside frame {frame.shape}")
    return _resize_bilinear(frame[top:top + height, left:left + width], target)


def load_frame_sequence(directory, target, bbox_path=None) -> FrameSequence:
    """Read, crop and resize every frame of a clip directory."""
    files = frame_files(directory)
    if not files:
        raise InputError(f"no frames found in {directory}")
    boxes = read_bboxes(bbox_path) if bbox_path is not None else None
    if boxes is not None and len(boxes) < len(files):
        raise InputError(f"{bbox_path}: {len(boxes)} boxes for {len(files)} frames")
    frames = [crop_person_bbox(read_frame(f), boxes[i] if boxes else None, target) for i, f in enumerate(files)]
    return FrameSequence.from_frames(frames)


# -- checkpoints ------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", _read(buf, 2))
    return _read(buf, n).decode("utf-8")


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("checkpoint truncated")
    return data


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


@dataclass
class CheckpointData:
    preset: str
    num_classes: int
    seed: int
    epoch: int
    window_count: int
    tensors: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)


def encode_checkpoint(data: CheckpointData) -> bytes:
    out = bytearray(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    out += _pack_str(data.preset)
    out += struct.pack("<IQII", data.num_classes, data.seed, data.epoch, data.window_count)
    out += _pack_str(json.dumps(data.extra, sort_keys=True))
    out += struct.pack("<I", len(data.tensors))
    for name, arr in data.tensors.items():
        arr = np.asarray(arr)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        out += _pack_str(name) + struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    return bytes(out) + checksum(bytes(out))


def decode_checkpoint(blob: bytes) -> CheckpointData:
    if len(blob) < 14 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    body, digest = blob[:-8], blob[-8:]
    if checksum(body) != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    buf = io.BytesIO(body)
    buf.seek(4)
    (version,) = struct.unpack("<H", _read(buf, 2))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    preset = _unpack_str(buf)
    num_classes, seed, epoch, window_count = struct.unpack("<IQII", _read(buf, 20))
    extra = json.loads(_unpack_str(buf))
    (count,) = struct.unpack("<I", _read(buf, 4))
    tensors = {}
    for _ in range(count):
        name = _unpack_str(buf)
        tag, rank = struct.unpack("<BB", _read(buf, 2))
        if tag not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank))
        dt = _DTYPES[tag]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(_read(buf, dt.itemsize * n), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if buf.read(1):
        raise FormatError("trailing bytes after tensor table")
    return CheckpointData(preset, num_classes, seed, epoch, window_count, tensors, extra)


def save_checkpoint(path, model, lstm_params=None, meta: dict | None = None, head=None) -> None:
    """Serialise the CNN, optional CNN head and LSTM.

    ``meta`` may carry ``num_classes``, ``seed``, ``epoch`` and any JSON-able extras.
    """
    meta = dict(meta or {})
    tensors = {f"cnn.{k}": v for k, v in model.named_parameters().items()}
    if head is not None:
        tensors["head.weight"] = head.weights
        tensors["head.bias"] = head.bias
    if lstm_params is not None:
        tensors.update({f"lstm.{k}": v for k, v in lstm_params.named_parameters().items()})
    if "num_classes" in meta:
        num_classes = meta.pop("num_classes")
    elif lstm_params is not None:
        num_classes = lstm_params.num_classes
    else:
        num_classes = head.out_features if head is not None else 0
    data = CheckpointData(
        preset=model.spec.name,
        num_classes=int(num_classes),
        seed=int(meta.pop("seed", 0)),
        epoch=int(meta.pop("epoch", 0)),
        window_count=int(model.input_shape[2]),
        tensors=tensors,
        extra={"dropout_rate": _dropout_rate(model), "trainable": sorted(model.trainable), **meta},
    )
    Path(path).write_bytes(encode_checkpoint(data))


def _dropout_rate(model) -> float:
    from .layers import DropoutLayer

    rates = [l.rate for l in model.layers if isinstance(l, DropoutLayer)]
    return float(rates[0]) if rates else 0.0


@dataclass
class LoadedCheckpoint:
    model: object
    head: object
    lstm: object
    meta: CheckpointData


def load_checkpoint(path) -> LoadedCheckpoint:
    """Rebuild the model, head and LSTM stored by ``save_checkpoint``."""
    from .layers import FCLayer
    from .model import Model, architecture
    from .sequence import LSTMParams

    data = decode_checkpoint(Path(path).read_bytes())
    try:
        spec = architecture(data.preset, data.window_count, data.extra.get("dropout_rate", 0.4))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cnn = {k[4:]: v for k, v in data.tensors.items() if k.startswith("cnn.")}
    dtype = next(iter(cnn.values())).dtype if cnn else np.float32
    model = Model(spec, None, "zeros", dtype)
    params = model.named_parameters()
    if set(cnn) != set(params):
        raise FormatError(f"{path}: tensor names do not match preset {data.preset!r}")
    for name, arr in params.items():
        if arr.shape != cnn[name].shape:
            raise FormatError(f"{path}: tensor {name} has shape {cnn[name].shape}, expected {arr.shape}")
        arr[...] = cnn[name]
    if "trainable" in data.extra:
        model.trainable = set(data.extra["trainable"])
    head = None
    if "head.weight" in data.tensors:
        head = FCLayer(data.tensors["head.weight"].copy(), data.tensors["head.bias"].copy(), "Head")
    lstm_arrays = {k[5:]: v.copy() for k, v in data.tensors.items() if k.startswith("lstm.")}
    lstm = LSTMParams(lstm_arrays) if lstm_arrays else None
    return LoadedCheckpoint(model, head, lstm, data)
