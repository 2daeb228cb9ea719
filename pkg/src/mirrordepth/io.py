"""File formats: PFM depth, PPM colour, text manifests and MDC1 checkpoints."""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import BBox, DepthMap, Frame, Intrinsics, Pose


class ParseError(ValueError):
    """Malformed input file; the message names the byte offset."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------- PFM


def write_pfm(depth, path) -> None:
    """Greyscale PFM, little-endian (scale -1.0), rows stored bottom to top."""
    arr = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects (H, W), got {arr.shape}")
    h, w = arr.shape
    body = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(body)


def _read_token_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise ParseError(f"unterminated header line at byte {pos}")
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError as exc:
        raise ParseError(f"non-ASCII header at byte {pos}") from exc


def parse_pfm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token_line(buf, 0)
    if magic != "Pf":
        raise ParseError(f"bad PFM magic {magic!r} at byte 0 (only greyscale 'Pf' is supported)")
    dims_at = pos
    dims, pos = _read_token_line(buf, pos)
    try:
        w, h = (int(v) for v in dims.split())
    except ValueError as exc:
        raise ParseError(f"bad PFM dimensions {dims!r} at byte {dims_at}") from exc
    if w <= 0 or h <= 0:
        raise ParseError(f"non-positive PFM dimensions at byte {dims_at}")
    scale_at = pos
    scale_s, pos = _read_token_line(buf, pos)
    try:
        scale = float(scale_s)
    except ValueError as exc:
        raise ParseError(f"bad PFM scale {scale_s!r} at byte {scale_at}") from exc
    if scale == 0:
        raise ParseError(f"zero PFM scale at byte {scale_at}")
    need = w * h * 4
    if len(buf) - pos < need:
        raise ParseError(f"truncated PFM raster: expected {need} bytes at byte {pos}, found {len(buf) - pos}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def read_pfm(path) -> DepthMap:
    """Read a greyscale PFM; non-positive or non-finite pixels are invalid."""
    return DepthMap(parse_pfm(Path(path).read_bytes()))


# ---------------------------------------------------------------- PPM


def write_ppm(rgb: np.ndarray, path) -> None:
    """Binary P6, maxval 255, from a ``(3, H, W)`` array in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"PPM writer expects (3, H, W), got {rgb.shape}")
    _, h, w = rgb.shape
    q = np.clip(np.round(rgb.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes())


def parse_ppm(buf: bytes) -> np.ndarray:
    tokens: list[str] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PPM header at byte {start}")
        tokens.append(buf[start:pos].decode("ascii", "replace"))
    if tokens[0] != "P6":
        raise ParseError(f"bad PPM magic {tokens[0]!r} at byte 0")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ParseError(f"bad PPM header values {tokens[1:]} before byte {pos}") from exc
    if maxval != 255 or w <= 0 or h <= 0:
        raise ParseError(f"unsupported PPM header (w={w}, h={h}, maxval={maxval}) before byte {pos}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated PPM raster: expected {need} bytes at byte {pos}, found {len(buf) - pos}")
    q = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return np.ascontiguousarray(q.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0)


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------- manifest


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(frames: list[Frame], directory) -> Path:
    """Write frames as PPM + PFM files plus a ``manifest.txt`` in render order.

    Manifest lines are ``key<TAB>value`` (UTF-8, LF). Each frame starts with a
    ``frame`` record followed by its ``rgb``, ``depth``, ``pose`` (12 floats,
    row-major ``[R|t]``, camera-to-world), ``intrinsics`` and ``box`` records.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["format\tmdseq1", f"frames\t{len(frames)}"]
    for f in frames:
        rgb_name, depth_name = f"frame_{f.frame_id:05d}.ppm", f"frame_{f.frame_id:05d}.pfm"
        write_ppm(f.rgb, d / rgb_name)
        write_pfm(np.where(f.depth.valid, f.depth.depth, 0.0).astype(np.float32), d / depth_name)
        k = f.intrinsics
        lines += [
            f"frame\t{f.frame_id}",
            f"rgb\t{rgb_name}",
            f"depth\t{depth_name}",
            "pose\t" + " ".join(_fmt(v) for v in f.pose.as_row()),
            "intrinsics\t" + " ".join(_fmt(v) for v in (k.fx, k.fy, k.cx, k.cy)),
        ]
        for b in f.boxes:
            lines.append(f"box\t{b.class_label} {b.x0} {b.y0} {b.x1} {b.y1} {_fmt(b.object_height)}")
        if f.skipped_objects:
            lines.append("skipped\t" + " ".join(str(i) for i in f.skipped_objects))
    (d / "manifest.txt").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return d


def read_dataset(directory) -> list[Frame]:
    d = Path(directory)
    raw = (d / "manifest.txt").read_bytes()
    frames: list[Frame] = []
    cur: dict | None = None
    offset = 0

    def finish():
        if cur is not None:
            try:
                frames.append(Frame(cur["id"], read_ppm(d / cur["rgb"]), read_pfm(d / cur["depth"]), cur["pose"],
                                    cur["intrinsics"], cur["boxes"], cur.get("skipped", ())))
            except KeyError as exc:
                raise ParseError(f"frame {cur['id']} is missing its {exc.args[0]!r} record (manifest byte {cur['at']})") from exc

    for line in raw.split(b"\n"):
        at = offset
        offset += len(line) + 1
        if not line:
            continue
        try:
            key, value = line.decode("utf-8").split("\t", 1)
        except (UnicodeDecodeError, ValueError) as exc:
            raise ParseError(f"malformed manifest line at byte {at}") from exc
        try:
            if key == "format":
                if value != "mdseq1":
                    raise ParseError(f"unknown manifest format {value!r} at byte {at}")
            elif key == "frames":
                int(value)
            elif key == "frame":
                finish()
                cur = {"id": int(value), "boxes": [], "at": at}
            elif cur is None:
                raise ParseError(f"record {key!r} before any frame at byte {at}")
            elif key in ("rgb", "depth"):
                cur[key] = value
            elif key == "pose":
                cur["pose"] = Pose.from_row([float(v) for v in value.split()])
            elif key == "intrinsics":
                fx, fy, cx, cy = (float(v) for v in value.split())
                cur["intrinsics"] = Intrinsics(fx, fy, cx, cy)
            elif key == "box":
                label, x0, y0, x1, y1, hgt = value.split()
                cur["boxes"].append(BBox(cur["id"], label, int(x0), int(y0), int(x1), int(y1), float(hgt)))
            elif key == "skipped":
                cur["skipped"] = tuple(int(v) for v in value.split())
            else:
                raise ParseError(f"unknown manifest key {key!r} at byte {at}")
        except ParseError:
            raise
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r} at byte {at}: {exc}") from exc
    finish()
    return frames


# ---------------------------------------------------------------- MDC1 checkpoints

MAGIC = b"MDC1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u8"), 2: np.dtype("u1")}
DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<u8"): 1, np.dtype("u1"): 2}


def pack_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    """Serialise named arrays.

    Layout: ``MDC1``, version u32, entry count u32, then per entry: name
    length u16, UTF-8 name, dtype tag u8 (0 f32, 1 u64, 2 u8), rank u8, dims
    u32 each, payload offset u64, byte length u64. The payload follows
    (little-endian, entries back to back in table order), then its CRC32.
    """
    table = bytearray()
    payload = bytearray()
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        tag = DTYPE_TAGS.get(np.dtype(dt))
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
        nb = name.encode("utf-8")
        table += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), len(data))
        payload += data
    head = MAGIC + struct.pack("<II", VERSION, len(entries))
    return bytes(head + table + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def unpack_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an MDC1 checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointError("truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    table = []
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            off, nbytes = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            table.append((name, tag, dims, off, nbytes))
    except struct.error as exc:
        raise CheckpointError(f"truncated entry table near byte {pos}") from exc
    payload = buf[pos:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint payload is corrupt")
    out: dict[str, np.ndarray] = {}
    spans = []
    for name, tag, dims, off, nbytes in table:
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}")
        dt = DTYPES[tag]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dt.itemsize or off + nbytes > len(payload):
            raise CheckpointError(f"entry {name!r} is out of bounds or has the wrong size")
        spans.append((off, off + nbytes, name))
        out[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError(f"entries {an!r} and {bn!r} overlap")
    return out


def write_checkpoint_file(entries: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(pack_checkpoint(entries))
    os.replace(tmp, path)


def read_checkpoint_file(path) -> dict[str, np.ndarray]:
    return unpack_checkpoint(Path(path).read_bytes())
