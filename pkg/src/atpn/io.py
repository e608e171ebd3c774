"""File formats: PPM frames, CSV dataset manifests and binary checkpoints."""

from __future__ import annotations

import csv
import io as _io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import architecture_text, parse_config
from .tracking import Box

MAGIC = b"ATPN1\n"


class ParseError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    pass


# -- images -----------------------------------------------------------------
def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 [H, W, 3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"truncated PPM header at offset {pos}")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(b"P6"):
        raise ParseError(f"{path}: not a binary PPM (offset 0)")
    (w, h, maxval), pos = _ppm_tokens(buf, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PPM is supported")
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"{path}: pixel data truncated at offset {len(buf)}, expected {pos + need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


# -- manifests --------------------------------------------------------------
@dataclass
class ManifestRecord:
    image: str
    task: str
    roi: Box
    landmarks: np.ndarray | None = None
    pose: np.ndarray | None = None
    label: int | float = 1
    tags: tuple[str, ...] = ()
    sequence: str = ""
    frame: int = 0


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    landmarks: int
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, rec: ManifestRecord) -> Path:
        return self.root / rec.image

    def filter(self, task: str | None = None, tag: str | None = None, label: int | None = None) -> "DatasetManifest":
        keep = [
            r for r in self.records
            if (task is None or r.task == task) and (tag is None or tag in r.tags)
            and (label is None or r.label == label)
        ]
        return DatasetManifest(keep, self.landmarks, self.root)


_FIXED = ["image", "task", "roi_x0", "roi_y0", "roi_x1", "roi_y1", "label", "yaw", "pitch", "roll",
          "sequence", "frame", "tags"]


def _f(x) -> str:
    return repr(float(x))


def _label(text: str) -> int | float:
    # 0/1 class labels, or a confidence score in a predictions file
    try:
        return int(text)
    except ValueError:
        return float(text)


def manifest_text(manifest: DatasetManifest) -> str:
    out = _io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    n = manifest.landmarks
    wr.writerow(_FIXED + [f"{c}{i}" for i in range(n) for c in "xy"])
    for r in manifest.records:
        label = str(r.label) if isinstance(r.label, (int, np.integer)) else _f(r.label)
        row = [r.image, r.task, *map(_f, r.roi.as_tuple()), label]
        row += list(map(_f, r.pose)) if r.pose is not None else ["", "", ""]
        row += [r.sequence, str(int(r.frame)), ";".join(r.tags)]
        if r.landmarks is not None:
            pts = np.asarray(r.landmarks, dtype=np.float64).reshape(-1)
            if pts.size != 2 * n:
                raise ValueError(f"{r.image}: {pts.size // 2} landmarks in a {n}-landmark manifest")
            row += list(map(_f, pts))
        else:
            row += [""] * (2 * n)
        wr.writerow(row)
    return out.getvalue()


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_text(manifest))


def parse_manifest(text: str, root=".") -> DatasetManifest:
    rows = list(csv.reader(_io.StringIO(text)))
    if not rows:
        raise ParseError("line 1: empty manifest")
    header = rows[0]
    if header[: len(_FIXED)] != _FIXED:
        raise ParseError("line 1: unexpected manifest header")
    extra = len(header) - len(_FIXED)
    if extra % 2:
        raise ParseError("line 1: landmark columns must come in x/y pairs")
    n = extra // 2
    records = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            roi = Box(*(float(v) for v in row[2:6]))
            label = _label(row[6])
            pose = None if row[7] == "" else np.array([float(v) for v in row[7:10]])
            frame = int(row[11])
            pts = row[13:]
            if all(v == "" for v in pts):
                landmarks = None
            else:
                landmarks = np.array([float(v) for v in pts]).reshape(n, 2)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        tags = tuple(t for t in row[12].split(";") if t)
        records.append(ManifestRecord(row[0], row[1], roi, landmarks, pose, label, tags, row[10], frame))
    return DatasetManifest(records, n, Path(root))


def load_manifest(path, check_images: bool = False) -> DatasetManifest:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        m = parse_manifest(fh.read(), path.parent)
    if check_images:
        for r in m.records:
            if not m.image_path(r).exists():
                raise ParseError(f"{path}: missing image {r.image}")
    return m


# -- checkpoints ------------------------------------------------------------
def _pack_blob(name: str, arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"checkpoint truncated at offset {len(self.buf)} while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self) -> tuple[str, np.ndarray]:
        (ln,) = self.unpack("<H", "name length")
        name = self.take(ln, "name").decode("utf-8")
        (ndim,) = self.unpack("<B", f"{name} rank")
        shape = self.unpack(f"<{ndim}I", f"{name} shape")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(4 * count, name), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def checkpoint_bytes(model, stage: int, optimizer_state: dict | None = None) -> bytes:
    cfg_text = architecture_text(model.cfg).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(cfg_text)), cfg_text, struct.pack("<I", stage)]
    state = model.state_dict()
    parts.append(struct.pack("<I", len(state)))
    parts += [_pack_blob(k, v) for k, v in state.items()]
    if optimizer_state is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<BQ", 1, optimizer_state["step"]))
        moments = optimizer_state["moments"]
        parts.append(struct.pack("<I", len(moments)))
        parts += [_pack_blob(k, v) for k, v in moments.items()]
    return b"".join(parts)


def save_checkpoint(path, model, stage: int, optimizer_state: dict | None = None) -> None:
    data = checkpoint_bytes(model, stage, optimizer_state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    config_text: str
    stage: int
    state: dict[str, np.ndarray]
    optimizer_state: dict | None


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if not buf.startswith(MAGIC):
        raise ParseError("not a checkpoint: bad magic at offset 0")
    r = _Reader(buf)
    r.pos = len(MAGIC)
    (ln,) = r.unpack("<I", "config length")
    cfg_text = r.take(ln, "config").decode("utf-8")
    (stage,) = r.unpack("<I", "stage")
    (count,) = r.unpack("<I", "entry count")
    state = dict(r.blob() for _ in range(count))
    (has_opt,) = r.unpack("<B", "optimizer flag")
    opt = None
    if has_opt:
        (step,) = r.unpack("<Q", "optimizer step")
        (mc,) = r.unpack("<I", "moment count")
        opt = {"step": step, "moments": dict(r.blob() for _ in range(mc))}
    if r.pos != len(buf):
        raise ParseError(f"trailing bytes after offset {r.pos}")
    return Checkpoint(cfg_text, stage, state, opt)


def load_checkpoint(path, model=None):
    """Return (model, stage, optimizer_state).

    With ``model`` given, its architecture must match the embedded config
    text exactly; otherwise a model is built from that text.
    """
    from .model import AtpnNet

    with open(path, "rb") as fh:
        ck = parse_checkpoint(fh.read())
    if model is None:
        model = AtpnNet(parse_config(ck.config_text))
    elif architecture_text(model.cfg) != ck.config_text:
        raise IncompatibleCheckpointError(f"{path}: checkpoint architecture differs from the model config")
    try:
        model.load_state_dict(ck.state)
    except (KeyError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from None
    model.trained_stage = ck.stage
    return model, ck.stage, ck.optimizer_state
