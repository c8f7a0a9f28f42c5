"""Binary demonstration container and its validator.

All integers and floats are little-endian. See ``docs/formats.md`` for the
byte layout.
"""

from __future__ import annotations

import struct

import numpy as np

from .envs import Demonstration, SceneObject, SceneSpec
from .exceptions import KeyposeDiffusionError, FormatError, ValidationError, VersionMismatchError
from .geometry import CameraModel
from .keypose import RawTrajectory

DATASET_MAGIC = b"KPDS"
DATASET_VERSION = 1


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, arr, dtype="<f8"):
        self.parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def unpack(self, fmt, what: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise FormatError(f"file truncated while reading {what}")
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals if len(vals) > 1 else vals[0]

    def array(self, shape, what: str, dtype="<f8"):
        n = int(np.prod(shape, dtype=np.int64))
        nbytes = n * np.dtype(dtype).itemsize
        if self.off + nbytes > len(self.buf):
            raise FormatError(f"file truncated while reading {what}")
        arr = np.frombuffer(self.buf, dtype=dtype, count=n, offset=self.off).reshape(shape).astype(np.float64)
        self.off += nbytes
        return arr


def encode_dataset(demos) -> bytes:
    w = _Writer()
    w.parts.append(DATASET_MAGIC)
    w.pack("HI", DATASET_VERSION, len(demos))
    for d in demos:
        sc, cam = d.scene, d.scene.camera
        w.pack("I", d.task_id)
        w.array([cam.fx, cam.fy, cam.cx, cam.cy])
        w.array(cam.extrinsic)
        w.array(sc.bounds)
        w.pack("II", sc.image_size, len(sc.objects))
        for o in sc.objects:
            w.array(o.center)
            w.array(o.size)
            w.pack("B", o.kind)
        w.pack("I", len(d.keypose_indices))
        w.array(d.keypose_indices, "<u4")
        w.pack("I", len(d.raw))
        for i in range(len(d.raw)):
            w.pack("d", d.raw.timestamps[i])
            frame = d.frames.get(i)
            if frame is None:
                w.pack("HHH", 0, 0, 0)
            else:
                depth, attrs = frame
                w.pack("HHH", *depth.shape, attrs.shape[-1])
                w.array(depth)
                w.array(attrs)
            w.array(d.raw.pos[i])
            w.array(d.raw.rot[i])
            w.pack("B", int(d.raw.open[i]))
    return w.getvalue()


def decode_dataset(buf: bytes) -> list[Demonstration]:
    """Parse a dataset; structural problems raise :class:`FormatError`."""
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("not a demonstration file (bad magic)")
    r = _Reader(buf)
    r.off = 4
    version, count = r.unpack("HI", "header")
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {DATASET_VERSION}")
    demos = []
    for n in range(count):
        tag = f"demo {n}"
        task_id = r.unpack("I", f"{tag} task id")
        intr = r.array((4,), f"{tag} intrinsics")
        ext = r.array((4, 4), f"{tag} extrinsic")
        bounds = r.array((2, 3), f"{tag} bounds")
        image_size, n_obj = r.unpack("II", f"{tag} scene header")
        objs = []
        for _ in range(n_obj):
            center = r.array((3,), f"{tag} object")
            size = r.array((3,), f"{tag} object")
            kind = r.unpack("B", f"{tag} object")
            objs.append((center, size, kind))
        n_key = r.unpack("I", f"{tag} keypose count")
        keyposes = r.array((n_key,), f"{tag} keyposes", "<u4").astype(np.int64).tolist()
        n_steps = r.unpack("I", f"{tag} step count")
        ts, pos, rot, opn, frames = [], [], [], [], {}
        for i in range(n_steps):
            ts.append(r.unpack("d", f"{tag} step {i}"))
            h, wd, c = r.unpack("HHH", f"{tag} step {i} image dims")
            if h and wd:
                frames[i] = (r.array((h, wd), f"{tag} step {i} depth"),
                             r.array((h, wd, c), f"{tag} step {i} attributes"))
            pos.append(r.array((3,), f"{tag} step {i} action"))
            rot.append(r.array((6,), f"{tag} step {i} action"))
            opn.append(r.unpack("B", f"{tag} step {i} action"))
        try:
            cam = CameraModel(*intr, extrinsic=ext)
            scene = SceneSpec([SceneObject(*o) for o in objs], bounds, cam, int(image_size))
            raw = RawTrajectory(np.array(ts), np.array(pos).reshape(-1, 3), np.array(rot).reshape(-1, 6),
                                np.array(opn, dtype=bool))
            demos.append(Demonstration(int(task_id), scene, raw, keyposes, frames))
        except KeyposeDiffusionError as exc:
            raise ValidationError(f"{tag}: {exc}") from None
    if r.off != len(buf):
        raise FormatError("trailing bytes after the last demonstration")
    return demos


def save_dataset(path, demos) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_dataset(demos))


def load_dataset(path) -> list[Demonstration]:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def validate_dataset(path) -> list[str]:
    """Check every invariant; returns the list of failures (empty when valid).

    A version mismatch is raised rather than reported.
    """
    try:
        demos = load_dataset(path)
    except VersionMismatchError:
        raise
    except (FormatError, ValidationError) as exc:
        return [str(exc)]
    problems = []
    for n, d in enumerate(demos):
        if np.any((d.raw.open != 0) & (d.raw.open != 1)):
            problems.append(f"demo {n}: gripper flag is not binary")
        if not np.all(np.isfinite(d.raw.pos)) or not np.all(np.isfinite(d.raw.rot)):
            problems.append(f"demo {n}: non-finite action values")
        for i, (depth, _) in d.frames.items():
            if np.any(depth < 0) or not np.all(np.isfinite(depth)):
                problems.append(f"demo {n}: step {i} has negative or non-finite depth")
        if 0 not in d.frames:
            problems.append(f"demo {n}: no image at step 0")
    return problems
