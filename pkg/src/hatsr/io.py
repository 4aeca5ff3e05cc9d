"""Image files (8-bit PNG, binary PPM) and the ``HATC`` checkpoint format.

Checkpoint layout, all integers u32 little-endian::

    b"HATC" | version | entry_count | entries...
    entry = name_len | name (utf-8) | rank | dims[rank] | float32 LE payload

Optimizer state rides along as extra entries named ``adam.m.<param>``,
``adam.v.<param>`` and ``adam.step``.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, UsageError
from .model import ParamTree
from .tensor import Tensor

MAGIC = b"HATC"
VERSION = 1
ADAM_PREFIX = "adam."

# --- images ------------------------------------------------------------------


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            return tok
        if c == b"#" and not tok:
            f.readline()
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def _load_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise UsageError(f"{path}: only binary PPM (P6) is supported")
        try:
            w, h, maxval = (int(_read_token(f)) for _ in range(3))
        except ValueError:
            raise UsageError(f"{path}: malformed PPM header") from None
        if maxval != 255:
            raise UsageError(f"{path}: unsupported PPM maxval {maxval} (only 8-bit, maxval 255)")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise UsageError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, np.uint8).reshape(h, w, 3)


def _load_png(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            raise UsageError(f"{path}: unsupported image mode {im.mode!r} (need 8-bit RGB or grayscale)")
        arr = np.asarray(im, dtype=np.uint8)
    return arr


def load_image(path: str) -> np.ndarray:
    """Read an image as a ``(3, H, W)`` float64 array in ``[0, 1]``.

    Grayscale images are replicated to three channels.
    """
    if not os.path.isfile(path):
        raise UsageError(f"{path}: no such file")
    with open(path, "rb") as f:
        head = f.read(2)
    arr = _load_ppm(path) if head == b"P6" else _load_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    return np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path: str) -> None:
    """Write ``(3, H, W)`` or ``(H, W)`` values in ``[0, 1]``, rounded to nearest."""
    q = to_uint8(img)
    if q.ndim == 3:
        q = q.transpose(1, 2, 0)
        if q.shape[2] == 1:
            q = q[:, :, 0]
    ext = os.path.splitext(path)[1].lower()
    if ext == ".ppm":
        if q.ndim == 2:
            q = np.repeat(q[:, :, None], 3, axis=2)
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (q.shape[1], q.shape[0]))
            f.write(np.ascontiguousarray(q).tobytes())
    elif ext == ".png":
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(q), "L" if q.ndim == 2 else "RGB").save(path, format="PNG")
    else:
        raise UsageError(f"{path}: unsupported output extension {ext!r} (use .png or .ppm)")


# --- checkpoints -------------------------------------------------------------


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        nb = name.encode("utf-8")
        a = np.asarray(arr)
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    def need(n):
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")

    pos = 0
    need(12)
    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4)
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(nlen)
        try:
            name = raw[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: entry name is not utf-8") from None
        pos += nlen
        need(4)
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64))
        need(4 * n)
        arr = np.frombuffer(raw, "<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
        if name in out:
            raise FormatError(f"{source}: duplicate entry {name!r}")
        out[name] = arr
    if pos != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(params: ParamTree, path: str, adam=None) -> None:
    """Write parameters (and optionally Adam state) atomically to ``path``."""
    entries = {k: t.data for k, t in params.items()}
    if any(k.startswith(ADAM_PREFIX) for k in entries):
        raise UsageError(f"parameter names may not start with {ADAM_PREFIX!r}")
    if adam is not None:
        for k, m in adam.m.items():
            entries[f"{ADAM_PREFIX}m.{k}"] = m
            entries[f"{ADAM_PREFIX}v.{k}"] = adam.v[k]
        entries[f"{ADAM_PREFIX}step"] = np.asarray(float(adam.step))
    raw = encode_checkpoint(entries)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # target names left at their init
    unused: list[str] = field(default_factory=list)  # checkpoint names not consumed


def split_adam(entries: dict[str, np.ndarray]):
    from .train import AdamState

    params = {k: v for k, v in entries.items() if not k.startswith(ADAM_PREFIX)}
    if f"{ADAM_PREFIX}step" not in entries:
        return params, None
    st = AdamState(step=int(entries[f"{ADAM_PREFIX}step"]))
    for k, v in entries.items():
        if k.startswith(f"{ADAM_PREFIX}m."):
            name = k[len(ADAM_PREFIX) + 2:]
            st.m[name] = v.copy()
            st.v[name] = entries[f"{ADAM_PREFIX}v.{name}"].copy()
    return params, st


def load_checkpoint(path: str, strict: bool = True, into: ParamTree | None = None) -> ParamTree:
    """Read a checkpoint.

    Without ``into`` the stored parameters come back as a new ParamTree.
    With ``into`` they are copied into its tensors; ``strict`` demands an
    exact name and shape match, otherwise the matching intersection is
    loaded.  Nothing is modified unless the whole file validates.  The
    returned tree carries ``.report`` (a :class:`LoadReport`) and ``.adam``.
    """
    if not os.path.isfile(path):
        raise UsageError(f"{path}: no such checkpoint")
    with open(path, "rb") as f:
        raw = f.read()
    entries, adam = split_adam(decode_checkpoint(raw, path))
    report = LoadReport()
    if into is None:
        tree = ParamTree((k, Tensor(v, requires_grad=True, dtype=np.float32)) for k, v in entries.items())
        report.loaded = list(entries)
    else:
        tree = into
        ok = [k for k, t in into.items() if k in entries and entries[k].shape == t.shape]
        ok_set = set(ok)
        report.loaded = ok
        report.skipped = [k for k in into if k not in ok_set]
        report.unused = [k for k in entries if k not in ok_set]
        if strict and (report.skipped or report.unused):
            bad = []
            for k in report.skipped:
                bad.append(f"{k} {into[k].shape} vs {entries[k].shape}" if k in entries else f"{k} missing")
            bad += [f"{k} unexpected" for k in report.unused if k not in into]
            raise FormatError(f"{path}: strict load failed for {len(bad)} tensors: " + "; ".join(bad[:10]))
        for k in ok:
            t = into[k]
            t.data = entries[k].astype(t.dtype, copy=True)
    tree.report = report
    tree.adam = adam
    return tree
