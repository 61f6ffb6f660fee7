"""Binary model and detector-bundle files.

Model record (little-endian)::

    b"M2D1" | u16 version | u32 n | n bytes UTF-8 descriptor
    | u32 n_params | per param: u8 ndim, ndim * u32 dims, f64 data
    | u32 CRC-32 of every preceding byte of the record

The descriptor starts with ``kind <kind>`` and ``encoder_depth <k>`` lines
followed by the layer/tap lines of :meth:`ModelSpec.describe`.

A bundle file is a classifier record, an encoder record, a u32 head count,
that many ``GHEAD`` sections and one ``BMETA`` section (JSON settings). Each
section carries its own trailing CRC-32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from m2d.autodiff import Parameter
from m2d.nets import ModelSpec, Network

MAGIC = b"M2D1"
VERSION = 1
HEAD_TAG = b"GHEAD"
META_TAG = b"BMETA"


class FormatError(ValueError):
    """Malformed, truncated or corrupted file."""


class VersionError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: needed {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def f64s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def check_crc(self, start: int) -> None:
        expected = zlib.crc32(self.buf[start : self.pos])
        stored = self.u32()
        if stored != expected:
            raise FormatError(f"checksum mismatch (stored {stored:#010x}, computed {expected:#010x})")


def _f64_block(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def encode_model(net: Network) -> bytes:
    desc = f"kind {net.kind}\nencoder_depth {net.encoder_depth}\n{net.spec.describe()}".encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(desc)), desc]
    params = net.parameters()
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack("<B", p.data.ndim))
        parts.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(_f64_block(p.data))
    return _with_crc(b"".join(parts))


def _decode_model(r: _Reader) -> Network:
    start = r.pos
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not an m2d model file")
    version = r.u16()
    if version != VERSION:
        raise VersionError(f"unsupported format version {version} (supported: {VERSION})")
    desc = r.take(r.u32())
    arrays = []
    for _ in range(r.u32()):
        ndim = r.u8()
        shape = r.unpack(f"{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arrays.append(r.f64s(count).reshape(shape))
    r.check_crc(start)
    # nothing is constructed until the checksum has been verified
    try:
        lines = desc.decode("utf-8").splitlines()
        kind = lines[0].split()[1]
        depth = int(lines[1].split()[1])
        spec = ModelSpec.parse(lines[2:])
    except (UnicodeDecodeError, IndexError, KeyError, ValueError) as exc:
        raise FormatError(f"invalid model descriptor: {exc}") from exc
    groups, it = [], iter(arrays)
    try:
        for i, layer in enumerate(spec.layers):
            names = ("weight", "bias")[: len(layer.param_shapes())]
            groups.append([Parameter(next(it).copy(), f"layers.{i}.{name}") for name in names])
    except StopIteration:
        raise FormatError("fewer parameter arrays than the descriptor requires") from None
    if next(it, None) is not None:
        raise FormatError("more parameter arrays than the descriptor requires")
    try:
        return Network(spec, groups, kind, depth)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def decode_model(buf: bytes) -> Network:
    r = _Reader(buf)
    net = _decode_model(r)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after model record")
    return net


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(net: Network, path) -> None:
    atomic_write(path, encode_model(net))


def load(path) -> Network:
    return decode_model(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Gaussian heads and bundles


def encode_head(name: str, head) -> bytes:
    k, d = head.means.shape
    raw = name.encode("utf-8")
    body = b"".join(
        [
            HEAD_TAG,
            struct.pack("<I", len(raw)),
            raw,
            struct.pack("<II", k, d),
            struct.pack(f"<{k}q", *[int(c) for c in head.classes]),
            struct.pack(f"<{k}Q", *[int(c) for c in head.counts]),
            _f64_block(head.means),
            _f64_block(head.covariance),
            struct.pack("<d", head.ridge),
        ]
    )
    return _with_crc(body)


def _decode_head(r: _Reader):
    from m2d.detector import GaussianHead

    start = r.pos
    if r.take(len(HEAD_TAG)) != HEAD_TAG:
        raise FormatError("expected GHEAD section")
    name = r.take(r.u32())
    k, d = r.unpack("II")
    classes = np.array(r.unpack(f"{k}q"), dtype=np.int64)
    counts = np.array(r.unpack(f"{k}Q"), dtype=np.int64)
    means = r.f64s(k * d).reshape(k, d)
    cov = r.f64s(d * d).reshape(d, d)
    (ridge,) = r.unpack("d")
    r.check_crc(start)
    return name.decode("utf-8"), GaussianHead.from_parts(classes, counts, means, cov, ridge)


def encode_bundle(bundle) -> bytes:
    meta = json.dumps(
        {
            "ensemble_weights": bundle.ensemble_weights,
            "epsilon": bundle.epsilon,
            "threshold": bundle.threshold,
            "info": bundle.info,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [encode_model(bundle.frozen_classifier), encode_model(bundle.encoder), struct.pack("<I", len(bundle.heads))]
    parts += [encode_head(name, bundle.heads[name]) for name in sorted(bundle.heads)]
    parts.append(_with_crc(META_TAG + struct.pack("<I", len(meta)) + meta))
    return b"".join(parts)


def decode_bundle(buf: bytes):
    from m2d.detector import DetectorBundle

    r = _Reader(buf)
    classifier = _decode_model(r)
    encoder = _decode_model(r)
    heads = dict(_decode_head(r) for _ in range(r.u32()))
    start = r.pos
    if r.take(len(META_TAG)) != META_TAG:
        raise FormatError("expected BMETA section")
    meta_raw = r.take(r.u32())
    r.check_crc(start)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after bundle")
    meta = json.loads(meta_raw.decode("utf-8"))
    return DetectorBundle(
        frozen_classifier=classifier,
        encoder=encoder,
        heads=heads,
        ensemble_weights=meta["ensemble_weights"],
        epsilon=meta["epsilon"],
        threshold=meta["threshold"],
        info=meta.get("info", {}),
    )


def save_bundle(bundle, path) -> None:
    atomic_write(path, encode_bundle(bundle))


def load_bundle(path):
    return decode_bundle(Path(path).read_bytes())
