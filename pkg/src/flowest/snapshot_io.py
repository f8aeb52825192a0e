"""Reading and writing snapshot files.

Two encodings share one logical layout::

    header      n_axes, dims..., n_components, n_snapshots, has_reference
    coords      one array per axis
    times       n_snapshots values
    reference   n_components arrays (only when has_reference = 1)
    fields      n_snapshots x n_components arrays

Every field component is stored with axis 0 varying fastest.  The text
variant puts the header on a ``snapshots`` line and one array per line,
whitespace delimited, with ``#`` comments allowed.  The binary variant
is an 8-byte magic, a length-prefixed UTF-8 comment block, then
little-endian int64 header values and float64 data.
"""
from __future__ import annotations

import os
import struct
from enum import Enum
from typing import Sequence

import numpy as np

from .fields import Grid, SnapshotSet, VectorField

MAGIC = b"FLWSNAP1"


class SnapshotFormat(str, Enum):
    TEXT = "text-table"
    BINARY = "raw-binary"


class SnapshotFileError(ValueError):
    """Malformed snapshot file; the message carries a line or byte position."""


def _resolve_format(path, fmt) -> SnapshotFormat:
    if fmt is None:
        return SnapshotFormat.BINARY if os.fspath(path).endswith(".bin") else SnapshotFormat.TEXT
    if isinstance(fmt, SnapshotFormat):
        return fmt
    aliases = {"text": SnapshotFormat.TEXT, "binary": SnapshotFormat.BINARY}
    return aliases.get(fmt) or SnapshotFormat(fmt)


def _flat(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).ravel(order="F")


def _unflat(v: np.ndarray, dims) -> np.ndarray:
    return np.asarray(v).reshape(dims, order="F")


def save_snapshots(snaps: SnapshotSet, path, fmt=None, comments: Sequence[str] = ()) -> None:
    fmt = _resolve_format(path, fmt)
    g = snaps.grid
    header = [g.ndim, *g.dims, g.ndim, len(snaps), 1]
    arrays = [*g.coords, snaps.times]
    arrays += [_flat(c) for c in snaps.reference.data]
    for f in snaps.fields:
        arrays += [_flat(c) for c in f.data]
    try:
        if fmt is SnapshotFormat.TEXT:
            with open(path, "w") as fh:
                for c in comments:
                    fh.write(f"# {c}\n")
                fh.write("snapshots " + " ".join(str(h) for h in header) + "\n")
                for a in arrays:
                    fh.write(" ".join(repr(float(x)) for x in a) + "\n")
        else:
            blob = "\n".join(comments).encode()
            with open(path, "wb") as fh:
                fh.write(MAGIC)
                fh.write(struct.pack("<q", len(blob)))
                fh.write(blob)
                fh.write(np.asarray(header, dtype="<i8").tobytes())
                for a in arrays:
                    fh.write(np.asarray(a, dtype="<f8").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write snapshots to {os.fspath(path)}: {exc.strerror}") from exc


def _build(header, read_array, where) -> SnapshotSet:
    n_axes = header[0]
    if n_axes not in (2, 3):
        raise SnapshotFileError(f"{where(0)}: n_axes must be 2 or 3, got {n_axes}")
    dims = tuple(header[1:1 + n_axes])
    n_comp, n_snap, has_ref = header[1 + n_axes:4 + n_axes]
    if any(d < 2 for d in dims) or n_comp != n_axes or n_snap < 2 or has_ref not in (0, 1):
        raise SnapshotFileError(f"{where(0)}: inconsistent header {header}")
    npts = int(np.prod(dims))
    coords = [read_array(n) for n in dims]
    times = read_array(n_snap)
    for ax, c in enumerate(coords):
        if not np.all(np.diff(c) > 0):
            raise SnapshotFileError(f"{where(1 + ax)}: axis {ax} coordinates not increasing")
    if not np.all(np.diff(times) > 0):
        raise SnapshotFileError(f"{where(1 + n_axes)}: times are not strictly increasing")
    grid = Grid(tuple(coords))

    def read_field():
        return VectorField(grid, np.stack([_unflat(read_array(npts), dims) for _ in range(n_comp)]))

    ref = read_field() if has_ref else None
    fields = tuple(read_field() for _ in range(n_snap))
    return SnapshotSet(grid, times, fields, ref)


def _load_text(path) -> SnapshotSet:
    records = []  # (line number, tokens)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].split()
            if body:
                records.append((lineno, body))
    if not records or records[0][1][0] != "snapshots":
        raise SnapshotFileError(f"{os.fspath(path)}: missing 'snapshots' header line")
    try:
        header = [int(x) for x in records[0][1][1:]]
    except ValueError:
        raise SnapshotFileError(f"{os.fspath(path)}:{records[0][0]}: non-integer header value") from None
    if len(header) < 1 or len(header) != header[0] + 4:
        raise SnapshotFileError(f"{os.fspath(path)}:{records[0][0]}: header has "
                                f"{len(header)} values, expected n_axes + 4")
    cursor = [1]

    def where(offset):
        i = min(offset, len(records) - 1)
        return f"{os.fspath(path)}:{records[i][0]}"

    def read_array(n):
        i = cursor[0]
        if i >= len(records):
            raise SnapshotFileError(f"{os.fspath(path)}: unexpected end of file after line "
                                    f"{records[-1][0]} (record {i} missing)")
        lineno, toks = records[i]
        if len(toks) != n:
            raise SnapshotFileError(f"{os.fspath(path)}:{lineno}: expected {n} values, got {len(toks)}")
        try:
            arr = np.array([float(t) for t in toks])
        except ValueError as exc:
            raise SnapshotFileError(f"{os.fspath(path)}:{lineno}: {exc}") from None
        cursor[0] += 1
        return arr

    snaps = _build(header, read_array, where)
    if cursor[0] != len(records):
        raise SnapshotFileError(f"{os.fspath(path)}:{records[cursor[0]][0]}: trailing data")
    return snaps


def _load_binary(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    name = os.fspath(path)
    if raw[:8] != MAGIC:
        raise SnapshotFileError(f"{name}: byte 0: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise SnapshotFileError(f"{name}: byte 8: truncated comment length")
    (n_comment,) = struct.unpack("<q", raw[8:16])
    pos = 16 + n_comment
    if n_comment < 0 or pos > len(raw):
        raise SnapshotFileError(f"{name}: byte 8: invalid comment length {n_comment}")
    if pos + 8 > len(raw):
        raise SnapshotFileError(f"{name}: byte {pos}: truncated header")
    n_axes = int(np.frombuffer(raw, "<i8", 1, pos)[0])
    if n_axes not in (2, 3):
        raise SnapshotFileError(f"{name}: byte {pos}: n_axes must be 2 or 3, got {n_axes}")
    n_header = n_axes + 4
    if pos + 8 * n_header > len(raw):
        raise SnapshotFileError(f"{name}: byte {pos}: truncated header")
    header = [int(x) for x in np.frombuffer(raw, "<i8", n_header, pos)]
    cursor = [pos + 8 * n_header]
    header_pos = pos

    def where(_offset):
        return f"{name}: byte {header_pos if _offset == 0 else cursor[0]}"

    def read_array(n):
        start = cursor[0]
        if start + 8 * n > len(raw):
            raise SnapshotFileError(f"{name}: byte {start}: need {8 * n} bytes, "
                                    f"only {len(raw) - start} remain")
        cursor[0] += 8 * n
        return np.frombuffer(raw, "<f8", n, start).astype(float)

    snaps = _build(header, read_array, where)
    if cursor[0] != len(raw):
        raise SnapshotFileError(f"{name}: byte {cursor[0]}: {len(raw) - cursor[0]} trailing bytes")
    return snaps


def load_snapshots(path, fmt=None) -> SnapshotSet:
    """Load and validate a snapshot file.

    The reference field is the stored one when present, else the time mean.
    """
    fmt = _resolve_format(path, fmt)
    if not os.path.exists(path):
        raise FileNotFoundError(f"snapshot file not found: {os.fspath(path)}")
    if fmt is SnapshotFormat.TEXT:
        return _load_text(path)
    return _load_binary(path)


def read_comments(path) -> list[str]:
    """Comment lines (text) or the comment block (binary) of a snapshot file."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if head[:8] == MAGIC:
            (n,) = struct.unpack("<q", head[8:16])
            return fh.read(n).decode().splitlines()
    out = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                out.append(line[1:].strip())
            elif line.strip():
                break
    return out
