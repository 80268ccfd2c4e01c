"""Binary and text file formats.

QFS is the native frame-stack container: a fixed 20-byte little-endian
header (magic ``QFS1``, u32 width, height, n_frames, flags with bit 0
marking a left/right split at width/2) followed by the raw uint16 payload.
A fixed binary header keeps round-trips bit exact.

QCI is the raw float sidecar written next to every reconstructed image: a
16-byte header (magic ``QCI1``, u32 width, u32 height, 4 reserved bytes)
followed by the row-major little-endian float64 values.

A minimal FITS shim covers 16-bit integer primary HDUs only (the unsigned
convention BZERO=32768 is honoured), enough to exchange stacks with
standard astronomy tooling. PGM (P5, 8 or 16 bit) covers scene import and
image export.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import FormatError, ValidationError

QFS_MAGIC = b"QFS1"
QCI_MAGIC = b"QCI1"
QFS_HEADER = struct.Struct("<4sIIII")
QCI_HEADER = struct.Struct("<4sIII")
QFS_FLAG_SPLIT = 1

METRICS_CSV_HEADER = ["metric", "value", "sem", "n", "params"]
LEDGER_CSV_HEADER = [
    "pair_id", "frame", "rho_x_um", "rho_y_um",
    "ps_x", "ps_y", "pi_x", "pi_y", "transmitted", "registered",
]


def write_qfs(path, frames: np.ndarray, flags: int = QFS_FLAG_SPLIT) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.dtype != np.uint16:
        raise ValidationError("QFS payload must be a (n, height, width) uint16 array")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(QFS_HEADER.pack(QFS_MAGIC, w, h, n, flags))
        fh.write(np.ascontiguousarray(frames, dtype="<u2").tobytes())


class QfsWriter:
    """Incremental QFS writer for stacks too large to hold in memory."""

    def __init__(self, path, width: int, height: int, n_frames: int, flags: int = QFS_FLAG_SPLIT):
        self._fh = open(path, "wb")
        self._fh.write(QFS_HEADER.pack(QFS_MAGIC, width, height, n_frames, flags))
        self._expect = (height, width)
        self._remaining = n_frames

    def append(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames)
        if frames.ndim == 2:
            frames = frames[np.newaxis]
        if frames.shape[1:] != self._expect or frames.dtype != np.uint16:
            raise ValidationError("frame batch does not match the declared QFS geometry")
        if frames.shape[0] > self._remaining:
            raise ValidationError("more frames appended than declared in the QFS header")
        self._remaining -= frames.shape[0]
        self._fh.write(np.ascontiguousarray(frames, dtype="<u2").tobytes())

    def close(self) -> None:
        try:
            if self._remaining:
                raise ValidationError(f"QFS writer closed with {self._remaining} frames missing")
        finally:
            self._fh.close()

    def abort(self) -> None:
        """Close the handle without the completeness check (error paths)."""
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def read_qfs(path, memmap: bool = False):
    """Read a QFS file; returns (frames, flags).

    With ``memmap=True`` the payload is memory mapped instead of loaded,
    which lets reconstruction stream arbitrarily large stacks.
    """
    with open(path, "rb") as fh:
        header = fh.read(QFS_HEADER.size)
        if len(header) < QFS_HEADER.size:
            raise FormatError(f"{path}: truncated QFS header")
        magic, w, h, n, flags = QFS_HEADER.unpack(header)
        if magic != QFS_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {QFS_MAGIC!r}")
        expected = 2 * w * h * n
        if memmap:
            frames = np.memmap(path, dtype="<u2", mode="r", offset=QFS_HEADER.size, shape=(n, h, w))
            return frames, flags
        payload = fh.read()
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    frames = np.frombuffer(payload, dtype="<u2").reshape(n, h, w).astype(np.uint16)
    return frames, flags


def write_qci(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError("QCI payload must be a 2-D array")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(QCI_HEADER.pack(QCI_MAGIC, w, h, 0))
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_qci(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(QCI_HEADER.size)
        if len(header) < QCI_HEADER.size:
            raise FormatError(f"{path}: truncated QCI header")
        magic, w, h, _reserved = QCI_HEADER.unpack(header)
        if magic != QCI_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {QCI_MAGIC!r}")
        payload = fh.read()
    if len(payload) != 8 * w * h:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {8 * w * h}")
    return np.frombuffer(payload, dtype="<f8").reshape(h, w).copy()


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 16-bit binary PGM (P5). Sample bytes are big endian as the format requires."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValidationError("PGM payload must be a 2-D array")
    if values.dtype != np.uint16:
        raise ValidationError("PGM writer expects uint16 values")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.astype(">u2").tobytes())


def _read_pgm_token(fh):
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("unexpected end of PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_pgm(path):
    """Read an 8- or 16-bit binary PGM; returns (values, maxval)."""
    with open(path, "rb") as fh:
        if fh.read(2) != b"P5":
            raise FormatError(f"{path}: not a binary PGM (P5) file")
        try:
            w = int(_read_pgm_token(fh))
            h = int(_read_pgm_token(fh))
            maxval = int(_read_pgm_token(fh))
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PGM header") from exc
        if not (0 < maxval < 65536) or w < 1 or h < 1:
            raise FormatError(f"{path}: invalid PGM dimensions or maxval")
        dtype = ">u2" if maxval > 255 else "u1"
        count = w * h
        payload = fh.read(count * np.dtype(dtype).itemsize)
    if len(payload) != count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated PGM payload")
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return values.astype(np.uint16), maxval


def image_to_pgm16(values: np.ndarray) -> np.ndarray:
    """Min-max scale float image values onto the full 16-bit PGM range."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint16)
    scaled = (values - lo) / (hi - lo) * 65535.0
    return np.rint(scaled).astype(np.uint16)


_FITS_BLOCK = 2880
_FITS_CARD = 80


def _fits_card(keyword: str, value) -> bytes:
    if isinstance(value, bool):
        text = "T" if value else "F"
    elif isinstance(value, (int, np.integer)):
        text = str(int(value))
    else:
        text = repr(value)
    card = f"{keyword:<8}= {text:>20}"
    return card.ljust(_FITS_CARD).encode("ascii")


def write_fits(path, frames: np.ndarray) -> None:
    """Write a uint16 stack as a 16-bit integer primary HDU.

    Samples are stored as big-endian int16 with BZERO = 32768, the standard
    unsigned convention.
    """
    frames = np.asarray(frames)
    if frames.ndim == 2:
        frames = frames[np.newaxis]
    if frames.ndim != 3 or frames.dtype != np.uint16:
        raise ValidationError("FITS export expects a (n, height, width) uint16 array")
    n, h, w = frames.shape
    cards = [
        _fits_card("SIMPLE", True),
        _fits_card("BITPIX", 16),
        _fits_card("NAXIS", 3),
        _fits_card("NAXIS1", w),
        _fits_card("NAXIS2", h),
        _fits_card("NAXIS3", n),
        _fits_card("BZERO", 32768),
        _fits_card("BSCALE", 1),
        b"END".ljust(_FITS_CARD),
    ]
    header = b"".join(cards)
    header += b" " * (-len(header) % _FITS_BLOCK)
    data = (frames.astype(np.int32) - 32768).astype(">i2").tobytes()
    data += b"\x00" * (-len(data) % _FITS_BLOCK)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def _parse_fits_value(text: str):
    text = text.split("/")[0].strip()
    if text in ("T", "F"):
        return text == "T"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_fits(path) -> np.ndarray:
    """Read a 16-bit integer primary HDU into a uint16 stack.

    Only the primary HDU is consumed; extensions are ignored. BZERO and
    BSCALE are applied and the physical values must fit in uint16.
    """
    headers = {}
    with open(path, "rb") as fh:
        while True:
            block = fh.read(_FITS_BLOCK)
            if len(block) < _FITS_BLOCK:
                raise FormatError(f"{path}: truncated FITS header")
            done = False
            for i in range(0, _FITS_BLOCK, _FITS_CARD):
                card = block[i : i + _FITS_CARD].decode("ascii", errors="replace")
                keyword = card[:8].strip()
                if keyword == "END":
                    done = True
                    break
                if "=" in card[8:10]:
                    headers[keyword] = _parse_fits_value(card[10:])
            if done:
                break

        if headers.get("SIMPLE") is not True:
            raise FormatError(f"{path}: not a simple FITS primary HDU")
        if headers.get("BITPIX") != 16:
            raise FormatError(f"{path}: only BITPIX=16 is supported, got {headers.get('BITPIX')}")
        naxis = headers.get("NAXIS")
        if naxis not in (2, 3):
            raise FormatError(f"{path}: only NAXIS 2 or 3 is supported, got {naxis}")
        w = int(headers.get("NAXIS1", 0))
        h = int(headers.get("NAXIS2", 0))
        n = int(headers.get("NAXIS3", 1)) if naxis == 3 else 1
        if w < 1 or h < 1 or n < 1:
            raise FormatError(f"{path}: invalid FITS dimensions")
        count = n * h * w
        payload = fh.read(2 * count)
    if len(payload) != 2 * count:
        raise FormatError(f"{path}: truncated FITS data")
    raw = np.frombuffer(payload, dtype=">i2").astype(np.int64)
    bzero = headers.get("BZERO", 0)
    bscale = headers.get("BSCALE", 1)
    physical = raw * int(bscale) + int(bzero)
    if physical.min() < 0 or physical.max() > 65535:
        raise FormatError(f"{path}: physical values do not fit in uint16")
    return physical.astype(np.uint16).reshape(n, h, w)


def write_metrics_csv(path, rows) -> None:
    """Write analysis rows with the fixed header (metric,value,sem,n,params)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for row in rows:
            params = row.get("params", {})
            if isinstance(params, dict):
                params = ";".join(f"{k}={v}" for k, v in params.items())
            sem = row.get("sem")
            writer.writerow(
                [
                    row["metric"],
                    f"{row['value']:.9g}",
                    "" if sem is None else f"{sem:.9g}",
                    row.get("n", 1),
                    params,
                ]
            )


def write_ledger_csv(path, ledger) -> None:
    """Dump per-pair ground-truth records.

    Cells are written as -1 when the photon produced no hit (absorbed signal
    or an out-of-bounds landing). Requires the ledger to have been built
    with ``record_pairs=True``; otherwise only the header is written.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LEDGER_CSV_HEADER)
        pair_id = 0
        for rec in ledger.records:
            frame = rec["frame"]
            births = rec["birth_um"]
            s_cell = rec["s_cell"]
            i_cell = rec["i_cell"]
            s_hit = rec["transmitted"] & rec["s_in"]
            i_hit = rec["i_in"]
            for j in range(births.shape[0]):
                ps = s_cell[j] if s_hit[j] else (-1, -1)
                pi = i_cell[j] if i_hit[j] else (-1, -1)
                writer.writerow(
                    [
                        pair_id,
                        frame,
                        f"{births[j, 0]:.4f}",
                        f"{births[j, 1]:.4f}",
                        int(ps[0]),
                        int(ps[1]),
                        int(pi[0]),
                        int(pi[1]),
                        int(rec["transmitted"][j]),
                        int(rec["registered"][j]),
                    ]
                )
                pair_id += 1
