"""On-disk formats: SNT1 image tensors, label sidecars, CSV matrices.

SNT1 layout: one ASCII header line ``SNT1 N C H W`` followed by N*C*H*W
32-bit little-endian floats in row-major (image, channel, row, col) order.
CSV output uses '.' decimals and LF endings with shortest round-trip float
formatting, so identical arrays produce identical bytes.
"""
from __future__ import annotations

import numpy as np


class FormatError(ValueError):
    """Raised when an on-disk artifact does not match its declared format."""


def write_snt(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.ndim != 4:
        raise FormatError(f"expected (N, C, H, W) images, got shape {images.shape}")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(f"SNT1 {n} {c} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_snt(path) -> np.ndarray:
    """Read an SNT1 file into a float64 (N, C, H, W) array."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").strip()
        parts = header.split()
        if len(parts) != 5 or parts[0] != "SNT1":
            raise FormatError(f"{path}: bad SNT1 header {header!r}")
        try:
            n, c, h, w = (int(p) for p in parts[1:])
        except ValueError as exc:
            raise FormatError(f"{path}: non-integer dims in header") from exc
        raw = fh.read()
    expected = n * c * h * w * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return data.reshape(n, c, h, w)


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "wb") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n".encode("ascii"))


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        lines = [ln for ln in fh.read().decode("ascii").splitlines() if ln.strip()]
    try:
        return np.array([int(ln) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be integers") from exc


def _fmt(value: float) -> str:
    return repr(float(value))


def write_csv_matrix(path, matrix: np.ndarray, header: list[str] | None = None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in matrix:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def read_csv_matrix(path, skip_header: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        lines = fh.read().decode("ascii").splitlines()
    if skip_header:
        lines = lines[1:]
    rows = [[float(v) for v in ln.split(",")] for ln in lines if ln.strip()]
    return np.array(rows, dtype=np.float64)


def write_float64_block(fh, arrays) -> None:
    for arr in arrays:
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_float64_block(fh, shapes) -> list[np.ndarray]:
    out = []
    for shape in shapes:
        count = int(np.prod(shape))
        raw = fh.read(count * 8)
        if len(raw) != count * 8:
            raise FormatError("checkpoint truncated")
        out.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    return out
