"""
Минимальные бинарные форматы.

Только то что нужно тестбенчу:
- сырой I/Q: interleaved float32 little-endian (I0 Q0 I1 Q1 ...)
- тензорный файл: магия + длина заголовка + JSON-заголовок + float32 blob

Формат тензорного файла:
    b"RFFI" | uint32 LE длина заголовка | JSON (utf-8) | тензоры подряд

В заголовке "tensors": список {name, shape, offset, count},
offset и count в элементах float32 от начала blob'а.
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from rffi.errors import FormatError

MAGIC = b"RFFI"
F32 = np.dtype("<f4")


def write_iq(path: Path, samples: np.ndarray) -> None:
    """Комплексные отсчёты -> interleaved float32 LE."""
    samples = np.asarray(samples, dtype=np.complex128)
    interleaved = np.empty(2 * samples.size, dtype=F32)
    interleaved[0::2] = samples.real
    interleaved[1::2] = samples.imag
    Path(path).write_bytes(interleaved.tobytes())


def read_iq(path: Path) -> np.ndarray:
    """Обратно в complex128. Нечётное число float'ов: битый файл."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=F32)
    if raw.size % 2:
        raise FormatError(f"{path}: odd number of float32 values in I/Q payload")
    return raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)


@dataclass
class TensorFile:
    """
    Распарсенный тензорный файл.

    header: всё кроме описания тензоров (arch, labels, ...).
    """

    header: dict
    tensors: Dict[str, np.ndarray]


def write_tensor_file(path: Path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    """Пишет заголовок и тензоры (порядок: как в dict)."""
    layout: List[dict] = []
    chunks: List[bytes] = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=F32)
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size

    body = dict(header)
    body["tensors"] = layout
    header_bytes = json.dumps(body, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)


def read_tensor_file(path: Path) -> TensorFile:
    """
    Читает и валидирует тензорный файл.

    Любое несоответствие (магия, длины, формы) -> FormatError.
    """
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")

    (header_len,) = struct.unpack("<I", data[4:8])
    if 8 + header_len > len(data):
        raise FormatError(f"{path}: header truncated")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}") from e

    blob = data[8 + header_len :]
    if len(blob) % F32.itemsize:
        raise FormatError(f"{path}: blob size is not a multiple of 4 bytes")
    values = np.frombuffer(blob, dtype=F32)

    if not isinstance(header, dict):
        raise FormatError(f"{path}: header is not a JSON object")
    layout = header.pop("tensors", None)
    if not isinstance(layout, list):
        raise FormatError(f"{path}: header has no tensor layout")

    tensors: Dict[str, np.ndarray] = {}
    expected = 0
    for entry in layout:
        try:
            name = str(entry["name"])
            shape: Tuple[int, ...] = tuple(int(d) for d in entry["shape"])
            count = int(entry["count"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed tensor entry {entry!r}: {e}") from e
        if offset < 0 or count < 0 or any(d < 0 for d in shape):
            raise FormatError(f"{path}: tensor {name} has negative offset or shape")
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise FormatError(f"{path}: tensor {name} shape {shape} != count {count}")
        if offset + count > values.size:
            raise FormatError(f"{path}: tensor {name} runs past end of blob (truncated)")
        tensors[name] = values[offset : offset + count].reshape(shape).copy()
        expected = max(expected, offset + count)
    if expected != values.size:
        raise FormatError(f"{path}: blob has {values.size - expected} trailing values")

    return TensorFile(header=header, tensors=tensors)
