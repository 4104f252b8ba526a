"""AVMD container: a directory with ``manifest.json`` and ``data.bin``.

The manifest lists every blob with its name, dtype (``<f8`` or ``<i8``),
shape, byte offset, byte length and CRC32; ``data.bin`` holds the blobs
back to back, row-major, little-endian. The whole manifest is validated
before any blob byte is read.
"""

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import AvmdChecksumError, AvmdError, AvmdManifestError, AvmdTruncatedError, AvmdVersionError

logger = logging.getLogger(__name__)

FORMAT_NAME = "AVMD"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
DATA_FILE = "data.bin"
DTYPES = ("<f8", "<i8")
SECTIONS = ("dataset", "world", "checkpoint")


@dataclass
class BlobEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int
    crc32: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dtype": self.dtype,
            "shape": list(self.shape),
            "offset": self.offset,
            "nbytes": self.nbytes,
            "crc32": self.crc32,
        }


@dataclass
class AvmdContainer:
    """Decoded container: section tag, JSON metadata and named arrays."""

    section: str
    meta: dict[str, Any] = field(default_factory=dict)
    blobs: dict[str, np.ndarray] = field(default_factory=dict)


def _encode(name: str, array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        return np.ascontiguousarray(array, dtype="<f8")
    if array.dtype.kind in "iub":
        return np.ascontiguousarray(array, dtype="<i8")
    raise AvmdError(f"blob '{name}' has unsupported dtype {array.dtype}")


def write_container(path: Path, section: str, blobs: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    """Write ``blobs`` and ``meta`` under directory ``path``."""
    if section not in SECTIONS:
        raise AvmdError(f"unknown AVMD section '{section}'")
    path = Path(path)
    entries: list[BlobEntry] = []
    offset = 0
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / DATA_FILE, "wb") as data:
            for name, array in blobs.items():
                encoded = _encode(name, array)
                raw = encoded.tobytes(order="C")
                data.write(raw)
                entries.append(
                    BlobEntry(
                        name=name,
                        dtype=encoded.dtype.str,
                        shape=tuple(int(s) for s in encoded.shape),
                        offset=offset,
                        nbytes=len(raw),
                        crc32=zlib.crc32(raw),
                    )
                )
                offset += len(raw)
        manifest = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "section": section,
            "meta": dict(meta),
            "blobs": [entry.to_dict() for entry in entries],
        }
        (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise AvmdError(f"cannot write AVMD container {path}: {e}") from e
    logger.debug(f"Wrote AVMD {section} container {path} ({len(entries)} blobs, {offset} bytes)")
    return path


def _parse_entry(raw: Any, index: int) -> BlobEntry:
    if not isinstance(raw, dict):
        raise AvmdManifestError(f"blob entry {index} is not an object")
    try:
        entry = BlobEntry(
            name=str(raw["name"]),
            dtype=str(raw["dtype"]),
            shape=tuple(int(s) for s in raw["shape"]),
            offset=int(raw["offset"]),
            nbytes=int(raw["nbytes"]),
            crc32=int(raw["crc32"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise AvmdManifestError(f"blob entry {index} is malformed: {e}") from e
    if entry.dtype not in DTYPES:
        raise AvmdManifestError(f"blob '{entry.name}' has dtype {entry.dtype}, expected one of {DTYPES}")
    if any(s < 0 for s in entry.shape) or entry.offset < 0:
        raise AvmdManifestError(f"blob '{entry.name}' has a negative shape or offset")
    if entry.nbytes != 8 * int(np.prod(entry.shape, dtype=np.int64)):
        raise AvmdManifestError(
            f"blob '{entry.name}' declares {entry.nbytes} bytes for shape {entry.shape}"
        )
    return entry


def read_manifest(path: Path, reader_version: int = FORMAT_VERSION) -> tuple[dict[str, Any], list[BlobEntry]]:
    """Load and validate the manifest without touching ``data.bin``."""
    manifest_path = Path(path) / MANIFEST_FILE
    try:
        text = manifest_path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise AvmdManifestError(f"{path} is not an AVMD container (missing {MANIFEST_FILE})") from e
    except OSError as e:
        raise AvmdError(f"cannot read {manifest_path}: {e}") from e
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as e:
        raise AvmdManifestError(f"{manifest_path} is not valid JSON: {e}") from e

    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise AvmdManifestError(f"{manifest_path} is not an AVMD manifest")
    version = manifest.get("version")
    if not isinstance(version, int):
        raise AvmdManifestError(f"{manifest_path} has no integer version")
    if version != reader_version:
        raise AvmdVersionError(version, reader_version)
    if manifest.get("section") not in SECTIONS:
        raise AvmdManifestError(f"{manifest_path} has unknown section {manifest.get('section')!r}")
    if not isinstance(manifest.get("meta", {}), dict) or not isinstance(manifest.get("blobs"), list):
        raise AvmdManifestError(f"{manifest_path} is missing 'meta' or 'blobs'")

    entries = [_parse_entry(raw, i) for i, raw in enumerate(manifest["blobs"])]
    names = [e.name for e in entries]
    if len(set(names)) != len(names):
        raise AvmdManifestError(f"{manifest_path} lists duplicate blob names")
    expected = 0
    for entry in entries:
        if entry.offset != expected:
            raise AvmdManifestError(f"blob '{entry.name}' starts at {entry.offset}, expected {expected}")
        expected += entry.nbytes
    return manifest, entries


def read_container(
    path: Path, section: str | None = None, reader_version: int = FORMAT_VERSION
) -> AvmdContainer:
    """Read and verify a container; ``section`` optionally pins the expected tag."""
    path = Path(path)
    manifest, entries = read_manifest(path, reader_version)
    if section is not None and manifest["section"] != section:
        raise AvmdManifestError(f"{path} holds a '{manifest['section']}' section, expected '{section}'")

    try:
        data = (path / DATA_FILE).read_bytes()
    except OSError as e:
        raise AvmdError(f"cannot read {path / DATA_FILE}: {e}") from e

    blobs: dict[str, np.ndarray] = {}
    for entry in entries:
        end = entry.offset + entry.nbytes
        if end > len(data):
            raise AvmdTruncatedError(
                f"blob '{entry.name}' needs bytes {entry.offset}..{end} but {DATA_FILE} has {len(data)}"
            )
        raw = data[entry.offset : end]
        if zlib.crc32(raw) != entry.crc32:
            raise AvmdChecksumError(f"blob '{entry.name}' failed its CRC32 check")
        blobs[entry.name] = np.frombuffer(raw, dtype=entry.dtype).reshape(entry.shape).copy()

    logger.debug(f"Read AVMD {manifest['section']} container {path} ({len(blobs)} blobs)")
    return AvmdContainer(section=manifest["section"], meta=manifest.get("meta", {}), blobs=blobs)


def validate_container(path: Path) -> int:
    """Fully read a container and return its blob count."""
    return len(read_container(path).blobs)
