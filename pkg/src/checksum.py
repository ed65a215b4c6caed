"""Checksum definition, check functions and related utils."""
import hashlib
import json
import logging
import typing as t
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CHUNK_SIZE = 1 << 20


class OutputChecksumError(Exception):
    """Raise if an output file does not match its recorded checksum."""


@dataclass(frozen=True)
class FileDigest:
    """Checksum of one output file, path relative to the output directory."""

    path: str
    sha256_checksum: str


def sha256_of(path: Path) -> str:
    """Hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def digest_files(root: Path, paths: t.Iterable[Path]) -> t.List[FileDigest]:
    """Checksums of ``paths`` keyed by their path relative to ``root``, sorted."""
    digests = [
        FileDigest(path=Path(path).relative_to(root).as_posix(), sha256_checksum=sha256_of(path))
        for path in paths
    ]
    return sorted(digests, key=lambda item: item.path)


def validate_checksum(path: Path, sha256_checksum: str) -> bool:
    """Return True if the file at ``path`` hashes to ``sha256_checksum``."""
    try:
        sha256_hash = sha256_of(path)
    except OSError as err:
        logger.warning("Checksum validation fail, path: %s error: %s", path, err)
        return False
    if sha256_hash == sha256_checksum:
        return True
    logger.warning("Checksum validation fail, path: %s hash: %s", path, sha256_hash)
    return False


def load_manifest_digests(root: Path) -> t.List[FileDigest]:
    """Read the file checksums recorded in ``root``'s manifest."""
    path = Path(root) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return [FileDigest(path=item, sha256_checksum=sha) for item, sha in data["files"].items()]
    except (OSError, ValueError, KeyError, AttributeError) as err:
        raise OutputChecksumError(f"cannot read manifest {path}: {err}") from err


def verify_outputs(root: Path) -> t.List[str]:
    """Relative paths whose content no longer matches the manifest."""
    mismatched = [
        digest.path
        for digest in load_manifest_digests(root)
        if not validate_checksum(Path(root) / digest.path, digest.sha256_checksum)
    ]
    if mismatched:
        logger.warning("%d output files fail checksum validation.", len(mismatched))
    else:
        logger.info("All output files match the manifest in %s.", root)
    return mismatched
