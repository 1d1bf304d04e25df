"""Content-addressed blob storage for revision payloads.

Payload bytes (novel text, cartoon image data, anything) are stored
under the SHA-256 of the bytes themselves, so storage is self-verifying:
a blob that does not hash to its own key has been tampered with.

On-disk layout, relative to the store root:

    blobs/<first 2 hex chars>/<full 64 hex chars>

Blob files hold the raw payload bytes, no envelope, so any external
sha256 tool can check them. Identical content is stored once, whatever
work or revision it belongs to.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from pathlib import Path

from .digests import from_hex, sha256, to_hex

MEDIA_KINDS = ("text", "image", "other")

_TMP_COUNTER = itertools.count()


class StoreError(Exception):
    """Base class for content store failures."""


class NotFoundError(StoreError):
    """No blob stored under the requested hash."""


class IntegrityError(StoreError):
    """Stored bytes no longer hash to their key."""


@dataclass(frozen=True)
class Payload:
    """Bytes plus a media tag. The tag never participates in hashing."""

    data: bytes
    media_kind: str = "other"

    def __post_init__(self):
        if self.media_kind not in MEDIA_KINDS:
            raise ValueError(f"unknown media_kind {self.media_kind!r}")


@dataclass(frozen=True)
class AuditDefect:
    key: str  # hex key as stored (or raw filename when malformed)
    kind: str  # key-mismatch | unreadable | malformed-key
    detail: str = ""


def hash_content(payload: Payload | bytes) -> bytes:
    """SHA-256 of the payload bytes. Deterministic, media_kind ignored."""
    data = payload.data if isinstance(payload, Payload) else payload
    return sha256(data)


class ContentStore:
    """Filesystem-backed store. Safe for concurrent puts of the same blob:
    writes go to a temp file and are published with an atomic rename."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"

    def _blob_path(self, digest: bytes) -> Path:
        hex_key = to_hex(digest)
        return self.blob_dir / hex_key[:2] / hex_key

    def put(self, payload: Payload | bytes) -> bytes:
        """Store bytes under their hash; re-putting identical bytes is a no-op."""
        data = payload.data if isinstance(payload, Payload) else payload
        digest = sha256(data)
        path = self._blob_path(digest)
        if path.exists():
            return digest
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            # unique temp name per call: concurrent puts of the same bytes
            # each publish their own copy, last rename wins with identical
            # content either way
            tmp = path.parent / f".tmp-{os.getpid()}-{next(_TMP_COUNTER)}"
            tmp.write_bytes(data)
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreError(f"cannot write blob at {path}: {exc}") from exc
        return digest

    def has(self, digest: bytes) -> bool:
        return self._blob_path(digest).exists()

    def get(self, digest: bytes) -> bytes:
        """Return the stored bytes, re-verified against the key on every read."""
        path = self._blob_path(digest)
        if not path.exists():
            raise NotFoundError(f"no blob for {to_hex(digest)}")
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read blob at {path}: {exc}") from exc
        if sha256(data) != digest:
            raise IntegrityError(f"blob {to_hex(digest)} does not match its key")
        return data

    def keys(self) -> list[bytes]:
        """Digests of every blob file present, sorted; skips malformed names."""
        found = []
        if not self.blob_dir.exists():
            return found
        for path in sorted(self.blob_dir.glob("*/*")):
            if path.name.startswith("."):
                continue
            try:
                found.append(from_hex(path.name))
            except ValueError:
                continue
        return sorted(found)

    def audit(self) -> list[AuditDefect]:
        """Rehash every blob. Empty result means every blob matches its key.

        Dot-prefixed names are skipped: they are in-flight publications
        from concurrent puts, not blobs.
        """
        defects: list[AuditDefect] = []
        if not self.blob_dir.exists():
            return defects
        for path in sorted(self.blob_dir.glob("*/*")):
            name = path.name
            if name.startswith("."):
                continue
            try:
                digest = from_hex(name)
            except ValueError:
                defects.append(AuditDefect(name, "malformed-key", "not a 64-char hex name"))
                continue
            if path.parent.name != name[:2]:
                defects.append(AuditDefect(name, "malformed-key", "wrong fan-out directory"))
                continue
            try:
                data = path.read_bytes()
            except OSError as exc:
                defects.append(AuditDefect(name, "unreadable", str(exc)))
                continue
            if sha256(data) != digest:
                defects.append(AuditDefect(name, "key-mismatch", "content does not hash to key"))
        return defects


class MemoryStore:
    """Dict-backed store with the ContentStore surface, for simulations."""

    def __init__(self):
        self._blobs: dict[bytes, bytes] = {}

    def put(self, payload: Payload | bytes) -> bytes:
        data = payload.data if isinstance(payload, Payload) else payload
        digest = sha256(data)
        self._blobs.setdefault(digest, data)
        return digest

    def has(self, digest: bytes) -> bool:
        return digest in self._blobs

    def get(self, digest: bytes) -> bytes:
        if digest not in self._blobs:
            raise NotFoundError(f"no blob for {to_hex(digest)}")
        data = self._blobs[digest]
        if sha256(data) != digest:
            raise IntegrityError(f"blob {to_hex(digest)} does not match its key")
        return data

    def keys(self) -> list[bytes]:
        return sorted(self._blobs)

    def audit(self) -> list[AuditDefect]:
        defects = []
        for digest in sorted(self._blobs):
            if sha256(self._blobs[digest]) != digest:
                defects.append(AuditDefect(to_hex(digest), "key-mismatch"))
        return defects
