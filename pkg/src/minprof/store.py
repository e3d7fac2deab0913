"""Append-only result store.

Layout: an 8-byte header (magic ``MPRS``, u16 format version, u16 reserved)
followed by self-delimiting records, each ``u32 length | u32 crc32 | payload``
with a UTF-8 JSON payload. Every payload carries a ``key`` (content hash of
plan id, model spec, seed, phase and variant); inserting a key that is
already present is a no-op. On open the index is rebuilt by scanning the
log, and a torn or corrupt tail left by an abrupt stop is cut off.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

from filelock import FileLock, Timeout

MAGIC = b"MPRS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHH")
RECORD_HEAD = struct.Struct("<II")


class StoreError(RuntimeError):
    pass


class StoreLockedError(StoreError):
    pass


def content_key(plan_id: str, spec_identity: dict, seed: int, phase: str, variant: str = "") -> str:
    blob = json.dumps([plan_id, spec_identity, int(seed), phase, variant], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _encode(entry: dict) -> bytes:
    payload = json.dumps(entry, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    return RECORD_HEAD.pack(len(payload), zlib.crc32(payload)) + payload


def scan(data: bytes) -> tuple[list, int]:
    """Parse records from a whole store image; returns ``(entries, end_of_last_good_record)``."""
    if len(data) < HEADER.size:
        return [], 0
    magic, version, _ = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise StoreError(f"not a result store (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise StoreError(f"unsupported store format version {version}")
    entries, pos = [], HEADER.size
    while pos + RECORD_HEAD.size <= len(data):
        length, crc = RECORD_HEAD.unpack_from(data, pos)
        start = pos + RECORD_HEAD.size
        payload = data[start:start + length]
        if len(payload) < length or zlib.crc32(payload) != crc:
            break
        try:
            entries.append(json.loads(payload))
        except ValueError:
            break
        pos = start + length
    return entries, pos


class ResultStore:
    """Single-writer store; open with ``readonly=True`` for concurrent readers."""

    def __init__(self, path, readonly: bool = False, lock_timeout: float = 10.0):
        self.path = Path(path)
        self.readonly = readonly
        self._lock = None
        self._entries: list = []
        self._index: dict = {}
        if not readonly:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._lock = FileLock(str(self.path) + ".lock")
            try:
                self._lock.acquire(timeout=lock_timeout)
            except Timeout as exc:
                raise StoreLockedError(f"{self.path} is locked by another writer") from exc
        self._load()

    def _load(self):
        data = self.path.read_bytes() if self.path.exists() else b""
        entries, end = scan(data)
        if not self.readonly:
            if len(data) < HEADER.size:
                with open(self.path, "wb") as fh:
                    fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, 0))
                    fh.flush()
                    os.fsync(fh.fileno())
            elif end < len(data):
                with open(self.path, "r+b") as fh:
                    fh.truncate(end)
        self._entries = entries
        self._index = {e["key"]: i for i, e in enumerate(entries)}

    def close(self):
        if self._lock is not None and self._lock.is_locked:
            self._lock.release()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def get(self, key: str) -> dict | None:
        i = self._index.get(key)
        return None if i is None else self._entries[i]

    def entries(self) -> list:
        return list(self._entries)

    def insert(self, entry: dict) -> bool:
        """Append ``entry`` (must carry ``key``); returns False when the key is already stored."""
        if self.readonly:
            raise StoreError("store opened read-only")
        key = entry.get("key")
        if not key:
            raise ValueError("entry needs a 'key'")
        if key in self._index:
            return False
        blob = _encode(entry)
        with open(self.path, "ab") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        self._index[key] = len(self._entries)
        self._entries.append(json.loads(blob[RECORD_HEAD.size:]))
        return True
