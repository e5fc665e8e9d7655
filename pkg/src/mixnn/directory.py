"""Registration authority: servers publish (pk, address, metadata), the
designer queries the pool.

The in-process Directory object is the whole service; the socket flavour in
the harness just speaks length-prefixed text frames in front of it:

    request:  "REGISTER <record-line>"  |  "LIST"  |  "LIST k=v;k=v"
    response: "OK" | "ERR <message>" | "RECORDS\n<record-line>..."

Secret keys never appear in records, frames, or the store file.
"""

import os
import threading

from .crypto import KeyRecord


class DirectoryConflict(Exception):
    """node_id already registered with a different public key."""


class Directory:
    def __init__(self, store_path: str | None = None):
        self._records: dict[str, KeyRecord] = {}
        self._lock = threading.Lock()
        self._store_path = store_path
        if store_path and os.path.exists(store_path):
            with open(store_path, encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if line:
                        self._insert(KeyRecord.from_line(line), persist=False)

    def _insert(self, rec: KeyRecord, persist: bool):
        existing = self._records.get(rec.node_id)
        if existing is not None and existing.pk != rec.pk:
            raise DirectoryConflict(
                f"node_id {rec.node_id!r} already registered with a different key"
            )
        self._records[rec.node_id] = rec
        if persist and self._store_path:
            with open(self._store_path, "a", encoding="utf-8") as f:
                f.write(rec.to_line() + "\n")

    def register(self, rec: KeyRecord) -> None:
        """Store a record. Re-registering the identical pk is idempotent;
        the same node_id with a different pk is a conflict."""
        with self._lock:
            self._insert(rec, persist=True)

    def list(self, metadata_filter: dict | None = None) -> list:
        """All records in node_id order, optionally restricted to those whose
        metadata matches every key=value in the filter."""
        with self._lock:
            records = [self._records[k] for k in sorted(self._records)]
        if metadata_filter:
            records = [
                r for r in records
                if all(r.metadata.get(k) == v for k, v in metadata_filter.items())
            ]
        return records

    def __len__(self):
        return len(self._records)


def handle_frame(directory: Directory, request: str) -> str:
    """One request frame in, one response frame out."""
    verb, _, rest = request.partition(" ")
    if verb == "REGISTER":
        try:
            directory.register(KeyRecord.from_line(rest))
        except DirectoryConflict as exc:
            return f"ERR {exc}"
        except ValueError as exc:
            return f"ERR {exc}"
        return "OK"
    if verb == "LIST":
        flt = None
        if rest:
            flt = {}
            for item in rest.split(";"):
                k, _, v = item.partition("=")
                flt[k] = v
        lines = [r.to_line() for r in directory.list(flt)]
        return "RECORDS\n" + "\n".join(lines)
    return f"ERR unknown verb {verb!r}"


def parse_records_response(response: str) -> list:
    if response.startswith("ERR"):
        raise RuntimeError(response)
    if not response.startswith("RECORDS"):
        raise RuntimeError(f"malformed directory response: {response[:40]!r}")
    lines = response.split("\n")[1:]
    return [KeyRecord.from_line(line) for line in lines if line]
