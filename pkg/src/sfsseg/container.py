"""Self-describing binary container: magic, JSON header, float64 LE payload.

Layout::

    b"SFSC"  | u32 format version | u64 header length | header JSON (utf-8) | payload

The header lists every array (name, shape, byte offset into the payload) so
a reader can validate the file before touching the payload.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFSC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ContainerError(IOError):
    pass


def write_container(path, kind, header, arrays):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    doc = {"kind": kind, "version": VERSION, "arrays": entries, **header}
    raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_header(path):
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) != _PREFIX.size:
            raise ContainerError(f"{path}: truncated file")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise ContainerError(f"{path}: not an sfs container (bad magic)")
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version} (expected {VERSION})")
        raw = fh.read(hlen)
        if len(raw) != hlen:
            raise ContainerError(f"{path}: truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt header ({exc})") from None
        payload = fh.read()
    return header, payload


def read_container(path, kind):
    header, payload = read_header(path)
    if header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a '{kind}' file, found '{header.get('kind')}'")
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start, stop = entry["offset"], entry["offset"] + 8 * count
        if stop > len(payload):
            raise ContainerError(f"{path}: payload truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return header, arrays
