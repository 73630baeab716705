"""Value snapshot container: plain-text header plus raw little-endian float64 payload.

Layout::

    INTRADAY-HJB-SNAPSHOT 1
    kind = value_stack
    shape = 289,51,51,201
    index_order = n,i,j,k row-major
    dtype = <f8
    params_hash = <sha256>
    params.<name> = <repr>
    bounds.<name> = <repr>
    grid.<name> = <repr>
    payload_bytes = <int>
    END

The payload follows the ``END`` line directly, so a reader can memory-map it
at the header length.  Writes go to a temporary file that is renamed into
place once complete.
"""
from dataclasses import dataclass, fields
import hashlib
import os
import tempfile
import warnings

import numpy as np

from .domain_bounds import DomainBounds, Grid
from .errors import SnapshotError
from .market_model import ModelParams

__all__ = ["MAGIC", "INDEX_ORDERS", "StaleSnapshotWarning", "Snapshot", "params_hash",
           "write_snapshot", "read_snapshot", "SnapshotStorage", "write_stack", "read_stack"]

MAGIC = "INTRADAY-HJB-SNAPSHOT 1"
INDEX_ORDERS = {"value_stack": "n,i,j,k row-major", "stage2": "i,k row-major",
                "field": "i,j,k row-major"}
_GRID_KEYS = ("N_x", "N_y", "N_q", "N_m", "N_t", "T", "L", "idx_Tgc", "idx_TmL")


class StaleSnapshotWarning(UserWarning):
    """Snapshot was produced with different model parameters."""


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse(text):
    if text == "none":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        return float(text)


def params_hash(params):
    """SHA-256 over the canonical ``name=value`` lines of the model parameters."""
    lines = "\n".join(f"{f.name}={_fmt(getattr(params, f.name))}" for f in fields(params))
    return hashlib.sha256(lines.encode()).hexdigest()


def _header(kind, shape, params, grid, extra=None):
    if kind not in INDEX_ORDERS:
        raise SnapshotError(f"unknown snapshot kind {kind!r}")
    lines = [MAGIC, f"kind = {kind}", "shape = " + ",".join(str(int(s)) for s in shape),
             f"index_order = {INDEX_ORDERS[kind]}", "dtype = <f8"]
    if params is not None:
        lines.append(f"params_hash = {params_hash(params)}")
        lines += [f"params.{f.name} = {_fmt(getattr(params, f.name))}" for f in fields(params)]
    if grid is not None:
        lines += [f"bounds.{f.name} = {_fmt(getattr(grid.bounds, f.name))}"
                  for f in fields(grid.bounds)]
        lines += [f"grid.{k} = {_fmt(getattr(grid, k))}" for k in _GRID_KEYS]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k} = {v}")
    lines.append(f"payload_bytes = {8 * int(np.prod(shape))}")
    lines.append("END")
    return ("\n".join(lines) + "\n").encode("ascii")


@dataclass
class Snapshot:
    """Decoded container; ``values`` is a read-only memory map unless loaded eagerly."""

    kind: str
    values: np.ndarray
    header: dict
    params: ModelParams = None
    grid: Grid = None

    @property
    def meta(self):
        return {k[5:]: v for k, v in self.header.items() if k.startswith("meta.")}


def _tmp_path(path):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".snap", dir=d)
    os.close(fd)
    return tmp


def write_snapshot(path, array, kind="value_stack", params=None, grid=None, extra=None):
    """Write ``array`` atomically; returns the path."""
    a = np.asarray(array)
    if not np.all(np.isfinite(a)):
        raise SnapshotError("refusing to write non-finite values", path=str(path))
    tmp = _tmp_path(path)
    try:
        with open(tmp, "wb") as fh:
            fh.write(_header(kind, a.shape, params, grid, extra))
            np.ascontiguousarray(a, dtype="<f8").tofile(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class SnapshotStorage:
    """Storage factory for :func:`solve_stage3` backed by a memory-mapped snapshot.

    The solver fills the map in place; :meth:`commit` flushes it and renames the
    temporary file into place, :meth:`abort` discards it.
    """

    def __init__(self, path, params=None, grid=None, kind="value_stack", extra=None):
        self.path, self.params, self.grid, self.kind, self.extra = path, params, grid, kind, extra
        self._tmp = None
        self._map = None

    def __call__(self, shape):
        header = _header(self.kind, shape, self.params, self.grid, self.extra)
        self._tmp = _tmp_path(self.path)
        with open(self._tmp, "wb") as fh:
            fh.write(header)
            fh.truncate(len(header) + 8 * int(np.prod(shape)))
        self._map = np.memmap(self._tmp, dtype="<f8", mode="r+", offset=len(header),
                              shape=tuple(shape))
        return self._map

    def commit(self):
        if self._map is None:
            raise SnapshotError("nothing to commit", path=str(self.path))
        if not np.all(np.isfinite(self._map)):
            self.abort()
            raise SnapshotError("refusing to commit non-finite values", path=str(self.path))
        self._map.flush()
        self._map = None
        os.replace(self._tmp, self.path)
        return self.path

    def abort(self):
        self._map = None
        if self._tmp and os.path.exists(self._tmp):
            os.unlink(self._tmp)


def read_snapshot(path, expected_params=None, mmap=True):
    """Decode a container; warns with :class:`StaleSnapshotWarning` on a params mismatch.

    Raises
    ------
    SnapshotError
        Bad magic, malformed header, unexpected index order, or a payload whose
        size differs from the header's byte count.
    """
    try:
        size = os.path.getsize(path)
        fh = open(path, "rb")
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot: {exc.strerror}", path=str(path)) from exc
    header, offset = {}, 0
    with fh:
        first = fh.readline()
        if first.decode("ascii", "replace").rstrip("\n") != MAGIC:
            raise SnapshotError("not a snapshot container (bad magic line)", path=str(path))
        offset = len(first)
        while True:
            line = fh.readline()
            if not line:
                raise SnapshotError("header ends without END", path=str(path))
            offset += len(line)
            text = line.decode("ascii", "replace").rstrip("\n")
            if text == "END":
                break
            key, sep, value = text.partition(" = ")
            if not sep:
                raise SnapshotError("malformed header line", path=str(path), line=text)
            header[key] = value
    for key in ("kind", "shape", "index_order", "dtype", "payload_bytes"):
        if key not in header:
            raise SnapshotError(f"header lacks {key}", path=str(path))
    kind = header["kind"]
    if kind not in INDEX_ORDERS:
        raise SnapshotError(f"unknown snapshot kind {kind!r}", path=str(path))
    if header["index_order"] != INDEX_ORDERS[kind]:
        raise SnapshotError("index order mismatch", path=str(path),
                            expected=INDEX_ORDERS[kind], found=header["index_order"])
    if header["dtype"] != "<f8":
        raise SnapshotError("unsupported dtype", path=str(path), found=header["dtype"])
    try:
        shape = tuple(int(s) for s in header["shape"].split(","))
        expected = int(header["payload_bytes"])
    except ValueError as exc:
        raise SnapshotError("malformed shape or payload size", path=str(path)) from exc
    if expected != 8 * int(np.prod(shape)):
        raise SnapshotError("payload size disagrees with shape", path=str(path),
                            expected_bytes=8 * int(np.prod(shape)), header_bytes=expected)
    actual = size - offset
    if actual != expected:
        raise SnapshotError(f"payload size mismatch: expected {expected} bytes, found {actual}",
                            path=str(path), expected_bytes=expected, actual_bytes=actual)
    if mmap:
        values = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=shape)
    else:
        values = np.fromfile(path, dtype="<f8", offset=offset).reshape(shape)
    params = _params_from(header)
    grid = _grid_from(header)
    if expected_params is not None:
        found = header.get("params_hash")
        if found != params_hash(expected_params):
            warnings.warn(f"snapshot {path} was written with different parameters",
                          StaleSnapshotWarning, stacklevel=2)
    return Snapshot(kind, values, header, params, grid)


def _params_from(header):
    kw = {k[7:]: _parse(v) for k, v in header.items() if k.startswith("params.")}
    if not kw:
        return None
    try:
        return ModelParams(**kw)
    except TypeError as exc:
        raise SnapshotError("header parameters do not match the model fields") from exc


def _grid_from(header):
    b = {k[7:]: _parse(v) for k, v in header.items() if k.startswith("bounds.")}
    g = {k[5:]: _parse(v) for k, v in header.items() if k.startswith("grid.")}
    if not b or not g:
        return None
    try:
        bounds = DomainBounds(**{k: float(v) for k, v in b.items()})
        return Grid(g["N_x"], g["N_y"], g["N_q"], g["N_m"], g["N_t"], bounds, float(g["T"]),
                    float(g["L"]), g["idx_Tgc"], g["idx_TmL"])
    except (TypeError, KeyError) as exc:
        raise SnapshotError("header grid block is incomplete") from exc


def write_stack(path, stack, extra=None):
    """Write a :class:`ValueStack` as a ``value_stack`` snapshot."""
    return write_snapshot(path, stack.values, "value_stack", stack.params, stack.grid, extra)


def read_stack(path, expected_params=None, mmap=True):
    """Read a ``value_stack`` snapshot back into a :class:`ValueStack`."""
    from .hjb_stage3 import ValueStack
    snap = read_snapshot(path, expected_params, mmap)
    if snap.kind != "value_stack":
        raise SnapshotError("snapshot does not hold a value stack", path=str(path), kind=snap.kind)
    if snap.grid is None:
        raise SnapshotError("value stack snapshot lacks its grid block", path=str(path))
    return ValueStack(snap.values, snap.grid, snap.params)
