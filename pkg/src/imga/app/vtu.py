"""VTK unstructured-grid (.vtu) output for octree meshes.

Cells are the leaf hexahedra (corner nodes only); every mesh node is written
as a point so quadratic fields keep their mid-side values.
"""
import struct
import zlib
from xml.sax.saxutils import quoteattr

import numpy as np

from ..octree import slot_offsets

VTK_HEXAHEDRON = 12
_VTK_CORNERS = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
_TYPES = {np.dtype(np.float64): "Float64", np.dtype(np.float32): "Float32",
          np.dtype(np.int64): "Int64", np.dtype(np.int32): "Int32",
          np.dtype(np.int8): "Int8", np.dtype(np.uint8): "UInt8"}


def hex_connectivity(nodemap):
    """(E, 8) node ids in VTK hexahedron order."""
    offs = slot_offsets(nodemap.bf)
    bf = nodemap.bf
    slots = [int(np.flatnonzero(np.all(offs == np.array(c) * bf, axis=1))[0]) for c in _VTK_CORNERS]
    return nodemap.conn[:, slots]


def _as_array(a):
    a = np.ascontiguousarray(a)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    if a.dtype not in _TYPES:
        a = a.astype(np.float64)
    return a


def _encode(a, compress, level=6, block=1 << 15):
    raw = a.tobytes()
    if not compress:
        return struct.pack("<Q", len(raw)) + raw
    blocks = [raw[i:i + block] for i in range(0, len(raw), block)] or [b""]
    comp = [zlib.compress(b, level) for b in blocks]
    last = len(blocks[-1]) if len(raw) % block else (block if raw else 0)
    head = struct.pack(f"<{3 + len(comp)}Q", len(blocks), block, last, *[len(c) for c in comp])
    return head + b"".join(comp)


class _Writer:
    def __init__(self, mode, compress):
        if mode not in ("ascii", "binary"):
            raise ValueError("mode must be 'ascii' or 'binary'")
        self.mode = mode
        self.compress = compress and mode == "binary"
        self.blob = bytearray()

    def array(self, name, a, ncomp=None):
        a = _as_array(a)
        ncomp = ncomp or (a.shape[1] if a.ndim > 1 else 1)
        attrs = f'type="{_TYPES[a.dtype]}" Name={quoteattr(name)} NumberOfComponents="{ncomp}"'
        if self.mode == "ascii":
            fmt = "%.17g" if a.dtype.kind == "f" else "%d"
            body = " ".join(fmt % v for v in a.ravel())
            return f'<DataArray {attrs} format="ascii">{body}</DataArray>'
        off = len(self.blob)
        self.blob += _encode(a, self.compress)
        return f'<DataArray {attrs} format="appended" offset="{off}"/>'


def write_vtu(path, nodemap, point_data=None, cell_data=None, mode="binary", compress=True):
    """Write ``nodemap`` as hexahedra with nodal and per-leaf fields.

    ``point_data`` values are (n_nodes,) or (n_nodes, k); ``cell_data`` values
    are per leaf.
    """
    conn = hex_connectivity(nodemap)
    n_pts, n_cells = nodemap.n_nodes, conn.shape[0]
    w = _Writer(mode, compress)
    parts = []
    pd = []
    for name, val in (point_data or {}).items():
        val = np.asarray(val)
        if val.shape[0] != n_pts:
            raise ValueError(f"point field {name!r} has {val.shape[0]} rows, expected {n_pts}")
        pd.append(w.array(name, val))
    cd = []
    for name, val in (cell_data or {}).items():
        val = np.asarray(val)
        if val.shape[0] != n_cells:
            raise ValueError(f"cell field {name!r} has {val.shape[0]} rows, expected {n_cells}")
        cd.append(w.array(name, val))
    pts = w.array("Points", nodemap.coords.astype(np.float64), 3)
    cells = [w.array("connectivity", conn.astype(np.int64).ravel(), 1),
             w.array("offsets", (8 * np.arange(1, n_cells + 1)).astype(np.int64), 1),
             w.array("types", np.full(n_cells, VTK_HEXAHEDRON, dtype=np.uint8), 1)]
    header = 'header_type="UInt64"'
    comp = ' compressor="vtkZLibDataCompressor"' if w.compress else ""
    parts.append(f'<?xml version="1.0"?>\n<VTKFile type="UnstructuredGrid" version="1.0" '
                 f'byte_order="LittleEndian" {header}{comp}>')
    parts.append("<UnstructuredGrid>")
    parts.append(f'<Piece NumberOfPoints="{n_pts}" NumberOfCells="{n_cells}">')
    parts.append("<PointData>" + "".join(pd) + "</PointData>")
    parts.append("<CellData>" + "".join(cd) + "</CellData>")
    parts.append("<Points>" + pts + "</Points>")
    parts.append("<Cells>" + "".join(cells) + "</Cells>")
    parts.append("</Piece>\n</UnstructuredGrid>")
    with open(path, "wb") as fh:
        fh.write("\n".join(parts).encode())
        if mode == "binary":
            fh.write(b'\n<AppendedData encoding="raw">\n_')
            fh.write(bytes(w.blob))
            fh.write(b"\n</AppendedData>")
        fh.write(b"\n</VTKFile>\n")
    return path


def nodal_fields(nodemap, U, nf, names=("velocity", "pressure"), widths=(3, 1)):
    """Global dof vector -> per-node arrays (hanging values interpolated)."""
    vals = nodemap.constraint @ np.asarray(U).reshape(-1, nf)
    out, k = {}, 0
    for name, wdt in zip(names, widths):
        out[name] = vals[:, k] if wdt == 1 else vals[:, k:k + wdt]
        k += wdt
    return out
