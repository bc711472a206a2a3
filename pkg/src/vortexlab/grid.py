"""Uniform grids, scalar/complex fields, discrete operators, and snapshot I/O.

Everything downstream works in dimensionless units where the Higgs mass is 1.
Fields live on uniform rectangular lattices with 1 to 3 axes; all discrete
derivatives are second-order centered stencils and all quadrature is
trapezoidal, so the discrete identities used by the solvers (summation by
parts away from the boundary, exact antisymmetry of centered differences)
hold to roundoff.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

SNAPSHOT_MAGIC = b"VORTEXF1"


class SnapshotFormatError(Exception):
    """Raised when a snapshot file does not conform to the format."""


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular lattice: node (i,j,k) sits at origin + index*spacing."""

    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(h) for h in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        if not 1 <= len(dims) <= 3:
            raise ValueError(f"grid must have 1-3 axes, got {len(dims)}")
        if len(spacing) != len(dims) or len(origin) != len(dims):
            raise ValueError("dims, spacing, origin must have equal length")
        if any(n < 3 for n in dims):
            raise ValueError(f"every axis needs >= 3 nodes, got {dims}")
        if any(h <= 0 for h in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def shape(self):
        return self.dims

    def axis_coords(self, axis):
        """Node coordinates along one axis."""
        n, h, o = self.dims[axis], self.spacing[axis], self.origin[axis]
        return o + h * np.arange(n)

    def meshgrid(self):
        """Coordinate arrays, one per axis, each of shape ``dims``."""
        return np.meshgrid(*[self.axis_coords(a) for a in range(self.ndim)],
                           indexing="ij")

    def cell_volume(self):
        vol = 1.0
        for h in self.spacing:
            vol *= h
        return vol

    def quad_weights(self):
        """Trapezoid quadrature weights as an array of shape ``dims``."""
        w = np.ones(self.dims)
        for axis in range(self.ndim):
            wa = np.ones(self.dims[axis])
            wa[0] = wa[-1] = 0.5
            shape = [1] * self.ndim
            shape[axis] = self.dims[axis]
            w = w * wa.reshape(shape)
        return w * self.cell_volume()

    def interior(self):
        """Slice tuple selecting nodes with all neighbors on the grid."""
        return tuple(slice(1, -1) for _ in range(self.ndim))


def square_grid_2d(half_width, spacing):
    """Centered square 2D grid covering [-L, L]^2 with the given spacing.

    The node count per axis is 2*round(L/h)+1 so that the origin is a node
    and the extent is reproduced exactly.
    """
    m = int(round(half_width / spacing))
    if m * spacing != half_width:
        half_width = m * spacing
    n = 2 * m + 1
    return Grid((n, n), (spacing, spacing), (-half_width, -half_width))


@dataclass(frozen=True)
class Field:
    """Sampled field on a grid; dtype float64 (scalar) or complex128."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if np.iscomplexobj(v):
            v = np.ascontiguousarray(v, dtype=np.complex128)
        else:
            v = np.ascontiguousarray(v, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"values shape {v.shape} != grid {self.grid.shape}")
        object.__setattr__(self, "values", v)

    @property
    def is_complex(self):
        return np.iscomplexobj(self.values)

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("field contains non-finite samples")
        return self


def scalar_field(grid, values=None):
    if values is None:
        values = np.zeros(grid.shape)
    return Field(grid, np.asarray(values, dtype=np.float64))


def complex_field(grid, values=None):
    if values is None:
        values = np.zeros(grid.shape, dtype=np.complex128)
    return Field(grid, np.asarray(values, dtype=np.complex128))


@dataclass(frozen=True)
class GaugePotential:
    """Real gauge potential: one component per spatial axis, shared grid."""

    grid: Grid
    components: tuple

    def __post_init__(self):
        comps = tuple(np.ascontiguousarray(c, dtype=np.float64)
                      for c in self.components)
        if len(comps) != self.grid.ndim:
            raise ValueError("need one component per grid axis")
        for c in comps:
            if c.shape != self.grid.shape:
                raise ValueError("component shape mismatch with grid")
        object.__setattr__(self, "components", comps)

    @classmethod
    def zero(cls, grid):
        return cls(grid, tuple(np.zeros(grid.shape) for _ in range(grid.ndim)))


# ---------------------------------------------------------------------------
# discrete operators (arrays in, arrays out; Field wrappers below)
# ---------------------------------------------------------------------------

def _shift_slices(ndim, axis, off):
    src = [slice(None)] * ndim
    src[axis] = slice(1 + off, None) if off > 0 else slice(None, -1 + off)
    return tuple(src)


def centered_diff(values, axis, h):
    """Centered first difference; boundary layers of the result are zero."""
    out = np.zeros_like(values)
    sl_int = [slice(None)] * values.ndim
    sl_int[axis] = slice(1, -1)
    sl_p = [slice(None)] * values.ndim
    sl_p[axis] = slice(2, None)
    sl_m = [slice(None)] * values.ndim
    sl_m[axis] = slice(None, -2)
    out[tuple(sl_int)] = (values[tuple(sl_p)] - values[tuple(sl_m)]) / (2.0 * h)
    return out


def second_diff(values, axis, h):
    """Centered second difference; boundary layers of the result are zero."""
    out = np.zeros_like(values)
    sl_int = [slice(None)] * values.ndim
    sl_int[axis] = slice(1, -1)
    sl_p = [slice(None)] * values.ndim
    sl_p[axis] = slice(2, None)
    sl_m = [slice(None)] * values.ndim
    sl_m[axis] = slice(None, -2)
    out[tuple(sl_int)] = (values[tuple(sl_p)] - 2.0 * values[tuple(sl_int)]
                          + values[tuple(sl_m)]) / (h * h)
    return out


def laplacian_values(values, grid):
    """Standard 3/5/7-point Laplacian on interior nodes, zero on the boundary."""
    out = np.zeros_like(values)
    for axis in range(grid.ndim):
        out += second_diff(values, axis, grid.spacing[axis])
    # zero any face where a perpendicular axis touched its boundary
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    out[~mask] = 0.0
    return out


def wide_laplacian_values(values, grid):
    """Composition of centered first differences, div(grad) with 2h stencils.

    Used where an operator must be the exact transpose-square of
    ``centered_diff`` (e.g. so a gauge-fix residual cancels to solver
    tolerance rather than to O(h^2)).
    """
    out = np.zeros_like(values)
    for axis in range(grid.ndim):
        g = centered_diff(values, axis, grid.spacing[axis])
        out += centered_diff(g, axis, grid.spacing[axis])
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    out[~mask] = 0.0
    return out


def laplacian(f: Field) -> Field:
    return Field(f.grid, laplacian_values(f.values, f.grid))


def gradient(f: Field):
    """Centered gradient, one Field per axis."""
    return tuple(Field(f.grid, centered_diff(f.values, a, f.grid.spacing[a]))
                 for a in range(f.grid.ndim))


def covariant_derivative(phi: Field, alpha: GaugePotential, axis) -> Field:
    """D_axis phi = centered d_axis phi - i alpha_axis phi."""
    if phi.grid != alpha.grid:
        raise ValueError("phi and alpha live on different grids")
    if not 0 <= axis < phi.grid.ndim:
        raise ValueError(f"axis {axis} out of range for {phi.grid.ndim}D grid")
    d = centered_diff(phi.values.astype(np.complex128), axis,
                      phi.grid.spacing[axis])
    return Field(phi.grid, d - 1j * alpha.components[axis] * phi.values)


def field_strength_component(alpha: GaugePotential, i, j) -> Field:
    """F_ij = d_i alpha_j - d_j alpha_i with centered differences."""
    g = alpha.grid
    v = (centered_diff(alpha.components[j], i, g.spacing[i])
         - centered_diff(alpha.components[i], j, g.spacing[j]))
    return Field(g, v)


def field_strength(alpha: GaugePotential):
    """All curl components: F_12 in 2D; (F_12, F_13, F_23) in 3D."""
    nd = alpha.grid.ndim
    if nd < 2:
        raise ValueError("field strength needs at least 2 axes")
    pairs = [(0, 1)] if nd == 2 else [(0, 1), (0, 2), (1, 2)]
    comps = tuple(field_strength_component(alpha, i, j) for i, j in pairs)
    return comps[0] if nd == 2 else comps


def _pair_values(a, b):
    """Pointwise real pairing (a,b) = Re(a conj(b)); plain product if real."""
    if np.iscomplexobj(a) or np.iscomplexobj(b):
        return (a * np.conj(b)).real
    return a * b


def integrate(values, grid):
    """Trapezoid quadrature of a sample array."""
    return float(np.sum(values * grid.quad_weights()))


def inner_l2(a: Field, b: Field) -> float:
    if a.grid != b.grid:
        raise ValueError("inner product of fields on different grids")
    return integrate(_pair_values(a.values, b.values), a.grid)


def norm_l2(f: Field) -> float:
    return np.sqrt(max(inner_l2(f, f), 0.0))


def norm_h1(f: Field) -> float:
    s = inner_l2(f, f)
    for a in range(f.grid.ndim):
        g = centered_diff(f.values, a, f.grid.spacing[a])
        s += integrate(_pair_values(g, g), f.grid)
    return np.sqrt(max(s, 0.0))


def norm_linf(f: Field) -> float:
    return float(np.max(np.abs(f.values)))


# ---------------------------------------------------------------------------
# snapshot format
# ---------------------------------------------------------------------------

def write_snapshot(path, fields, extra_header=None):
    """Write named fields sharing one grid to the binary snapshot format.

    Layout: 8-byte magic, 4-byte little-endian header length, UTF-8 JSON
    header, then raw little-endian float64 payload (complex interleaved),
    row-major, fields in header order.
    """
    items = list(fields.items())
    if not items:
        raise ValueError("snapshot needs at least one field")
    grid = items[0][1].grid
    for name, f in items:
        if f.grid != grid:
            raise ValueError(f"field {name!r} on a different grid")
    header = {
        "version": 1,
        "grid": {"dims": list(grid.dims), "spacing": list(grid.spacing),
                 "origin": list(grid.origin)},
        "fields": [{"name": name, "kind": "complex" if f.is_complex else "real"}
                   for name, f in items],
    }
    if extra_header:
        header.update(extra_header)
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, f in items:
            if f.is_complex:
                buf = np.empty(f.values.shape + (2,), dtype="<f8")
                buf[..., 0] = f.values.real
                buf[..., 1] = f.values.imag
                fh.write(buf.tobytes())
            else:
                fh.write(f.values.astype("<f8").tobytes())


def read_snapshot(path):
    """Read a snapshot; returns (fields dict, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"bad magic {raw[:8]!r}")
    if len(raw) < 12:
        raise SnapshotFormatError("truncated header length")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise SnapshotFormatError("truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"unreadable header: {exc}") from exc
    g = header["grid"]
    grid = Grid(tuple(g["dims"]), tuple(g["spacing"]), tuple(g["origin"]))
    n_nodes = int(np.prod(grid.dims))
    payload = raw[12 + hlen:]
    fields = {}
    off = 0
    for entry in header["fields"]:
        kind = entry["kind"]
        count = n_nodes * (2 if kind == "complex" else 1)
        nbytes = count * 8
        if off + nbytes > len(payload):
            raise SnapshotFormatError(
                f"payload for field {entry['name']!r} truncated "
                f"(need {nbytes} bytes, have {len(payload) - off})")
        flat = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        off += nbytes
        if kind == "complex":
            v = flat[0::2] + 1j * flat[1::2]
            fields[entry["name"]] = Field(grid, v.reshape(grid.shape))
        else:
            fields[entry["name"]] = Field(grid, flat.reshape(grid.shape).copy())
    if off != len(payload):
        raise SnapshotFormatError(
            f"payload length mismatch: header declares {off} bytes, "
            f"file carries {len(payload)}")
    return fields, header
