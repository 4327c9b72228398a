"""Frozen-turbulence boxes.

Boxes are synthesised spectrally: complex white noise in wavenumber space is
shaped by a Kaimal-type spectrum for each velocity component, transformed back
with an inverse FFT and rescaled so the streamwise component has exactly the
requested standard deviation. Components are mutually uncorrelated.

The field is periodic in all three directions. Along x the first plane is
repeated at the end of the lattice, so ``length_x == (nx - 1) * dx`` and the
box wraps seamlessly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from windsteer import ConfigError

BOX_MAGIC = b"TBOX"
BOX_VERSION = 1
_HEADER = struct.Struct("<4sI3I3ddQ")

# IEC Kaimal ratios: sigma_v / sigma_u and sigma_w / sigma_u, and integral
# length scales as multiples of the turbulence scale parameter.
SIGMA_RATIOS = (1.0, 0.8, 0.5)
LENGTH_RATIOS = (8.1, 2.7, 0.66)
DEFAULT_HUB_HEIGHT = 80.0


@dataclass(frozen=True)
class InflowSpec:
    ws: float = 10.0
    wd: float = 270.0
    ti: float = 0.05

    def __post_init__(self):
        if not self.ws > 0:
            raise ConfigError(f"ws must be positive, got {self.ws}", "inflow.ws")
        if not 0 <= self.wd < 360:
            raise ConfigError(f"wd must lie in [0, 360), got {self.wd}", "inflow.wd")
        if not 0 <= self.ti < 1:
            raise ConfigError(f"ti must lie in [0, 1), got {self.ti}", "inflow.ti")

    @property
    def sigma_u(self) -> float:
        return self.ti * self.ws


@dataclass(frozen=True)
class BoxDims:
    nx: int = 1024
    ny: int = 16
    nz: int = 16
    dx: float = 12.0
    dy: float = 10.0
    dz: float = 10.0
    # turbulence scale parameter, m (IEC: 0.7 * min(hub height, 60))
    scale: float = 42.0

    @property
    def length_x(self) -> float:
        return (self.nx - 1) * self.dx


@dataclass(eq=False)
class TurbulenceBox:
    id: int
    grid: np.ndarray  # (3, nx, ny, nz)
    dx: float
    dy: float
    dz: float
    sigma_u: float
    # lattice origin in farm coordinates; defaults centre the box on y = 0
    # and the default hub height
    y0: float | None = None
    z0: float | None = None

    def __post_init__(self):
        self.grid.setflags(write=False)
        _, _, ny, nz = self.grid.shape
        if self.y0 is None:
            self.y0 = -0.5 * ny * self.dy
        if self.z0 is None:
            self.z0 = DEFAULT_HUB_HEIGHT - 0.5 * nz * self.dz

    @property
    def shape(self):
        return self.grid.shape[1:]

    @property
    def length_x(self) -> float:
        return (self.grid.shape[1] - 1) * self.dx

    def centred(self, y_centre: float, z_centre: float) -> "TurbulenceBox":
        """Return a view of this box whose lateral/vertical midpoint sits at the given coordinates."""
        _, ny, nz = self.shape
        return TurbulenceBox(self.id, self.grid, self.dx, self.dy, self.dz, self.sigma_u,
                             y0=y_centre - 0.5 * ny * self.dy,
                             z0=z_centre - 0.5 * nz * self.dz)


def kaimal_amplitude(k: np.ndarray, length: float) -> np.ndarray:
    """Square root of the Kaimal spectral shape evaluated at wavenumber magnitude ``k`` (rad/m)."""
    return np.sqrt(length / (1.0 + 6.0 * k * length / (2.0 * np.pi)) ** (5.0 / 3.0))


def required_length(farm_extent: float, ws: float, horizon: float | None, wrap: bool) -> float:
    """Minimum streamwise box length for a simulation of ``horizon`` seconds."""
    if wrap or horizon is None:
        return farm_extent
    return farm_extent + horizon * ws


def generate_turbulence_box(id: int, spec: InflowSpec, dims: BoxDims = BoxDims(), *,
                            farm_extent: float = 0.0, horizon: float | None = None,
                            wrap: bool = True) -> TurbulenceBox:
    """Synthesise a turbulence box seeded by ``id``.

    Parameters
    ----------
    id : int
        Seed identifier; identical ids and parameters give bit-identical grids.
    spec : InflowSpec
        Sets the streamwise fluctuation target ``sigma_u = ti * ws``.
    dims : BoxDims
        Lattice size and spacing.
    farm_extent, horizon, wrap
        Used to check the box is long enough. With ``wrap=False`` the box must
        hold ``horizon * ws`` metres of advected flow on top of the farm.
    """
    need = required_length(farm_extent, spec.ws, horizon, wrap)
    if dims.length_x < need:
        raise ConfigError(
            f"turbulence box length {dims.length_x:.0f} m is below the required minimum "
            f"{need:.0f} m", "turbulence.nx")
    sigma_u = spec.sigma_u
    n = dims.nx - 1
    shape = (n, dims.ny, dims.nz)
    grid = np.zeros((3,) + (dims.nx, dims.ny, dims.nz))
    if sigma_u == 0.0:
        return TurbulenceBox(int(id), grid, dims.dx, dims.dy, dims.dz, 0.0)

    kx = 2 * np.pi * np.fft.fftfreq(n, dims.dx)
    ky = 2 * np.pi * np.fft.fftfreq(dims.ny, dims.dy)
    kz = 2 * np.pi * np.fft.rfftfreq(dims.nz, dims.dz)
    kmag = np.sqrt(kx[:, None, None] ** 2 + ky[None, :, None] ** 2 + kz[None, None, :] ** 2)

    rng = np.random.default_rng(np.random.SeedSequence([int(id), 0x7B0C]))
    for c in range(3):
        amp = kaimal_amplitude(kmag, LENGTH_RATIOS[c] * dims.scale)
        amp[0, 0, 0] = 0.0
        noise = rng.standard_normal(kmag.shape) + 1j * rng.standard_normal(kmag.shape)
        field_c = np.fft.irfftn(amp * noise, s=shape, axes=(0, 1, 2))
        field_c -= field_c.mean()
        field_c *= SIGMA_RATIOS[c] * sigma_u / field_c.std()
        grid[c, :n] = field_c
        grid[c, n] = field_c[0]
    # stored at f32 precision so a saved box reloads bit-identically
    grid = grid.astype(np.float32).astype(np.float64)
    return TurbulenceBox(int(id), grid, dims.dx, dims.dy, dims.dz, sigma_u)


def sample_fluctuation(box: TurbulenceBox, xi, y, z, components=(0, 1, 2)) -> np.ndarray:
    """Trilinear interpolation of the fluctuation field at box coordinates.

    ``xi`` is the box-frame streamwise coordinate, wrapped with period
    ``length_x``; ``y`` and ``z`` wrap with the lateral/vertical box size.
    Returns an array of shape ``(len(components),) + broadcast shape``.
    """
    xi, y, z = np.broadcast_arrays(np.asarray(xi, float), np.asarray(y, float),
                                   np.asarray(z, float))
    shape = xi.shape
    _, nx, ny, nz = box.grid.shape
    sx = np.mod(xi.ravel(), box.length_x) / box.dx
    sy = (y.ravel() - box.y0) / box.dy
    sz = (z.ravel() - box.z0) / box.dz
    i0 = np.minimum(np.floor(sx), nx - 2)
    j0 = np.floor(sy)
    k0 = np.floor(sz)
    wx, wy, wz = sx - i0, sy - j0, sz - k0
    i0 = i0.astype(np.intp)
    j0 = j0.astype(np.intp) % ny
    k0 = k0.astype(np.intp) % nz
    j1 = (j0 + 1) % ny
    k1 = (k0 + 1) % nz
    ix = (i0 * ny, (i0 + 1) * ny)
    idx = np.empty((8, sx.size), dtype=np.intp)
    wts = np.empty((8, sx.size))
    n = 0
    for a, wa in ((0, 1 - wx), (1, wx)):
        for jj, wb in ((j0, 1 - wy), (j1, wy)):
            for kk, wc in ((k0, 1 - wz), (k1, wz)):
                idx[n] = (ix[a] + jj) * nz + kk
                wts[n] = wa * wb * wc
                n += 1
    flat = box.grid.reshape(3, -1)
    out = np.empty((len(components), sx.size))
    for n, c in enumerate(components):
        out[n] = (flat[c].take(idx) * wts).sum(axis=0)
    return out.reshape((len(components),) + shape)


def advected_coordinate(x, ws: float, t: float):
    """Box-frame streamwise coordinate of physical ``x`` at time ``t`` (Taylor's hypothesis)."""
    return np.asarray(x, float) - ws * t


def freestream_at(box: TurbulenceBox, spec: InflowSpec, t: float, point) -> np.ndarray:
    """Undisturbed wind vector (u, v, w) in m/s at ``point = (x, y, z)`` and time ``t``.

    The fluctuation field is frozen and convected downstream at the mean wind
    speed, so the flow seen at ``(x, t)`` reappears at ``(x + ws*dt, t + dt)``.
    """
    x, y, z = point
    fl = sample_fluctuation(box, advected_coordinate(x, spec.ws, t), y, z)
    fl[0] += spec.ws
    return fl


def save_box(box: TurbulenceBox, path) -> None:
    _, nx, ny, nz = box.grid.shape
    header = _HEADER.pack(BOX_MAGIC, BOX_VERSION, nx, ny, nz, box.dx, box.dy, box.dz,
                          box.sigma_u, box.id)
    data = np.ascontiguousarray(box.grid, dtype="<f4")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))
    tmp.replace(path)


def load_box(path) -> TurbulenceBox:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise OSError(f"{path}: truncated turbulence box header")
    magic, version, nx, ny, nz, dx, dy, dz, sigma_u, box_id = _HEADER.unpack_from(raw)
    if magic != BOX_MAGIC:
        raise OSError(f"{path}: not a turbulence box (magic {magic!r})")
    if version != BOX_VERSION:
        raise OSError(f"{path}: unsupported box format version {version}")
    count = 3 * nx * ny * nz
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    grid = data.reshape(3, nx, ny, nz).astype(np.float64)
    return TurbulenceBox(int(box_id), grid, dx, dy, dz, sigma_u)


def box_filename(box_id: int) -> str:
    return f"box_{box_id:04d}.tbox"
