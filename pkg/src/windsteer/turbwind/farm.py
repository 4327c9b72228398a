"""DWM-lite: a dynamic Gaussian-wake farm simulator.

Every physics step each turbine emits a wake packet recording its thrust and
yaw. Packets drift downstream with the local (low-pass filtered) wind and
wander laterally with the filtered transverse fluctuation. The wake seen by a
downstream rotor is reconstructed by interpolating the two packets that
straddle the rotor plane, so control changes reach downstream turbines after
the physical advection delay. Deficits are self-similar Gaussians with
Jimenez-type deflection; overlapping wakes combine in root-sum-square.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from windsteer import ConfigError
from windsteer.turbwind.turbulence import InflowSpec, TurbulenceBox, sample_fluctuation

YAW_LIMIT = 30.0
YAW_RATE = 0.25  # deg/s

SECTORS = ("left", "right", "top", "bottom")
# Sensor layout: 3 radii x 5 azimuths per sector. Azimuth is measured in the
# rotor plane from +y (left, looking downstream) towards +z (top).
SENSOR_RADII = np.array([0.40, 0.65, 0.90])  # fraction of rotor radius
SENSOR_AZIMUTH_OFFSETS = np.array([-36.0, -18.0, 0.0, 18.0, 36.0])  # deg
SECTOR_CENTRES = {"left": 0.0, "right": 180.0, "top": 90.0, "bottom": 270.0}


def _sensor_unit_coords():
    ys, zs = [], []
    for name in SECTORS:
        phi = np.deg2rad(SECTOR_CENTRES[name] + SENSOR_AZIMUTH_OFFSETS)
        r, p = np.meshgrid(SENSOR_RADII, phi, indexing="ij")
        ys.append((r * np.cos(p)).ravel())
        zs.append((r * np.sin(p)).ravel())
    return np.array(ys), np.array(zs)


# (4, 15) offsets in units of rotor radius
SENSOR_DY, SENSOR_DZ = _sensor_unit_coords()


@dataclass(frozen=True)
class FarmLayout:
    n_turbines: int = 3
    rotor_diameter: float = 93.0
    hub_height: float = 80.0
    positions: tuple = ()
    rated_power: float = 2.3e6
    cp: float = 0.48
    rho: float = 1.225
    power_exponent: float = 1.88
    ct: float = 0.8
    spacing: float = 6.0  # rotor diameters, used when positions is empty

    def __post_init__(self):
        if self.n_turbines < 1:
            raise ConfigError("n_turbines must be at least 1", "farm.n_turbines")
        if self.rotor_diameter <= 0:
            raise ConfigError("rotor_diameter must be positive", "farm.rotor_diameter")
        if not self.positions:
            step = self.spacing * self.rotor_diameter
            pos = tuple((i * step, 0.0) for i in range(self.n_turbines))
            object.__setattr__(self, "positions", pos)
        pos = np.asarray(self.positions, float)
        if pos.shape != (self.n_turbines, 2):
            raise ConfigError("positions must hold one (x, y) pair per turbine", "farm.positions")
        if np.any(np.diff(pos[:, 0]) <= 0):
            raise ConfigError("turbine x positions must be strictly increasing", "farm.positions")

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.positions])

    @property
    def y(self) -> np.ndarray:
        return np.array([p[1] for p in self.positions])

    @property
    def radius(self) -> float:
        return 0.5 * self.rotor_diameter

    @property
    def area(self) -> float:
        return np.pi * self.radius ** 2

    def ct_at(self, yaw):
        return self.ct * np.cos(np.deg2rad(yaw)) ** 2


@dataclass(frozen=True)
class WakeParams:
    k_ti: float = 0.38
    k_0: float = 0.004
    sigma_0: float = 0.25  # initial wake width, rotor diameters
    deflection: float = 0.3
    meander_tau: float = 30.0  # s
    exit_margin: float = 2.0  # rotor diameters past the last turbine
    # Ambient TI used for wake growth. None follows the inflow TI; set it to
    # keep realistic wake growth in zero-fluctuation runs.
    expansion_ti: float | None = None

    def expansion_rate(self, ti: float) -> float:
        if self.expansion_ti is not None:
            ti = self.expansion_ti
        return self.k_ti * ti + self.k_0


def wake_width(dist, k: float, wake: WakeParams, D: float):
    """Gaussian wake standard deviation in metres at ``dist`` metres downstream."""
    return D * (k * np.asarray(dist) / D + wake.sigma_0)


def wake_amplitude(dist, ct, yaw, k: float, wake: WakeParams, D: float):
    """Centreline velocity deficit as a fraction of the free wind speed."""
    s = wake_width(dist, k, wake, D) / D
    arg = 1.0 - ct * np.cos(np.deg2rad(yaw)) / (8.0 * s * s)
    return 1.0 - np.sqrt(np.maximum(arg, 0.0))


def wake_deflection(dist, ct, yaw, k: float, wake: WakeParams, D: float):
    """Lateral wake-centre displacement (m). Positive yaw deflects towards +y.

    The skew angle leaving the rotor decays as (D / D_w)^2 with the wake
    diameter D_w = D (1 + 2 k x / D); integrated analytically.
    """
    g = np.deg2rad(yaw)
    theta0 = wake.deflection * ct * np.sin(g) * np.cos(g) ** 2
    dist = np.asarray(dist)
    return theta0 * dist / (1.0 + 2.0 * k * dist / D)


def gaussian_deficit(dy, dz, dist, ct, yaw, k, wake: WakeParams, D: float):
    """Deficit fraction at rotor-plane offsets ``(dy, dz)`` from the undeflected wake axis."""
    sig = wake_width(dist, k, wake, D)
    c = wake_amplitude(dist, ct, yaw, k, wake, D)
    yc = wake_deflection(dist, ct, yaw, k, wake, D)
    return c * np.exp(-((dy - yc) ** 2 + dz ** 2) / (2.0 * sig * sig))


def turbine_power(u_eff, yaw, layout: FarmLayout):
    """Electrical power in W: ``min(rated, 0.5 rho A Cp u^3 cos(yaw)^p)``."""
    u = np.maximum(np.asarray(u_eff, float), 0.0)
    cos_term = np.cos(np.deg2rad(yaw)) ** layout.power_exponent
    p = 0.5 * layout.rho * layout.area * layout.cp * u ** 3 * cos_term
    return np.minimum(p, layout.rated_power)


def apply_yaw_command(current, command, dt_control: float):
    """Move yaw towards ``command`` at no more than 0.25 deg/s, staying within +-30 deg."""
    command = np.clip(command, -YAW_LIMIT, YAW_LIMIT)
    step = YAW_RATE * dt_control
    return np.clip(current + np.clip(command - current, -step, step), -YAW_LIMIT, YAW_LIMIT)


@dataclass
class SectorSamples:
    speeds: np.ndarray  # (4, 15) streamwise speed, m/s

    @property
    def sector_mean(self) -> np.ndarray:
        return self.speeds.mean(axis=1)

    @property
    def sector_ti(self) -> np.ndarray:
        m = self.sector_mean
        with np.errstate(divide="ignore", invalid="ignore"):
            ti = np.where(m > 0, self.speeds.std(axis=1) / m, 0.0)
        return ti

    @property
    def rotor_average(self) -> float:
        return float(self.speeds.mean())


@dataclass(frozen=True)
class WakePacket:
    source: int
    emit_time: float
    strength: float
    yaw_at_emit: float
    lateral_offset: float
    x_position: float


# packet train columns
PX, PT, PCT, PYAW, POFF, PUF, PVF = range(7)


@dataclass
class FarmState:
    t: float
    yaw: np.ndarray
    speeds: np.ndarray  # (n, 4, 15) rotor sensor speeds
    trains: list  # per source turbine, (n_packets, 7) arrays, oldest first
    power: np.ndarray
    hub_filter: np.ndarray  # (n, 2) low-passed (u', v') at each hub
    hub_wind: np.ndarray  # (n, 2) instantaneous freestream (u, v) at each hub
    free_u: np.ndarray | None = None  # (n, 4, 15) undisturbed sensor speeds

    @property
    def rotor_samples(self) -> list:
        return [SectorSamples(s) for s in self.speeds]

    @property
    def rotor_average(self) -> np.ndarray:
        return self.speeds.mean(axis=(1, 2))

    @property
    def packets(self) -> list:
        out = []
        for i, tr in enumerate(self.trains):
            for row in tr:
                out.append(WakePacket(i, row[PT], row[PCT], row[PYAW], row[POFF], row[PX]))
        return out


def sensor_points(layout: FarmLayout):
    """Absolute sensor coordinates, each of shape (n_turbines, 4, 15)."""
    R = layout.radius
    x = np.broadcast_to(layout.x[:, None, None], (layout.n_turbines, 4, 15))
    y = layout.y[:, None, None] + R * SENSOR_DY[None]
    z = layout.hub_height + R * SENSOR_DZ[None]
    z = np.broadcast_to(z, y.shape)
    return x, y, z


class FarmModel:
    """Static per-farm geometry shared by every step of a simulation."""

    def __init__(self, layout: FarmLayout, spec: InflowSpec, wake: WakeParams = WakeParams()):
        self.layout = layout
        self.spec = spec
        self.wake = wake
        self.k = wake.expansion_rate(spec.ti)
        self.sx, self.sy, self.sz = sensor_points(layout)
        self.x_exit = layout.x[-1] + wake.exit_margin * layout.rotor_diameter
        # upstream pairs (source, target) with a positive streamwise distance
        self.pairs = [(s, j) for j in range(layout.n_turbines) for s in range(j)]

    def initial_state(self) -> FarmState:
        n = self.layout.n_turbines
        yaw = np.zeros(n)
        speeds = np.full((n, 4, 15), self.spec.ws)
        return FarmState(0.0, yaw, speeds, [np.empty((0, 7)) for _ in range(n)],
                         turbine_power(np.full(n, self.spec.ws), yaw, self.layout),
                         np.zeros((n, 2)), np.tile([self.spec.ws, 0.0], (n, 1)))

    def freestream_sensors(self, box: TurbulenceBox, t: float) -> np.ndarray:
        u = sample_fluctuation(box, self.sx - self.spec.ws * t, self.sy, self.sz, (0,))[0]
        return u + self.spec.ws

    def deficits(self, trains) -> np.ndarray:
        """Combined deficit fraction at every sensor, shape (n, 4, 15)."""
        lay = self.layout
        D = lay.rotor_diameter
        xs, ys = lay.x, lay.y
        total = np.zeros(self.sx.shape)
        for s, j in self.pairs:
            tr = trains[s]
            if tr.shape[0] < 2:
                continue
            # x is non-increasing along the train (oldest packet furthest downstream)
            px = tr[:, PX]
            ahead = np.count_nonzero(px >= xs[j])
            if ahead == 0 or ahead == tr.shape[0]:
                continue
            a, b = tr[ahead - 1], tr[ahead]
            w = 0.0 if a[PX] == b[PX] else (xs[j] - b[PX]) / (a[PX] - b[PX])
            row = b + w * (a - b)
            dist = xs[j] - xs[s]
            d = gaussian_deficit(self.sy[j] - ys[s] - row[POFF], self.sz[j] - lay.hub_height,
                                 dist, row[PCT], row[PYAW], self.k, self.wake, D)
            total[j] += d * d
        return np.sqrt(total)

    def static_deficits(self, yaw) -> np.ndarray:
        """Closed-form steady wake superposition for fixed yaws and no turbulence."""
        lay = self.layout
        D = lay.rotor_diameter
        yaw = np.asarray(yaw, float)
        ct = lay.ct_at(yaw)
        total = np.zeros(self.sx.shape)
        for s, j in self.pairs:
            d = gaussian_deficit(self.sy[j] - lay.y[s], self.sz[j] - lay.hub_height,
                                 lay.x[j] - lay.x[s], ct[s], yaw[s], self.k, self.wake, D)
            total[j] += d * d
        return np.sqrt(total)

    def static_power(self, yaw) -> np.ndarray:
        speeds = self.spec.ws * (1.0 - self.static_deficits(yaw))
        return turbine_power(speeds.mean(axis=(1, 2)), np.asarray(yaw, float), self.layout)

    def step(self, state: FarmState, box: TurbulenceBox, dt: float, yaw_command=None,
             free_u: np.ndarray | None = None) -> FarmState:
        """Advance one physics step. ``free_u`` may carry precomputed freestream sensor speeds."""
        lay, spec, wake = self.layout, self.spec, self.wake
        t = state.t + dt
        yaw = state.yaw if yaw_command is None else apply_yaw_command(state.yaw, yaw_command, dt)
        a = dt / wake.meander_tau
        xi_shift = spec.ws * t

        # one box lookup for hubs, every packet and (optionally) the rotor sensors
        n = lay.n_turbines
        sizes = [tr.shape[0] for tr in state.trains]
        px = [lay.x] + [tr[:, PX] for tr in state.trains]
        py = [lay.y] + [lay.y[s] + tr[:, POFF] for s, tr in enumerate(state.trains)]
        pz = [np.full(n + sum(sizes), lay.hub_height)]
        if free_u is None:
            px.append(self.sx.ravel())
            py.append(self.sy.ravel())
            pz.append(self.sz.ravel())
        fl = sample_fluctuation(box, np.concatenate(px) - xi_shift, np.concatenate(py),
                                np.concatenate(pz), (0, 1))
        hub = fl[:, :n]
        hub_filter = state.hub_filter + a * (hub.T - state.hub_filter)
        ct = lay.ct_at(yaw)

        trains = []
        off = n
        for s, tr in enumerate(state.trains):
            m = sizes[s]
            if m:
                tr = tr.copy()
                tr[:, PUF] += a * (fl[0, off:off + m] - tr[:, PUF])
                tr[:, PVF] += a * (fl[1, off:off + m] - tr[:, PVF])
                tr[:, PX] += np.maximum(spec.ws + tr[:, PUF], 0.0) * dt
                tr[:, POFF] += tr[:, PVF] * dt
                # packets may not overtake older ones
                tr[:, PX] = np.maximum.accumulate(tr[::-1, PX])[::-1]
                tr = tr[tr[:, PX] <= self.x_exit]
            off += m
            new = np.array([[lay.x[s], t, ct[s], yaw[s], 0.0, hub_filter[s, 0], hub_filter[s, 1]]])
            trains.append(np.concatenate([tr, new]) if tr.shape[0] else new)

        if free_u is None:
            free_u = fl[0, off:].reshape(self.sx.shape) + spec.ws
        speeds = np.maximum(free_u - spec.ws * self.deficits(trains), 0.0)
        power = turbine_power(speeds.mean(axis=(1, 2)), yaw, lay)
        hub_wind = np.column_stack([spec.ws + hub[0], hub[1]])
        return FarmState(t, np.array(yaw, float), speeds, trains, power, hub_filter, hub_wind,
                         free_u)


def step_physics(state: FarmState, box: TurbulenceBox, spec: InflowSpec, layout: FarmLayout,
                 dt: float, wake: WakeParams = WakeParams(), yaw_command=None) -> FarmState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return FarmModel(layout, spec, wake).step(state, box, dt, yaw_command)


def sample_rotor_sectors(state: FarmState, box: TurbulenceBox, spec: InflowSpec,
                         layout: FarmLayout, turbine: int,
                         wake: WakeParams = WakeParams()) -> SectorSamples:
    """Wake-modified streamwise speed at the 60 rotor sensors of ``turbine``."""
    if not 0 <= turbine < layout.n_turbines:
        raise IndexError(f"turbine index {turbine} out of range")
    model = FarmModel(layout, spec, wake)
    speeds = model.freestream_sensors(box, state.t) - spec.ws * model.deficits(state.trains)
    return SectorSamples(np.maximum(speeds[turbine], 0.0))


def with_yaw(state: FarmState, yaw) -> FarmState:
    return replace(state, yaw=np.clip(np.asarray(yaw, float), -YAW_LIMIT, YAW_LIMIT))
