"""Multi-agent wake-steering environment with a greedy baseline twin.

Each environment runs two farms on the same turbulence box: the agent farm,
whose yaw follows the agents' commands, and a baseline farm held at zero yaw.
All agents share one reward: the relative farm power gain over the baseline,
penalised when the max-to-max DEL increase exceeds the allowed margin.
"""
from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from windsteer import ConfigError
from windsteer.loads import DelWindow, SurrogateNet, constraint_delta
from windsteer.turbwind.farm import FarmLayout, FarmModel, WakeParams
from windsteer.turbwind.turbulence import (
    BoxDims, InflowSpec, TurbulenceBox, box_filename, generate_turbulence_box, load_box,
)

REWARD_FLOOR = -10.0
OBS_DIM = 8
OBS_NAMES = ("ws_global", "wd_global", "ws_local", "ws_local_mean", "wd_local",
             "wd_local_mean", "yaw", "yaw_mean")
WS_SCALE = 1.0 / 15.0
ANGLE_SCALE = 1.0 / 30.0
REFERENCE_WD = 270.0


@dataclass(frozen=True)
class RewardComponents:
    r_power: float
    r_constraint: float
    r_total: float
    delta: float
    delta_max: float | None
    alpha: float

    @property
    def penalty_active(self) -> bool:
        return self.r_constraint < 0.0


def shaped_reward(p_agent: float, p_baseline: float, delta: float,
                  delta_max: float | None, alpha: float = 1.0) -> RewardComponents:
    """Power-ratio reward with a linear penalty above ``delta_max``, floored at -10.

    ``delta_max=None`` is the unconstrained setting.
    """
    r_power = p_agent / p_baseline - 1.0
    if delta_max is not None and delta > delta_max:
        r_constraint = alpha * (delta_max - delta)
    else:
        r_constraint = 0.0
    r_total = max(r_power + r_constraint, REWARD_FLOOR)
    return RewardComponents(r_power, r_constraint, r_total, delta, delta_max, alpha)


class BoxPool:
    """Turbulence boxes addressed by id, loaded from a directory or synthesised on demand."""

    def __init__(self, ids, directory=None, spec: InflowSpec = InflowSpec(),
                 dims: BoxDims = BoxDims(), cache_size: int = 16):
        self.ids = [int(i) for i in ids]
        self.directory = None if directory is None else Path(directory)
        self.spec = spec
        self.dims = dims
        self.cache_size = cache_size
        self._cache: dict[int, TurbulenceBox] = {}

    @classmethod
    def from_directory(cls, directory, **kw) -> "BoxPool":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"turbulence pool directory not found: {directory}")
        ids = sorted(int(p.stem.split("_")[1]) for p in directory.glob("box_*.tbox"))
        if not ids:
            raise FileNotFoundError(f"no turbulence boxes in {directory}")
        return cls(ids, directory, **kw)

    def __contains__(self, box_id) -> bool:
        return int(box_id) in self.ids

    def __len__(self):
        return len(self.ids)

    def get(self, box_id: int) -> TurbulenceBox:
        box_id = int(box_id)
        if box_id in self._cache:
            return self._cache[box_id]
        if self.directory is not None:
            path = self.directory / box_filename(box_id)
            if not path.exists():
                raise FileNotFoundError(f"turbulence box file not found: {path}")
            box = load_box(path)
        else:
            box = generate_turbulence_box(box_id, self.spec, self.dims)
        if len(self._cache) >= self.cache_size:
            self._cache.pop(next(iter(self._cache)))
        self._cache[box_id] = box
        return box


class BoxSampler:
    """Draws pool ids without replacement; reshuffles once the pool is exhausted."""

    def __init__(self, ids, seed: int):
        self.ids = list(ids)
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def draw(self) -> int:
        if not self._queue:
            self._queue = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
        return self._queue.pop()


@dataclass
class EnvConfig:
    delta_max: float | None = 0.2  # None: unconstrained
    alpha: float = 1.0
    n_env: int = 15
    reset_interval: int = 1500  # control steps
    dt: float = 1.0
    substeps: int = 10
    spinup: float = 200.0
    power_window: float = 120.0
    obs_window: float = 120.0
    del_window: float = 600.0
    seed: int = 0
    layout: FarmLayout = field(default_factory=FarmLayout)
    inflow: InflowSpec = field(default_factory=InflowSpec)
    wake: WakeParams = field(default_factory=WakeParams)

    def __post_init__(self):
        if self.delta_max is not None and not self.delta_max > 0:
            raise ConfigError(f"delta_max must be positive, got {self.delta_max}",
                              "constraint.delta_max")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", "constraint.alpha")
        if self.n_env < 1:
            raise ConfigError("n_env must be at least 1", "training.n_env")
        if self.reset_interval < 1:
            raise ConfigError("reset_interval must be at least 1", "training.reset_interval")
        if not self.dt > 0:
            raise ConfigError("dt must be positive", "farm.dt")
        if self.substeps < 1:
            raise ConfigError("substeps must be at least 1", "farm.substeps")

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps


def _steps(seconds: float, dt: float) -> int:
    return max(1, int(round(seconds / dt)))


class WindFarmEnv:
    """One agent farm plus its zero-yaw baseline twin on a shared turbulence box."""

    def __init__(self, cfg: EnvConfig, surrogate: SurrogateNet, box: TurbulenceBox | None = None):
        self.cfg = cfg
        self.surrogate = surrogate
        self.model = FarmModel(cfg.layout, cfg.inflow, cfg.wake)
        self.n = cfg.layout.n_turbines
        self.box = box
        n_ctrl = _steps(cfg.del_window, cfg.control_dt)
        self.window_agent = DelWindow(self.n, n_ctrl)
        self.window_base = DelWindow(self.n, n_ctrl)
        self.agent = self.base = None
        self.step_count = 0
        self.last_reward: RewardComponents | None = None
        self.dels_agent = self.dels_base = None
        self.on_substep = None  # optional callback(env) after each physics step

    # -- internals -------------------------------------------------------

    def _wd_local(self, hub_wind):
        return -np.degrees(np.arctan2(hub_wind[:, 1], hub_wind[:, 0]))

    def _physics(self, yaw_command):
        cfg = self.cfg
        zero = np.zeros(self.n)
        for _ in range(cfg.substeps):
            self.agent = self.model.step(self.agent, self.box, cfg.dt, yaw_command)
            self.base = self.model.step(self.base, self.box, cfg.dt, zero,
                                        free_u=self.agent.free_u)
            self.p_agent.append(float(self.agent.power.sum()))
            self.p_base.append(float(self.base.power.sum()))
            self.ws_hist.append(self.agent.speeds.mean(axis=(1, 2)))
            self.wd_hist.append(self._wd_local(self.agent.hub_wind))
            self.yaw_hist.append(self.agent.yaw.copy())
            if self.on_substep is not None:
                self.on_substep(self)
        self.window_agent.push(self.agent.speeds, self.agent.yaw)
        self.window_base.push(self.base.speeds, self.base.yaw)

    def _observe(self) -> np.ndarray:
        ws = self.agent.speeds.mean(axis=(1, 2))
        wd = self._wd_local(self.agent.hub_wind)
        ws_mean = np.mean(np.array(self.ws_hist), axis=0)
        wd_mean = np.mean(np.array(self.wd_hist), axis=0)
        yaw_mean = np.mean(np.array(self.yaw_hist), axis=0)
        obs = np.empty((self.n, OBS_DIM))
        obs[:, 0] = ws.mean() * WS_SCALE
        obs[:, 1] = wd.mean() * ANGLE_SCALE
        obs[:, 2] = ws * WS_SCALE
        obs[:, 3] = ws_mean * WS_SCALE
        obs[:, 4] = wd * ANGLE_SCALE
        obs[:, 5] = wd_mean * ANGLE_SCALE
        obs[:, 6] = self.agent.yaw * ANGLE_SCALE
        obs[:, 7] = yaw_mean * ANGLE_SCALE
        return obs

    def _evaluate_loads(self):
        self.dels_agent = self.surrogate.predict(self.window_agent.features())
        self.dels_base = self.surrogate.predict(self.window_base.features())
        return constraint_delta(self.dels_agent, self.dels_base)

    # -- public API ------------------------------------------------------

    def reset(self, box: TurbulenceBox | None = None) -> np.ndarray:
        """Zero all yaws, clear wakes and windows, spin up, return per-agent observations."""
        if box is not None:
            self.box = box
        if self.box is None:
            raise ValueError("no turbulence box assigned")
        cfg = self.cfg
        self.agent = self.model.initial_state()
        self.base = self.model.initial_state()
        n_pow = _steps(cfg.power_window, cfg.dt)
        n_obs = _steps(cfg.obs_window, cfg.dt)
        self.p_agent = deque(maxlen=n_pow)
        self.p_base = deque(maxlen=n_pow)
        self.ws_hist = deque(maxlen=n_obs)
        self.wd_hist = deque(maxlen=n_obs)
        self.yaw_hist = deque(maxlen=n_obs)
        self.window_agent.clear()
        self.window_base.clear()
        for _ in range(_steps(cfg.spinup, cfg.control_dt)):
            self._physics(np.zeros(self.n))
        self._evaluate_loads()
        self.step_count = 0
        return self._observe()

    def step(self, actions):
        """Apply yaw commands (deg) for one control interval.

        Returns ``(observations, reward_components, truncated)``.
        """
        actions = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.n), -30.0, 30.0)
        self._physics(actions)
        delta = self._evaluate_loads()
        cfg = self.cfg
        self.last_reward = shaped_reward(np.mean(self.p_agent), np.mean(self.p_base), delta,
                                         cfg.delta_max, cfg.alpha)
        self.step_count += 1
        truncated = self.step_count % cfg.reset_interval == 0
        return self._observe(), self.last_reward, truncated

    @property
    def t(self) -> float:
        return self.agent.t


class EnvError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"environment {index}: {cause}")
        self.index = index


def thread_count() -> int:
    """Stepping threads from WINDSTEER_THREADS; 0 (default) is deterministic single-threaded mode."""
    raw = os.environ.get("WINDSTEER_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"WINDSTEER_THREADS must be an integer, got {raw!r}", "WINDSTEER_THREADS")
    if n < 0:
        raise ConfigError("WINDSTEER_THREADS must be non-negative", "WINDSTEER_THREADS")
    return n


@dataclass
class VecTransition:
    obs: np.ndarray  # (n_env, n_agents, 8)
    actions: np.ndarray  # (n_env, n_agents)
    rewards: list  # RewardComponents per env
    next_obs: np.ndarray
    truncated: np.ndarray  # (n_env,) bool


class VecEnv:
    """``n_env`` environments stepped in lockstep; boxes drawn from a shared sampler."""

    def __init__(self, cfg: EnvConfig, surrogate: SurrogateNet, pool: BoxPool,
                 threads: int | None = None, box_ids=None):
        self.cfg = cfg
        self.pool = pool
        self.sampler = BoxSampler(pool.ids, cfg.seed)
        self.envs = [WindFarmEnv(cfg, surrogate) for _ in range(cfg.n_env)]
        self.threads = thread_count() if threads is None else threads
        self._fixed_ids = box_ids
        self.box_ids = [None] * cfg.n_env
        self.obs = None

    def _map(self, fn, items):
        if self.threads <= 0 or len(items) == 1:
            results = []
            for i, item in enumerate(items):
                try:
                    results.append(fn(i, item))
                except Exception as exc:
                    raise EnvError(i, exc) from exc
            return results
        with ThreadPoolExecutor(max_workers=self.threads) as ex:
            futures = [ex.submit(fn, i, item) for i, item in enumerate(items)]
            results = []
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise EnvError(i, exc) from exc
            return results

    def _next_box(self, i):
        box_id = self._fixed_ids[i] if self._fixed_ids is not None else self.sampler.draw()
        self.box_ids[i] = box_id
        return self.pool.get(box_id)

    def reset(self) -> np.ndarray:
        boxes = [self._next_box(i) for i in range(len(self.envs))]
        self.obs = np.stack(self._map(lambda i, b: self.envs[i].reset(b), boxes))
        return self.obs

    def step(self, actions) -> VecTransition:
        """Step every environment; truncated members are reset after their transition is recorded."""
        actions = np.asarray(actions, dtype=np.float64)
        results = self._map(lambda i, a: self.envs[i].step(a), list(actions))
        next_obs = np.stack([r[0] for r in results])
        rewards = [r[1] for r in results]
        truncated = np.array([r[2] for r in results])
        tr = VecTransition(self.obs, actions, rewards, next_obs, truncated)
        obs = next_obs.copy()
        reset_idx = [i for i in range(len(self.envs)) if truncated[i]]
        if reset_idx:
            boxes = [self._next_box(i) for i in reset_idx]
            fresh = self._map(lambda k, b: self.envs[reset_idx[k]].reset(b), boxes)
            for k, i in enumerate(reset_idx):
                obs[i] = fresh[k]
        self.obs = obs
        return tr


def vec_env_step(vec: VecEnv, all_env_actions) -> VecTransition:
    return vec.step(all_env_actions)
