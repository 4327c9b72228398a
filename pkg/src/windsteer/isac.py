"""Independent soft actor-critic: one SAC learner per turbine, shared global reward."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from windsteer import ConfigError
from windsteer.env import ANGLE_SCALE, OBS_DIM, WS_SCALE, BoxPool, EnvConfig, VecEnv
from windsteer.loads import SurrogateNet
from windsteer.nncore import Adam, Mlp, SquashedGaussianHead, load_mlp, save_mlp

ACTION_SCALE = 30.0


@dataclass
class TrainConfig:
    total_steps: int = 150_000  # cumulative over all environments
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    warmup: int = 1000
    updates_per_step: int = 1
    buffer_size: int = 100_000
    target_entropy: float = -1.0
    autotune: bool = True
    alpha_init: float = 0.2
    hidden: int = 64
    seed: int = 0
    log_every: int = 1  # rounds between training-log rows
    checkpoint_every: int = 0  # cumulative steps, 0 disables periodic checkpoints

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)", "training.gamma")
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]", "training.tau")
        if self.warmup < self.batch_size:
            raise ConfigError("warmup must be at least batch_size", "training.warmup")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be non-negative", "training.total_steps")
        if not self.alpha_init > 0:
            raise ConfigError("alpha_init must be positive", "training.alpha_init")


@dataclass
class Batch:
    obs: np.ndarray  # (B, 8)
    action: np.ndarray  # (B,)
    reward: np.ndarray  # (B,)
    next_obs: np.ndarray  # (B, 8)
    terminal: np.ndarray  # (B,), always 0 for truncations


class ReplayBuffer:
    """Ring buffer of joint transitions."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int = OBS_DIM, seed: int = 0):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.actions = np.zeros((capacity, n_agents))
        self.rewards = np.zeros(capacity)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, obs, actions, reward, next_obs, truncated):
        i = self.cursor
        self.obs[i] = obs
        self.actions[i] = actions
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.truncated[i] = truncated
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, n)

    def agent_batch(self, idx, agent: int) -> Batch:
        """Agent ``agent``'s view of the joint transitions at ``idx``."""
        return Batch(self.obs[idx, agent], self.actions[idx, agent], self.rewards[idx],
                     self.next_obs[idx, agent], np.zeros(len(idx)))


class AgentNets:
    """Actor, twin critics, target critics and entropy temperature for one turbine."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.head = SquashedGaussianHead(scale=ACTION_SCALE)
        self.actor = Mlp((OBS_DIM, h, h, 2), ("tanh", "tanh", "linear"), rng=rng)
        self.q1 = Mlp((OBS_DIM + 1, h, h, 1), ("relu", "relu", "linear"), rng=rng)
        self.q2 = Mlp((OBS_DIM + 1, h, h, 1), ("relu", "relu", "linear"), rng=rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = np.array([math.log(cfg.alpha_init)])
        self.actor_opt = Adam(lr=cfg.actor_lr)
        self.q_opt = Adam(lr=cfg.critic_lr)
        self.alpha_opt = Adam(lr=cfg.alpha_lr)
        self.rng = rng

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    def policy(self, obs, eps=None):
        """Squashed-Gaussian sample for each row of ``obs``; returns (action, log_prob, aux)."""
        out, cache = self.actor.forward(obs, return_cache=True)
        mean, raw = out[:, 0], out[:, 1]
        if eps is None:
            eps = self.rng.standard_normal(mean.shape)
        a, logp, u, log_std = self.head.sample(mean, raw, eps)
        return a, logp, (cache, u, eps, log_std, raw)

    def act(self, obs, deterministic=False):
        obs = np.atleast_2d(obs)
        out = self.actor.forward(obs)
        if deterministic:
            return self.head.squash(out[:, 0])
        eps = self.rng.standard_normal(out.shape[0])
        return self.head.sample(out[:, 0], out[:, 1], eps)[0]


def critic_input(obs, action):
    return np.concatenate([obs, (np.asarray(action) / ACTION_SCALE)[:, None]], axis=1)


def bellman_target(agent: AgentNets, batch: Batch, gamma: float, alpha: float, eps=None):
    a_next, logp_next, _ = agent.policy(batch.next_obs, eps)
    x = critic_input(batch.next_obs, a_next)
    q_next = np.minimum(agent.q1_target.forward(x)[:, 0], agent.q2_target.forward(x)[:, 0])
    return batch.reward + gamma * (1.0 - batch.terminal) * (q_next - alpha * logp_next)


def critic_update(agent: AgentNets, batch: Batch, gamma: float, alpha: float, eps=None,
                  apply: bool = True):
    """One squared-error regression step of both critics; returns (loss1, loss2)."""
    y = bellman_target(agent, batch, gamma, alpha, eps)
    x = critic_input(batch.obs, batch.action)
    n = len(y)
    losses, grads = [], []
    for q in (agent.q1, agent.q2):
        pred, cache = q.forward(x, return_cache=True)
        err = pred[:, 0] - y
        losses.append(float(np.mean(err * err)))
        g, _ = q.backward(cache, (2.0 * err / n)[:, None])
        grads.extend(g)
    if apply:
        agent.q_opt.step(agent.q1.params + agent.q2.params, grads)
    return losses[0], losses[1]


def actor_loss_and_grads(agent: AgentNets, obs, alpha: float, eps=None):
    """Mean of ``alpha log pi(a|o) - min(Q1, Q2)(o, a)`` with reparameterised ``a``."""
    a, logp, (cache, u, eps, log_std, raw) = agent.policy(obs, eps)
    x = critic_input(obs, a)
    q1, c1 = agent.q1.forward(x, return_cache=True)
    q2, c2 = agent.q2.forward(x, return_cache=True)
    use1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(use1, q1[:, 0], q2[:, 0])
    n = len(logp)
    loss = float(np.mean(alpha * logp - qmin))
    # dQ/da through whichever critic is smaller; critic parameters stay fixed
    w1 = use1.astype(float)
    _, gx1 = agent.q1.backward(c1, (-w1 / n)[:, None])
    _, gx2 = agent.q2.backward(c2, (-(1.0 - w1) / n)[:, None])
    g_action = (gx1[:, -1] + gx2[:, -1]) / ACTION_SCALE
    g_logp = np.full(n, alpha / n)
    g_mean, g_raw = agent.head.sample_grads(u, eps, log_std, raw, g_action, g_logp)
    grads, _ = agent.actor.backward(cache, np.column_stack([g_mean, g_raw]))
    return loss, grads, logp


def actor_update(agent: AgentNets, batch: Batch, alpha: float, eps=None):
    loss, grads, _ = actor_loss_and_grads(agent, batch.obs, alpha, eps)
    agent.actor_opt.step(agent.actor.params, grads)
    return loss


def temperature_update(agent: AgentNets, batch: Batch, target_entropy: float, autotune=True,
                       eps=None):
    """Gradient step on log(alpha) for ``alpha * (-log pi - target_entropy)``."""
    if not autotune:
        return agent.alpha
    _, logp, _ = agent.policy(batch.obs, eps)
    grad = agent.alpha * float(np.mean(-logp - target_entropy))
    agent.alpha_opt.step([agent.log_alpha], [np.array([grad])])
    return agent.alpha


def target_update(agent: AgentNets, tau: float):
    for net, tgt in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        for p, pt in zip(net.params, tgt.params):
            pt *= 1.0 - tau
            pt += tau * p


# --- checkpoints --------------------------------------------------------

NETWORK_FILES = ("actor", "q1", "q2", "q1_target", "q2_target")


def save_agents(agents, directory, extra_meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"n_agents": len(agents), "obs_scale": {"ws": WS_SCALE, "angle": ANGLE_SCALE},
            "action_scale": ACTION_SCALE, "agents": []}
    for i, ag in enumerate(agents):
        files = {}
        for name in NETWORK_FILES:
            fname = f"agent{i}_{name}.mnet"
            extra = np.array([WS_SCALE, ANGLE_SCALE]) if name == "actor" else None
            save_mlp(getattr(ag, name), directory / fname, extra)
            files[name] = fname
        meta["agents"].append({"files": files, "alpha": ag.alpha,
                               "log_std_bounds": [ag.head.log_std_min, ag.head.log_std_max]})
    if extra_meta:
        meta.update(extra_meta)
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")


def load_agents(directory, cfg: TrainConfig | None = None):
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    meta = json.loads(manifest.read_text())
    cfg = cfg or TrainConfig()
    agents = []
    for i, entry in enumerate(meta["agents"]):
        ag = AgentNets(cfg, np.random.default_rng([cfg.seed, i]))
        for name, fname in entry["files"].items():
            net, _ = load_mlp(directory / fname)
            setattr(ag, name, net)
        ag.log_alpha = np.array([math.log(entry["alpha"])])
        agents.append(ag)
    return agents


# --- training loop ------------------------------------------------------

class TrainingError(RuntimeError):
    pass


LOG_FIELDS_BASE = ["cumulative_step", "R_total", "R_power", "R_penalty", "penalty_active"]


def log_fields(n_agents):
    f = list(LOG_FIELDS_BASE)
    for i in range(n_agents):
        f += [f"actor_loss_{i}", f"critic_loss_{i}", f"alpha_{i}"]
    return f


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def make_agents(cfg: TrainConfig, n_agents: int):
    return [AgentNets(cfg, np.random.default_rng([cfg.seed, i])) for i in range(n_agents)]


def train(cfg: TrainConfig, env_cfg: EnvConfig, surrogate: SurrogateNet, pool: BoxPool,
          out_dir=None, threads: int | None = None, progress=None):
    """Run the I-SAC loop. Returns ``(agents, log_rows)``.

    With ``out_dir`` set, writes ``train_log.csv``, periodic checkpoints under
    ``checkpoints/step_N`` and the final checkpoint in ``checkpoints/final``.
    """
    n_agents = env_cfg.layout.n_turbines
    agents = make_agents(cfg, n_agents)
    fields = log_fields(n_agents)
    rows: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(fields)

    try:
        if cfg.total_steps > 0:
            _train_loop(cfg, env_cfg, surrogate, pool, agents, rows, fields, threads,
                        out_dir, log_fh and writer, progress)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_agents(agents, out_dir / "checkpoints" / "final",
                    {"cumulative_step": rows[-1]["cumulative_step"] if rows else 0,
                     "box_pool_ids": [int(i) for i in pool.ids]})
    return agents, rows


def _train_loop(cfg, env_cfg, surrogate, pool, agents, rows, fields, threads, out_dir, writer,
                progress):
    n_agents = len(agents)
    vec = VecEnv(env_cfg, surrogate, pool, threads=threads)
    replay = ReplayBuffer(cfg.buffer_size, n_agents, seed=cfg.seed)
    warm_rng = np.random.default_rng([cfg.seed, 10_000])
    obs = vec.reset()
    n_env = env_cfg.n_env
    step = 0
    rnd = 0
    last_losses = [(math.nan, math.nan)] * n_agents
    next_ckpt = cfg.checkpoint_every or None
    while step < cfg.total_steps:
        if step < cfg.warmup:
            actions = warm_rng.uniform(-ACTION_SCALE, ACTION_SCALE, (n_env, n_agents))
        else:
            actions = np.column_stack([agents[i].act(obs[:, i]) for i in range(n_agents)])
        tr = vec.step(actions)
        for e in range(n_env):
            replay.add(tr.obs[e], tr.actions[e], tr.rewards[e].r_total, tr.next_obs[e],
                       tr.truncated[e])
        obs = vec.obs
        step += n_env

        if step >= cfg.warmup and len(replay) >= cfg.batch_size:
            for _ in range(n_env * cfg.updates_per_step):
                for i, ag in enumerate(agents):
                    idx = replay.sample_indices(cfg.batch_size)
                    batch = replay.agent_batch(idx, i)
                    alpha = ag.alpha
                    q1l, q2l = critic_update(ag, batch, cfg.gamma, alpha)
                    al = actor_update(ag, batch, alpha)
                    temperature_update(ag, batch, cfg.target_entropy, cfg.autotune)
                    target_update(ag, cfg.tau)
                    if not all(np.isfinite([q1l, q2l, al])):
                        _dump_batch(out_dir, batch, i, step)
                        raise TrainingError(
                            f"non-finite loss for agent {i} at step {step}: "
                            f"critic {q1l}, {q2l}, actor {al}")
                    last_losses[i] = (al, 0.5 * (q1l + q2l))

        rnd += 1
        if rnd % cfg.log_every == 0 or step >= cfg.total_steps:
            rw = tr.rewards
            row = {"cumulative_step": step,
                   "R_total": float(np.mean([r.r_total for r in rw])),
                   "R_power": float(np.mean([r.r_power for r in rw])),
                   "R_penalty": float(np.mean([r.r_constraint for r in rw])),
                   "penalty_active": float(np.mean([r.penalty_active for r in rw]))}
            for i, ag in enumerate(agents):
                row[f"actor_loss_{i}"] = last_losses[i][0]
                row[f"critic_loss_{i}"] = last_losses[i][1]
                row[f"alpha_{i}"] = ag.alpha
            rows.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[f]) for f in fields])
        if progress is not None:
            progress(step, rows[-1] if rows else None)
        if next_ckpt is not None and out_dir is not None and step >= next_ckpt:
            save_agents(agents, out_dir / "checkpoints" / f"step_{step}",
                        {"cumulative_step": step, "box_pool_ids": [int(i) for i in pool.ids]})
            next_ckpt += cfg.checkpoint_every


def _dump_batch(out_dir, batch, agent, step):
    if out_dir is None:
        return
    np.savez(Path(out_dir) / f"bad_batch_agent{agent}_step{step}.npz", **asdict(batch))


def log_to_csv_text(rows, n_agents) -> str:
    fields = log_fields(n_agents)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([_fmt(row[f]) for f in fields])
    return buf.getvalue()
