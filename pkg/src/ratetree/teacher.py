"""teacher.py - neural rate-control policy and its PPO trainer.

The teacher is a small actor-critic MLP over the flattened observation window
(3k inputs -> 32 -> 16 tanh trunk; scalar tanh-squashed action mean, scalar
value head, state-independent learned log-std).  Inference is deterministic:
the squashed mean.  Inputs are shifted by the neutral observation (0, 1, 1)
and clipped to [-10, 10] inside the network, so callers always hand over raw
observation windows.

Training is PPO-clip with GAE over lockstep-vectorized link environments;
every episode draws a fresh config from the training ranges.  `forward_flops`
counts dense-layer multiply-accumulates on the actor path (1488 for the
default architecture) - the convention under which the efficiency comparison
against the distilled trees is made.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .netsim import (
    DEFAULT_EPISODE_MIS,
    HISTORY_LEN,
    NEUTRAL_OBS,
    LinkEnv,
    ObsHistory,
    run_episodes_batch,
    sample_config,
)

OBS_CLIP = 10.0


class TeacherPolicy(nn.Module):
    def __init__(self, history_len: int = HISTORY_LEN, hidden=(32, 16)):
        super().__init__()
        self.history_len = history_len
        self.hidden = tuple(hidden)
        in_dim = 3 * history_len
        self.fc1 = nn.Linear(in_dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.actor = nn.Linear(hidden[1], 1)
        self.critic = nn.Linear(hidden[1], 1)
        self.log_std = nn.Parameter(torch.tensor(-0.7))
        neutral = torch.tensor(NEUTRAL_OBS, dtype=torch.float32).repeat(history_len)
        self.register_buffer("neutral", neutral)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.clamp(x - self.neutral, -OBS_CLIP, OBS_CLIP)
        h = torch.tanh(self.fc1(x))
        return torch.tanh(self.fc2(h))

    def forward(self, x: torch.Tensor):
        h = self.trunk(x)
        mean = torch.tanh(self.actor(h)).squeeze(-1)
        value = self.critic(h).squeeze(-1)
        return mean, value


def forward_flops(policy: TeacherPolicy) -> int:
    """Dense-layer MAC count on the inference (actor) path."""
    dims = (3 * policy.history_len,) + policy.hidden + (1,)
    return sum(dims[i] * dims[i + 1] for i in range(len(dims) - 1))


def _as_matrix(obs) -> np.ndarray:
    if isinstance(obs, ObsHistory):
        flat = obs.flat()
    else:
        flat = np.asarray(obs, dtype=np.float64).reshape(-1)
    return flat[None, :]


def policy_forward(policy: TeacherPolicy, obs) -> float:
    """Deterministic action for one observation window (squashed mean)."""
    with torch.no_grad():
        x = torch.as_tensor(_as_matrix(obs), dtype=torch.float32)
        mean, _ = policy(x)
    return float(mean[0])


def batch_actions(policy: TeacherPolicy, obs_mat: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        x = torch.as_tensor(obs_mat, dtype=torch.float32)
        mean, _ = policy(x)
    return mean.numpy().astype(np.float64)


# --- persistence -------------------------------------------------------------

def save_policy(policy: TeacherPolicy, path: str) -> None:
    """Text format: one JSON architecture header line, then one float per line
    in fixed parameter order."""
    header = {
        "format": "ratetree-teacher-v1",
        "history_len": policy.history_len,
        "hidden": list(policy.hidden),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for _, tensor in sorted(policy.state_dict().items()):
            if tensor.dim() == 0:
                fh.write(repr(float(tensor)) + "\n")
            else:
                for v in tensor.reshape(-1).tolist():
                    fh.write(repr(v) + "\n")


def load_policy(path: str) -> TeacherPolicy:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "ratetree-teacher-v1":
            raise ValueError(f"{path}: not a teacher parameter file")
        values = [float(line) for line in fh if line.strip()]
    policy = TeacherPolicy(history_len=header["history_len"],
                           hidden=tuple(header["hidden"]))
    state = policy.state_dict()
    pos = 0
    for name in sorted(state):
        tensor = state[name]
        n = tensor.numel()
        chunk = torch.tensor(values[pos:pos + n], dtype=torch.float32)
        state[name] = chunk.reshape(tensor.shape) if tensor.dim() else chunk[0]
        pos += n
    if pos != len(values):
        raise ValueError(f"{path}: parameter count mismatch "
                         f"({len(values)} floats, expected {pos})")
    policy.load_state_dict(state)
    policy.eval()
    return policy


# --- training ----------------------------------------------------------------

@dataclass
class TeacherTrainConfig:
    total_steps: int = 1_000_000
    n_envs: int = 16
    horizon: int = 256
    epochs: int = 10
    minibatch: int = 512
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    anneal_lr: bool = True
    reward_scale: float = 1e-4     # internal to the PPO losses only
    episode_mis: int = DEFAULT_EPISODE_MIS
    eval_episodes: int = 100
    eval_points: int = 8           # learning-curve samples over the budget
    curve_episodes: int = 32
    min_improvement: float | None = 5.0


@dataclass
class TrainResult:
    curve: list = field(default_factory=list)   # (env_steps, mean_return)
    final_return: float = 0.0
    random_return: float = 0.0
    steps: int = 0


class TeacherNotConverged(RuntimeError):
    """Training budget exhausted without reaching the improvement factor."""

    def __init__(self, message: str, curve):
        super().__init__(message)
        self.curve = curve


def _make_envs(n: int, rng: np.random.Generator, episode_mis: int, ranges):
    envs = []
    for _ in range(n):
        cfg = sample_config(rng, ranges)
        envs.append(LinkEnv(cfg, seed=int(rng.integers(0, 2**31 - 1)),
                            episode_mis=episode_mis))
    return envs


def evaluate_policy(policy: TeacherPolicy, n_episodes: int, seed: int,
                    ranges=None, episode_mis: int = DEFAULT_EPISODE_MIS,
                    chunk: int = 256) -> float:
    """Mean per-MI reward over seeded episodes with deterministic actions."""
    rng = np.random.default_rng(seed)
    returns = []
    remaining = n_episodes
    while remaining > 0:
        envs = _make_envs(min(chunk, remaining), rng, episode_mis, ranges)
        returns.append(run_episodes_batch(envs, lambda m: batch_actions(policy, m)))
        remaining -= len(envs)
    return float(np.concatenate(returns).mean())


def random_policy_return(n_episodes: int, seed: int, ranges=None,
                         episode_mis: int = DEFAULT_EPISODE_MIS,
                         chunk: int = 256) -> float:
    """Baseline: actions uniform in [-1, 1], same episode protocol."""
    rng = np.random.default_rng(seed)
    act_rng = np.random.default_rng(seed + 1)
    returns = []
    remaining = n_episodes
    while remaining > 0:
        envs = _make_envs(min(chunk, remaining), rng, episode_mis, ranges)
        returns.append(run_episodes_batch(
            envs, lambda m: act_rng.uniform(-1.0, 1.0, m.shape[0])))
        remaining -= len(envs)
    return float(np.concatenate(returns).mean())


def train_teacher(train_cfg: TeacherTrainConfig, seed: int, ranges=None):
    """PPO-clip training; returns (policy, TrainResult).

    Raises TeacherNotConverged (carrying the learning curve) if the final
    deterministic evaluation fails the configured improvement factor over the
    random-action baseline.  A zero-step budget returns the freshly
    initialized policy unchanged and skips the convergence gate.
    """
    torch.manual_seed(seed)
    policy = TeacherPolicy()
    result = TrainResult()
    if train_cfg.total_steps <= 0:
        return policy, result

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(policy.parameters(), lr=train_cfg.lr)
    n_envs = train_cfg.n_envs
    horizon = train_cfg.horizon
    steps_per_iter = n_envs * horizon
    iters = max(1, math.ceil(train_cfg.total_steps / steps_per_iter))
    eval_every = max(1, iters // max(1, train_cfg.eval_points))

    envs = _make_envs(n_envs, rng, train_cfg.episode_mis, ranges)
    for env in envs:
        env.reset()
    mi_count = 0   # shared across envs; episodes stay aligned

    obs_buf = np.empty((horizon, n_envs, 3 * HISTORY_LEN), dtype=np.float32)
    act_buf = np.empty((horizon, n_envs), dtype=np.float32)
    logp_buf = np.empty((horizon, n_envs), dtype=np.float32)
    rew_buf = np.empty((horizon, n_envs), dtype=np.float32)
    val_buf = np.empty((horizon, n_envs), dtype=np.float32)
    done_buf = np.empty((horizon, n_envs), dtype=np.float32)

    for it in range(iters):
        if train_cfg.anneal_lr:
            frac = 1.0 - it / iters
            for group in opt.param_groups:
                group["lr"] = train_cfg.lr * frac
        with torch.no_grad():
            for t in range(horizon):
                obs = np.stack([e.history.flat() for e in envs]).astype(np.float32)
                x = torch.from_numpy(obs)
                mean, value = policy(x)
                std = torch.exp(policy.log_std)
                dist = torch.distributions.Normal(mean, std)
                action = dist.sample()
                logp = dist.log_prob(action)

                acts = action.numpy()
                env_acts = np.clip(acts, -1.0, 1.0)
                rewards = np.empty(n_envs, dtype=np.float32)
                for i, env in enumerate(envs):
                    _, r, _, _ = env.step(float(env_acts[i]))
                    rewards[i] = r * train_cfg.reward_scale
                mi_count += 1
                done = mi_count >= train_cfg.episode_mis
                if done:
                    envs = _make_envs(n_envs, rng, train_cfg.episode_mis, ranges)
                    for env in envs:
                        env.reset()
                    mi_count = 0

                obs_buf[t] = obs
                act_buf[t] = acts
                logp_buf[t] = logp.numpy()
                rew_buf[t] = rewards
                val_buf[t] = value.numpy()
                done_buf[t] = 1.0 if done else 0.0

            last_obs = np.stack([e.history.flat() for e in envs]).astype(np.float32)
            _, last_value = policy(torch.from_numpy(last_obs))
            last_value = last_value.numpy()

        # GAE
        adv = np.zeros_like(rew_buf)
        running = np.zeros(n_envs, dtype=np.float32)
        next_value = last_value
        for t in reversed(range(horizon)):
            nonterminal = 1.0 - done_buf[t]
            delta = rew_buf[t] + train_cfg.gamma * next_value * nonterminal - val_buf[t]
            running = delta + train_cfg.gamma * train_cfg.gae_lambda * nonterminal * running
            adv[t] = running
            next_value = val_buf[t]
        ret = adv + val_buf

        b_obs = torch.from_numpy(obs_buf.reshape(-1, obs_buf.shape[-1]))
        b_act = torch.from_numpy(act_buf.reshape(-1))
        b_logp = torch.from_numpy(logp_buf.reshape(-1))
        b_adv = torch.from_numpy(adv.reshape(-1))
        b_ret = torch.from_numpy(ret.reshape(-1))
        n_samples = b_obs.shape[0]

        perm_rng = np.random.default_rng(seed * 100003 + it)
        for _ in range(train_cfg.epochs):
            order = perm_rng.permutation(n_samples)
            for start in range(0, n_samples, train_cfg.minibatch):
                idx = torch.from_numpy(order[start:start + train_cfg.minibatch])
                mean, value = policy(b_obs[idx])
                std = torch.exp(policy.log_std)
                dist = torch.distributions.Normal(mean, std)
                logp = dist.log_prob(b_act[idx])
                ratio = torch.exp(logp - b_logp[idx])

                mb_adv = b_adv[idx]
                mb_adv = (mb_adv - mb_adv.mean()) / (mb_adv.std() + 1e-8)
                surr1 = ratio * mb_adv
                surr2 = torch.clamp(ratio, 1.0 - train_cfg.clip,
                                    1.0 + train_cfg.clip) * mb_adv
                policy_loss = -torch.min(surr1, surr2).mean()
                value_loss = ((value - b_ret[idx]) ** 2).mean()
                entropy = dist.entropy().mean()
                loss = (policy_loss + train_cfg.vf_coef * value_loss
                        - train_cfg.ent_coef * entropy)

                opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(policy.parameters(),
                                         train_cfg.max_grad_norm)
                opt.step()

        result.steps = (it + 1) * steps_per_iter
        if (it + 1) % eval_every == 0 or it == iters - 1:
            score = evaluate_policy(policy, train_cfg.curve_episodes,
                                    seed=seed + 7000 + it, ranges=ranges,
                                    episode_mis=train_cfg.episode_mis)
            result.curve.append((result.steps, score))

    policy.eval()
    result.final_return = evaluate_policy(policy, train_cfg.eval_episodes,
                                          seed=seed + 5000, ranges=ranges,
                                          episode_mis=train_cfg.episode_mis)
    result.random_return = random_policy_return(
        train_cfg.eval_episodes, seed=seed + 5000, ranges=ranges,
        episode_mis=train_cfg.episode_mis)
    if train_cfg.min_improvement is not None:
        target = train_cfg.min_improvement * result.random_return
        if result.random_return <= 0:
            ok = result.final_return > result.random_return
        else:
            ok = result.final_return >= target
        if not ok:
            raise TeacherNotConverged(
                f"final return {result.final_return:.1f} below "
                f"{train_cfg.min_improvement}x random baseline "
                f"{result.random_return:.1f}", result.curve)
    return policy, result


# --- rollout collection -------------------------------------------------------

ROLLOUT_META_COLS = ("action", "episode", "mi", "return")


@dataclass
class RolloutDataset:
    X: np.ndarray          # (n, 3k) observation windows
    y: np.ndarray          # (n,) teacher actions
    episode: np.ndarray    # (n,) episode index
    mi: np.ndarray         # (n,) MI index within the episode
    ep_return: np.ndarray  # (n,) mean per-MI reward of the episode

    def __len__(self):
        return self.X.shape[0]

    @property
    def history_len(self) -> int:
        return self.X.shape[1] // 3


def collect_rollouts(policy: TeacherPolicy, n_episodes: int, seed: int,
                     ranges=None, episode_mis: int = DEFAULT_EPISODE_MIS) -> RolloutDataset:
    """Deterministic teacher rollouts over freshly sampled configs.

    Actions are computed one window at a time through `policy_forward`, so
    replaying any stored row reproduces its action bit-for-bit.
    """
    rng = np.random.default_rng(seed)
    xs, ys, eps, mis, rets = [], [], [], [], []
    for ep in range(n_episodes):
        cfg = sample_config(rng, ranges)
        env = LinkEnv(cfg, seed=int(rng.integers(0, 2**31 - 1)),
                      episode_mis=episode_mis)
        env.reset()
        total = 0.0
        for mi in range(episode_mis):
            flat = env.history.flat()
            action = policy_forward(policy, flat)
            _, reward, _, _ = env.step(action)
            xs.append(flat)
            ys.append(action)
            eps.append(ep)
            mis.append(mi)
            total += reward
        rets.extend([total / episode_mis] * episode_mis)
    return RolloutDataset(
        X=np.asarray(xs), y=np.asarray(ys),
        episode=np.asarray(eps, dtype=np.int64),
        mi=np.asarray(mis, dtype=np.int64),
        ep_return=np.asarray(rets),
    )


def save_rollouts(data: RolloutDataset, path: str) -> None:
    k3 = data.X.shape[1]
    header = [f"obs_{i}" for i in range(k3)] + list(ROLLOUT_META_COLS)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.X[i]]
            row.append(repr(float(data.y[i])))
            row.append(str(int(data.episode[i])))
            row.append(str(int(data.mi[i])))
            row.append(repr(float(data.ep_return[i])))
            fh.write(",".join(row) + "\n")


def load_rollouts(path: str) -> RolloutDataset:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        n_obs = sum(1 for c in header if c.startswith("obs_"))
        expected = [f"obs_{i}" for i in range(n_obs)] + list(ROLLOUT_META_COLS)
        if header != expected:
            raise ValueError(f"{path}: unexpected rollout CSV header")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    if rows.size == 0:
        raise ValueError(f"{path}: empty rollout dataset")
    return RolloutDataset(
        X=rows[:, :n_obs],
        y=rows[:, n_obs],
        episode=rows[:, n_obs + 1].astype(np.int64),
        mi=rows[:, n_obs + 2].astype(np.int64),
        ep_return=rows[:, n_obs + 3],
    )
