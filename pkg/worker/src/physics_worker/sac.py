"""Compact soft actor-critic trainer (twin critics, squashed Gaussian
policy, automatic entropy temperature). Torch is imported lazily so the
protocol handshake never waits on it."""

from __future__ import annotations

import time

import numpy as np

from .config import SacHyperparams

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


class TrainTimeout(RuntimeError):
    pass


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.act = np.zeros((capacity, act_dim), dtype=np.float32)
        self.rew = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.index = 0
        self.size = 0

    def add(self, obs, act, rew, next_obs, done):
        i = self.index
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.done[i] = done
        self.index = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        idx = rng.integers(0, self.size, size=batch)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


class Policy:
    """Inference-only handle returned by train(); act() maps an observation
    to an action in [-1, 1]^act_dim."""

    def __init__(self, actor, act_dim: int):
        self.actor = actor
        self.act_dim = act_dim

    def act(self, obs: np.ndarray, deterministic: bool = True) -> np.ndarray:
        import torch

        if self.actor is None:
            return np.zeros(self.act_dim)
        with torch.no_grad():
            mu, log_std = self.actor(torch.as_tensor(obs, dtype=torch.float32).unsqueeze(0))
            if deterministic:
                action = torch.tanh(mu)
            else:
                action = torch.tanh(mu + log_std.exp() * torch.randn_like(mu))
        return action.squeeze(0).numpy()


def _build_nets(obs_dim: int, act_dim: int, layers, torch):
    nn = torch.nn

    def mlp(inp, out):
        seq = []
        last = inp
        for width in layers:
            seq += [nn.Linear(last, width), nn.ReLU()]
            last = width
        seq.append(nn.Linear(last, out))
        return nn.Sequential(*seq)

    class Actor(nn.Module):
        def __init__(self):
            super().__init__()
            self.body = mlp(obs_dim, 2 * act_dim)

        def forward(self, obs):
            out = self.body(obs)
            mu, log_std = out.chunk(2, dim=-1)
            return mu, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    class Critic(nn.Module):
        def __init__(self):
            super().__init__()
            self.q1 = mlp(obs_dim + act_dim, 1)
            self.q2 = mlp(obs_dim + act_dim, 1)

        def forward(self, obs, act):
            x = torch.cat([obs, act], dim=-1)
            return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)

    return Actor(), Critic(), Critic()


def _sample_action(actor, obs, torch):
    mu, log_std = actor(obs)
    std = log_std.exp()
    noise = torch.randn_like(mu)
    pre_tanh = mu + std * noise
    action = torch.tanh(pre_tanh)
    log_prob = (-0.5 * (noise**2 + 2 * log_std + np.log(2 * np.pi))).sum(-1)
    log_prob = log_prob - torch.log(1 - action**2 + 1e-6).sum(-1)
    return action, log_prob


def train(
    make_env,
    reward_fn,
    hp: SacHyperparams,
    total_steps: int,
    seed: int = 0,
    progress=None,
    deadline: float | None = None,
) -> Policy:
    """Train for total_steps environment steps; returns the trained policy.
    Raises TrainTimeout when the wall-clock deadline passes."""
    import torch

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    envs = [make_env() for _ in range(hp.num_envs)]
    obs = [env.reset(seed + i) for i, env in enumerate(envs)]
    obs_dim = len(obs[0])
    act_dim = envs[0].action_dim

    actor, critic, target = _build_nets(obs_dim, act_dim, hp.policy_layers, torch)
    target.load_state_dict(critic.state_dict())
    opt_actor = torch.optim.Adam(actor.parameters(), lr=hp.learning_rate)
    opt_critic = torch.optim.Adam(critic.parameters(), lr=hp.learning_rate)
    log_alpha = torch.zeros(1, requires_grad=True)
    opt_alpha = torch.optim.Adam([log_alpha], lr=hp.learning_rate)
    target_entropy = -float(act_dim)

    buffer = ReplayBuffer(hp.buffer_size, obs_dim, act_dim)
    steps_done = 0
    iteration = 0
    while steps_done < total_steps:
        if deadline is not None and time.monotonic() > deadline:
            raise TrainTimeout(f"training exceeded its wall-clock budget at step {steps_done}")
        obs_batch = np.asarray(obs, dtype=np.float32)
        if steps_done < hp.learning_starts:
            actions = rng.uniform(-1.0, 1.0, size=(hp.num_envs, act_dim))
        else:
            with torch.no_grad():
                acts, _ = _sample_action(actor, torch.as_tensor(obs_batch), torch)
            actions = acts.numpy()
        for i, env in enumerate(envs):
            next_obs, done = env.step(actions[i])
            reward = reward_fn(env.state_dict())
            buffer.add(obs_batch[i], actions[i], reward, next_obs, float(done))
            obs[i] = env.reset(seed + i + 1000 * iteration) if done else next_obs
        steps_done += hp.num_envs
        iteration += 1

        if steps_done >= hp.learning_starts and iteration % hp.train_freq == 0:
            for _ in range(hp.gradient_steps):
                if buffer.size < hp.batch_size:
                    break
                b_obs, b_act, b_rew, b_next, b_done = buffer.sample(rng, hp.batch_size)
                t_obs = torch.as_tensor(b_obs)
                t_act = torch.as_tensor(b_act)
                t_rew = torch.as_tensor(b_rew)
                t_next = torch.as_tensor(b_next)
                t_done = torch.as_tensor(b_done)
                alpha = log_alpha.exp().detach()

                with torch.no_grad():
                    next_act, next_logp = _sample_action(actor, t_next, torch)
                    q1n, q2n = target(t_next, next_act)
                    q_next = torch.min(q1n, q2n) - alpha * next_logp
                    y = t_rew + hp.gamma * (1.0 - t_done) * q_next
                q1, q2 = critic(t_obs, t_act)
                critic_loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
                opt_critic.zero_grad()
                critic_loss.backward()
                opt_critic.step()

                new_act, logp = _sample_action(actor, t_obs, torch)
                q1pi, q2pi = critic(t_obs, new_act)
                actor_loss = (log_alpha.exp().detach() * logp - torch.min(q1pi, q2pi)).mean()
                opt_actor.zero_grad()
                actor_loss.backward()
                opt_actor.step()

                alpha_loss = -(log_alpha * (logp.detach() + target_entropy)).mean()
                opt_alpha.zero_grad()
                alpha_loss.backward()
                opt_alpha.step()

                with torch.no_grad():
                    for p, tp in zip(critic.parameters(), target.parameters()):
                        tp.mul_(1.0 - hp.tau).add_(hp.tau * p)

        if progress is not None and iteration % 200 == 0:
            progress(steps_done)
    return Policy(actor, act_dim)


def rollout(env, policy: Policy | None, seed: int = 0) -> float:
    """Roll the (possibly untrained or absent) policy once; returns the
    environment's fitness metric."""
    obs = env.reset(seed)
    done = False
    while not done:
        if policy is None:
            action = np.zeros(env.action_dim)
        else:
            action = policy.act(obs, deterministic=True)
        obs, done = env.step(action)
    return env.fitness()
