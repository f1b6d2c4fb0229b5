"""Clipped-surrogate PPO with GAE and a behavioral-cloning auxiliary loss.

The learner is on-policy and from scratch: rollouts are collected with the
current policy, advantages come from generalized advantage estimation, and
each update runs several epochs of shuffled minibatches through the clipped
surrogate objective plus a value MSE and an entropy bonus. When a demo queue
is supplied, one cloning minibatch is interleaved after every PPO minibatch
while the queue is non-empty (the failure-driven demonstration channel).

Policies and value nets expose ``logp_entropy``/``backward``/``parameters``;
gradients flow through those hand-written backward passes into per-parameter
Adam states that persist across updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import TabletopEnv, observe


class NonFiniteUpdateError(RuntimeError):
    """A loss went non-finite; the offending minibatch was not applied."""

    def __init__(self, diagnostics):
        super().__init__(f"non-finite loss in PPO update: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class PpoConfig:
    gamma: float = 0.98
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs_per_update: int = 4
    minibatch_size: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    bc_coef: float = 0.5
    lr: float = 3e-4
    rollout_steps: int = 4096
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")


@dataclass
class Trajectory:
    """One episode (or partial episode) of aligned per-step arrays.

    ``values`` has one extra entry: the bootstrap value of the state after
    the last recorded step (zero when that step terminated the episode).
    ``states`` keeps the raw simulator states (length T+1, including the
    initial state) only when the caller needs to re-view the episode, e.g.
    for cloning a demonstration under a different observation view.
    """

    observations: dict[str, np.ndarray]
    goals: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    steps: np.ndarray
    states: list | None = None

    def __len__(self):
        return len(self.rewards)

    def validate(self):
        t = len(self.rewards)
        for name, arr in self.observations.items():
            if len(arr) != t:
                raise ValueError(f"observation view {name!r} length {len(arr)} != {t}")
        for name in ("goals", "actions", "log_probs", "dones", "steps"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"{name} length mismatch")
        if len(self.values) != t + 1:
            raise ValueError("values must include one bootstrap entry")
        if not np.isfinite(self.log_probs).all():
            raise ValueError("non-finite log probs")


def compute_gae(traj: Trajectory, config: PpoConfig):
    """Raw GAE advantages and returns; normalization happens per update batch."""
    t = len(traj)
    if len(traj.values) != t + 1:
        raise ValueError("values must include the bootstrap entry")
    advantages = np.zeros(t)
    gae = 0.0
    for i in reversed(range(t)):
        nonterminal = 0.0 if traj.dones[i] else 1.0
        delta = traj.rewards[i] + config.gamma * traj.values[i + 1] * nonterminal - traj.values[i]
        gae = delta + config.gamma * config.lam * nonterminal * gae
        advantages[i] = gae
    returns = advantages + traj.values[:t]
    return advantages, returns


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def clipped_surrogate(ratio, advantage, clip_eps):
    """Per-sample clipped objective and its derivative w.r.t. log-prob.

    Returns (objective, d objective / d logp). The derivative is zero where
    the clipped branch is active, which is what kills the gradient for
    samples already pushed past the trust region.
    """
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    a = ratio * advantage
    b = clipped * advantage
    obj = np.minimum(a, b)
    take_a = a <= b
    inside = (ratio > 1.0 - clip_eps) & (ratio < 1.0 + clip_eps)
    dobj = np.where(take_a | inside, ratio * advantage, 0.0)
    return obj, dobj


class Optimizer:
    """Named Adam states with a global gradient-norm clip."""

    def __init__(self, named_params: dict[str, nn.ParamVector], lr: float, max_grad_norm: float):
        self.params = named_params
        self.states = {n: nn.AdamState.for_params(p, lr=lr) for n, p in named_params.items()}
        self.max_grad_norm = max_grad_norm

    def step(self, grads: dict[str, nn.ParamVector]):
        total = 0.0
        for g in grads.values():
            total += float(g.values @ g.values)
        total = np.sqrt(total)
        scale = 1.0
        if self.max_grad_norm and total > self.max_grad_norm:
            scale = self.max_grad_norm / total
        for name, g in grads.items():
            if scale != 1.0:
                g = nn.ParamVector(g.layout, g.values * scale)
            nn.adam_step(self.states[name], self.params[name], g)


class DemoQueue:
    """FIFO store of failed-goal demonstrations for the cloning channel."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self.demos: list[tuple[dict[str, np.ndarray], np.ndarray]] = []

    def __len__(self):
        return len(self.demos)

    @property
    def total_steps(self):
        return sum(len(a) for _, a in self.demos)

    def push(self, observations: dict[str, np.ndarray], actions: np.ndarray):
        self.demos.append((observations, actions))
        if len(self.demos) > self.capacity:
            self.demos.pop(0)

    def sample(self, n: int, rng: np.random.Generator):
        """n (obs, action) pairs drawn uniformly over all stored steps."""
        lengths = np.array([len(a) for _, a in self.demos])
        cum = np.cumsum(lengths)
        flat_idx = rng.integers(0, cum[-1], size=n)
        demo_idx = np.searchsorted(cum, flat_idx, side="right")
        step_idx = flat_idx - np.concatenate([[0], cum[:-1]])[demo_idx]
        views = {k: [] for k in self.demos[0][0]}
        acts = []
        for d, s in zip(demo_idx, step_idx):
            obs, actions = self.demos[d]
            for k in views:
                views[k].append(obs[k][s])
            acts.append(actions[s])
        return {k: np.asarray(v) for k, v in views.items()}, np.asarray(acts)


def _bc_minibatch_step(policy, optimizer, obs, actions, bc_coef):
    """One gradient step maximizing the mean demo log-likelihood."""
    logp, _, cache = policy.logp_entropy(obs, actions)
    if not np.isfinite(logp).all():
        raise NonFiniteUpdateError({"bc_logp": float(np.sum(logp))})
    coeff = np.full(len(logp), -bc_coef / len(logp))
    grads = policy.backward(cache, coeff, np.zeros(len(logp)))
    optimizer.step(grads)
    return float(-logp.mean() * bc_coef)


def bc_update(policy, demonstration, bc_coef: float, config: PpoConfig, optimizer=None):
    """One cloning step on a full demonstration (obs dict, actions).

    ``demonstration`` is (observations, actions) already expressed in the
    learner's own views. A zero coefficient is a no-op by construction.
    """
    obs, actions = demonstration
    if len(actions) == 0:
        raise ValueError("empty demonstration")
    if bc_coef == 0.0:
        return 0.0
    if optimizer is None:
        optimizer = Optimizer(policy.parameters(), config.lr, config.max_grad_norm)
    return _bc_minibatch_step(policy, optimizer, obs, actions, bc_coef)


def ppo_update(
    policy,
    value_net,
    trajectories,
    config: PpoConfig,
    rng: np.random.Generator,
    optimizer: Optimizer | None = None,
    value_optimizer: Optimizer | None = None,
    demo_queue: DemoQueue | None = None,
):
    """One PPO update over a batch of trajectories. Returns diagnostics.

    Advantages are normalized over the whole batch. Each epoch shuffles the
    batch into minibatches; after every PPO minibatch one cloning minibatch
    is taken from ``demo_queue`` when it holds demonstrations.
    """
    if not trajectories:
        raise ValueError("empty trajectory batch")
    if optimizer is None:
        optimizer = Optimizer(policy.parameters(), config.lr, config.max_grad_norm)
    if value_optimizer is None:
        value_optimizer = Optimizer(value_net.parameters(), config.lr, config.max_grad_norm)

    views = {
        name: np.concatenate([t.observations[name] for t in trajectories])
        for name in trajectories[0].observations
    }
    actions = np.concatenate([t.actions for t in trajectories])
    old_logp = np.concatenate([t.log_probs for t in trajectories])
    adv_parts, ret_parts = [], []
    for t in trajectories:
        adv, ret = compute_gae(t, config)
        adv_parts.append(adv)
        ret_parts.append(ret)
    advantages = normalize_advantages(np.concatenate(adv_parts))
    returns = np.concatenate(ret_parts)

    n = len(advantages)
    mb = min(config.minibatch_size, n)
    diag = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
            "approx_kl": 0.0, "clip_fraction": 0.0, "bc_loss": 0.0}
    n_minibatches = 0
    n_bc = 0
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            idx = order[start : start + mb]
            mb_obs = {k: v[idx] for k, v in views.items()}
            mb_actions = actions[idx]
            mb_adv = advantages[idx]
            m = len(idx)

            logp, ent, cache = policy.logp_entropy(mb_obs, mb_actions)
            log_ratio = logp - old_logp[idx]
            ratio = np.exp(log_ratio)
            obj, dobj = clipped_surrogate(ratio, mb_adv, config.clip_eps)
            policy_loss = float(-obj.mean())
            entropy = float(ent.mean())

            v, v_cache = value_net.forward_cached(mb_obs)
            v_err = v - returns[idx]
            value_loss = float((v_err**2).mean())

            if not (np.isfinite(policy_loss) and np.isfinite(value_loss) and np.isfinite(entropy)):
                diag["aborted_minibatch"] = n_minibatches
                raise NonFiniteUpdateError(diag)

            dlogp = -dobj / m
            dent = np.full(m, -config.entropy_coef / m)
            grads = policy.backward(cache, dlogp, dent)
            optimizer.step(grads)

            dv = config.value_coef * 2.0 * v_err / m
            value_optimizer.step(value_net.backward(v_cache, dv))

            # k3 estimator: pointwise non-negative, robust for small batches.
            kl = float(np.mean(ratio - 1.0 - log_ratio))
            clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip_eps))
            diag["policy_loss"] += policy_loss
            diag["value_loss"] += value_loss
            diag["entropy"] += entropy
            diag["approx_kl"] += kl
            diag["clip_fraction"] += clip_frac
            n_minibatches += 1

            if demo_queue is not None and len(demo_queue) > 0 and config.bc_coef > 0.0:
                bc_obs, bc_actions = demo_queue.sample(mb, rng)
                diag["bc_loss"] += _bc_minibatch_step(
                    policy, optimizer, bc_obs, bc_actions, config.bc_coef
                )
                n_bc += 1

    for key in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction"):
        diag[key] /= max(n_minibatches, 1)
    diag["bc_loss"] /= max(n_bc, 1)
    diag["n_minibatches"] = n_minibatches
    return diag


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------


def _batch_observations(envs, view_names):
    views = {}
    for name in view_names:
        views[name] = np.stack([observe(e.state, e.goal, name) for e in envs])
    return views


class _EpisodeBuffer:
    def __init__(self, view_names, record_states, first_state=None):
        self.obs = {name: [] for name in view_names}
        self.goals = []
        self.actions = []
        self.log_probs = []
        self.rewards = []
        self.values = []
        self.dones = []
        self.steps = []
        self.states = [first_state] if record_states else None

    def append(self, obs_row, goal, action, logp, reward, value, done, step, state):
        for k, v in obs_row.items():
            self.obs[k].append(v)
        self.goals.append(goal)
        self.actions.append(action)
        self.log_probs.append(logp)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(done)
        self.steps.append(step)
        if self.states is not None:
            self.states.append(state)

    def finish(self, bootstrap_value) -> Trajectory:
        return Trajectory(
            observations={k: np.asarray(v) for k, v in self.obs.items()},
            goals=np.asarray(self.goals),
            actions=np.asarray(self.actions),
            log_probs=np.asarray(self.log_probs),
            rewards=np.asarray(self.rewards),
            values=np.asarray(self.values + [bootstrap_value]),
            dones=np.asarray(self.dones, dtype=bool),
            steps=np.asarray(self.steps, dtype=int),
            states=self.states,
        )


def _view_names(policy, value_net):
    names = list(policy.views)
    if value_net is not None and value_net.view not in names:
        names.append(value_net.view)
    return names


def collect_rollouts(envs, policy, value_net, n_steps: int, rng: np.random.Generator):
    """Exactly ``n_steps`` environment steps spread evenly over the pool.

    All pool members advance in lockstep so policy and value evaluations are
    batched once per timestep. Finished episodes are closed (bootstrap 0) and
    their envs reset; the final partial episodes bootstrap from the value net.
    """
    p = len(envs)
    if n_steps % p != 0:
        raise ValueError(f"n_steps={n_steps} not divisible by pool size {p}")
    view_names = _view_names(policy, value_net)
    for e in envs:
        if e.state is None:
            e.reset()
    buffers = [_EpisodeBuffer(view_names, False) for _ in envs]
    done_trajs: list[Trajectory] = []
    for _ in range(n_steps // p):
        obs = _batch_observations(envs, view_names)
        env_actions, learn_actions, logps = policy.act_batch(obs, rng)
        values = value_net.forward(obs)
        for i, e in enumerate(envs):
            goal = e.goal.target_pos.copy()
            step_before = e.state.step_idx
            state, reward, done = e.step(env_actions[i])
            buffers[i].append(
                {k: obs[k][i] for k in view_names},
                goal,
                learn_actions[i],
                logps[i],
                reward,
                values[i],
                done,
                step_before,
                None,
            )
            if done:
                done_trajs.append(buffers[i].finish(0.0))
                buffers[i] = _EpisodeBuffer(view_names, False)
                e.reset()
    # Bootstrap unfinished episodes from the current value estimates.
    tail_obs = _batch_observations(envs, view_names)
    tail_values = value_net.forward(tail_obs)
    for i, buf in enumerate(buffers):
        if buf.rewards:
            done_trajs.append(buf.finish(float(tail_values[i])))
    return done_trajs


def run_episode(env: TabletopEnv, policy, value_net, rng, record_states: bool = False,
                deterministic: bool = False) -> Trajectory:
    """Roll one full episode in a single environment."""
    view_names = _view_names(policy, value_net)
    buf = _EpisodeBuffer(view_names, record_states, env.state.copy() if record_states else None)
    done = False
    while not done:
        obs = _batch_observations([env], view_names)
        if deterministic:
            env_actions = policy.eval_action(obs)
            learn_actions, logps = env_actions, np.zeros(1)
        else:
            env_actions, learn_actions, logps = policy.act_batch(obs, rng)
        value = value_net.forward(obs)[0] if value_net is not None else 0.0
        goal = env.goal.target_pos.copy()
        step_before = env.state.step_idx
        state, reward, done = env.step(env_actions[0])
        buf.append(
            {k: obs[k][0] for k in view_names},
            goal,
            learn_actions[0],
            logps[0],
            reward,
            value,
            done,
            step_before,
            state.copy() if record_states else None,
        )
    return buf.finish(0.0)
