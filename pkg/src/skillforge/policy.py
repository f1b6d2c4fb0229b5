"""Gaussian policies: compositional primitives, monolithic, and orchestrator.

A compositional policy keeps K goal-independent diagonal-Gaussian primitives
(state -> mean, variance per action dimension) and a gating network
(state, goal -> K non-negative weights). The weighted product of the
primitive Gaussians is itself Gaussian with, per action dimension j,

    precision  P_j = sum_i w_i / var_ij
    variance   var_j = 1 / P_j
    mean       mu_j = (sum_i (w_i / var_ij) mu_ij) / P_j

``sigma`` arrays throughout this module therefore hold *variances* (entries
of a diagonal covariance); sampling uses their square roots. Because the
composite is exactly the normalized weighted product, differences of
composite log-densities equal the weighted sums of primitive log-density
differences - the normalizer cancels, which the tests exploit.

Gradients are hand-chained through the composition into every network;
there is no autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import OBS_DIM, view_scale

SIGMA_MIN = 1e-3  # variance floor
EPS_W = 1e-4  # gate weight floor
ACTION_DIM = 4
LOG_2PI = float(np.log(2.0 * np.pi))


class ContractViolation(ValueError):
    """Input breaks a documented invariant (weight or variance floor)."""


# ---------------------------------------------------------------------------
# Composition of Gaussian primitives
# ---------------------------------------------------------------------------


@dataclass
class PrimitiveOutput:
    """Per-primitive action Gaussians: K x |A| means and variances."""

    means: np.ndarray
    sigmas: np.ndarray

    def validate(self):
        if self.means.shape != self.sigmas.shape or self.means.ndim != 2:
            raise ContractViolation("means and sigmas must both be K x action_dim")
        if not (np.isfinite(self.means).all() and np.isfinite(self.sigmas).all()):
            raise ContractViolation("non-finite primitive output")
        if np.any(self.sigmas < SIGMA_MIN):
            raise ContractViolation(f"primitive variance below floor {SIGMA_MIN}")


@dataclass
class GateOutput:
    """K non-negative composition weights, floored at EPS_W."""

    weights: np.ndarray

    def validate(self):
        if self.weights.ndim != 1:
            raise ContractViolation("gate weights must be a K-vector")
        if not np.isfinite(self.weights).all():
            raise ContractViolation("non-finite gate weights")
        if np.any(self.weights < EPS_W):
            raise ContractViolation(f"gate weight below floor {EPS_W}")


@dataclass
class CompositeDistribution:
    """Diagonal Gaussian over actions; ``sigma`` holds per-dim variances.

    The product's normalizer is never materialized: the closed form above
    already yields the normalized Gaussian.
    """

    mu: np.ndarray
    sigma: np.ndarray


def compose(prims: PrimitiveOutput, gate: GateOutput) -> CompositeDistribution:
    """Weighted product of the primitive Gaussians, per action dimension."""
    prims.validate()
    gate.validate()
    if gate.weights.shape[0] != prims.means.shape[0]:
        raise ContractViolation("gate weight count must equal primitive count")
    q = gate.weights[:, None] / prims.sigmas
    precision = q.sum(axis=0)
    sigma = 1.0 / precision
    mu = (q * prims.means).sum(axis=0) / precision
    return CompositeDistribution(mu=mu, sigma=sigma)


def _compose_batch(means, sigmas, weights):
    """Vectorized composition. means/sigmas: (N,K,A); weights: (N,K)."""
    q = weights[:, :, None] / sigmas
    precision = q.sum(axis=1)
    var = 1.0 / precision
    mu = (q * means).sum(axis=1) * var
    return mu, var, q, precision


def gaussian_logpdf(actions, mu, var):
    """Diagonal-Gaussian log-density; var holds variances. Sums over dims."""
    d = actions - mu
    return -0.5 * (np.log(var) + d * d / var + LOG_2PI).sum(axis=-1)


def gaussian_entropy(var):
    return 0.5 * (np.log(var) + LOG_2PI + 1.0).sum(axis=-1)


def _softplus(y):
    return np.logaddexp(0.0, y)


def _sigmoid(y):
    return 1.0 / (1.0 + np.exp(-y))


def _input_scale(view: str, input_dim: int, horizon: int) -> np.ndarray:
    """View scaling when the net consumes the canonical view; ones otherwise."""
    if view in OBS_DIM and OBS_DIM[view] == input_dim:
        return view_scale(view, horizon)
    return np.ones(input_dim)


# ---------------------------------------------------------------------------
# Compositional policy
# ---------------------------------------------------------------------------

PRIM_VIEW = "positions_only"
GATE_VIEW = "positions_and_goal"
DEFAULT_HIDDEN = (64, 64)


class McpPolicy:
    """K primitives plus a gate, trained end-to-end.

    Primitives read the goal-free position view; only the gate sees the
    goal, so primitives stay reusable across goal spaces.
    """

    views = (PRIM_VIEW, GATE_VIEW)

    def __init__(self, prim_spec, prim_params, gate_spec, gate_params):
        self.k = len(prim_params)
        self.action_dim = prim_spec.output_dim // 2
        self.prim_spec = prim_spec
        self.prim_params = list(prim_params)
        self.gate_spec = gate_spec
        self.gate_params = gate_params

    @classmethod
    def create(cls, rng, k: int = 4, action_dim: int = ACTION_DIM, hidden=DEFAULT_HIDDEN):
        prim_spec = nn.MlpSpec(OBS_DIM[PRIM_VIEW], tuple(hidden), 2 * action_dim)
        gate_spec = nn.MlpSpec(OBS_DIM[GATE_VIEW], tuple(hidden), k)
        prims = [nn.init_params(prim_spec, rng, final_scale=0.01) for _ in range(k)]
        gate = nn.init_params(gate_spec, rng, final_scale=0.01)
        return cls(prim_spec, prims, gate_spec, gate)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict[str, nn.ParamVector]:
        out = {f"prim_{i}": p for i, p in enumerate(self.prim_params)}
        out["gate"] = self.gate_params
        return out

    # -- forward pieces ------------------------------------------------------

    def primitive_outputs(self, xp):
        """Means/variances for a batch of position observations (N, 10)."""
        n = xp.shape[0]
        means = np.empty((n, self.k, self.action_dim))
        sigmas = np.empty((n, self.k, self.action_dim))
        raw_sig = np.empty((n, self.k, self.action_dim))
        caches = []
        for i, params in enumerate(self.prim_params):
            out, cache = nn.forward_cached(self.prim_spec, params, xp)
            means[:, i, :] = out[:, : self.action_dim]
            raw_sig[:, i, :] = out[:, self.action_dim :]
            sigmas[:, i, :] = _softplus(out[:, self.action_dim :]) + SIGMA_MIN
            caches.append(cache)
        return means, sigmas, raw_sig, caches

    def gate_weights(self, xg):
        raw, cache = nn.forward_cached(self.gate_spec, self.gate_params, xg)
        sig = _sigmoid(raw)
        return np.maximum(sig, EPS_W), sig, cache

    def distribution(self, obs_positions, obs_with_goal) -> CompositeDistribution:
        """Composite for one observation pair (vectors, not batches)."""
        xp = np.asarray(obs_positions, dtype=np.float64)[None, :]
        xg = np.asarray(obs_with_goal, dtype=np.float64)[None, :]
        means, sigmas, _, _ = self.primitive_outputs(xp)
        weights, _, _ = self.gate_weights(xg)
        mu, var, _, _ = _compose_batch(means, sigmas, weights)
        return CompositeDistribution(mu=mu[0], sigma=var[0])

    # -- acting ----------------------------------------------------------

    def act_batch(self, obs: dict, rng: np.random.Generator):
        xp, xg = obs[PRIM_VIEW], obs[GATE_VIEW]
        means, sigmas, _, _ = self.primitive_outputs(xp)
        weights, _, _ = self.gate_weights(xg)
        mu, var, _, _ = _compose_batch(means, sigmas, weights)
        if not np.isfinite(mu).all() or not np.isfinite(var).all():
            raise FloatingPointError("non-finite composite distribution")
        raw = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
        logp = gaussian_logpdf(raw, mu, var)
        return np.clip(raw, -1.0, 1.0), raw, logp

    def sample(self, obs_positions, obs_with_goal, rng):
        """One clamped action and its pre-clamp log-density."""
        obs = {
            PRIM_VIEW: np.asarray(obs_positions, dtype=np.float64)[None, :],
            GATE_VIEW: np.asarray(obs_with_goal, dtype=np.float64)[None, :],
        }
        action, _, logp = self.act_batch(obs, rng)
        return action[0], float(logp[0])

    def eval_action(self, obs: dict):
        xp, xg = obs[PRIM_VIEW], obs[GATE_VIEW]
        means, sigmas, _, _ = self.primitive_outputs(xp)
        weights, _, _ = self.gate_weights(xg)
        mu, _, _, _ = _compose_batch(means, sigmas, weights)
        return mu

    # -- densities and gradients ------------------------------------------

    def logp_entropy(self, obs: dict, actions):
        xp, xg = obs[PRIM_VIEW], obs[GATE_VIEW]
        means, sigmas, raw_sig, prim_caches = self.primitive_outputs(xp)
        weights, gate_sig, gate_cache = self.gate_weights(xg)
        mu, var, q, precision = _compose_batch(means, sigmas, weights)
        logp = gaussian_logpdf(actions, mu, var)
        ent = gaussian_entropy(var)
        cache = (xp, xg, actions, means, sigmas, raw_sig, prim_caches, weights, gate_sig, gate_cache, mu, var, q, precision)
        return logp, ent, cache

    def backward(self, cache, dlogp, dent, frozen_primitives: bool = False):
        """Parameter gradients of sum_n dlogp_n*logp_n + dent_n*ent_n."""
        (xp, xg, actions, means, sigmas, raw_sig, prim_caches, weights, gate_sig,
         gate_cache, mu, var, q, precision) = cache
        d = actions - mu
        g_mu = dlogp[:, None] * d / var
        g_var = dlogp[:, None] * 0.5 * (d * d / var - 1.0) / var + dent[:, None] * 0.5 / var
        g_p = -g_var * var * var
        g_t = g_mu * var
        g_p = g_p - g_mu * mu * var
        g_q = g_t[:, None, :] * means + g_p[:, None, :]
        g_means = g_t[:, None, :] * q
        g_w = (g_q / sigmas).sum(axis=2)
        g_sig = -g_q * q / sigmas

        grads: dict[str, nn.ParamVector] = {}
        if not frozen_primitives:
            g_raw_sig = g_sig * _sigmoid(raw_sig)  # softplus'
            for i in range(self.k):
                out_grad = np.concatenate([g_means[:, i, :], g_raw_sig[:, i, :]], axis=1)
                grad, _ = nn.backward(
                    self.prim_spec, self.prim_params[i], xp, out_grad, cache=prim_caches[i]
                )
                grads[f"prim_{i}"] = grad
        floor_mask = (gate_sig > EPS_W).astype(np.float64)
        g_gate_raw = g_w * floor_mask * gate_sig * (1.0 - gate_sig)
        grad, _ = nn.backward(self.gate_spec, self.gate_params, xg, g_gate_raw, cache=gate_cache)
        grads["gate"] = grad
        return grads

    def log_prob(self, obs_positions, obs_with_goal, action):
        """Composite log-density at one action, plus all parameter grads."""
        obs = {
            PRIM_VIEW: np.asarray(obs_positions, dtype=np.float64)[None, :],
            GATE_VIEW: np.asarray(obs_with_goal, dtype=np.float64)[None, :],
        }
        a = np.asarray(action, dtype=np.float64)[None, :]
        logp, _, cache = self.logp_entropy(obs, a)
        grads = self.backward(cache, np.ones(1), np.zeros(1))
        return float(logp[0]), grads


# ---------------------------------------------------------------------------
# Monolithic Gaussian policy
# ---------------------------------------------------------------------------


class MonolithicPolicy:
    """Single MLP action mean with state-independent learned log-variances."""

    def __init__(self, spec, params, log_var, view: str, horizon: int = 50):
        self.spec = spec
        self.params = params
        self.log_var = log_var  # ParamVector with one (action_dim,) block
        self.view = view
        self.views = (view,)
        self.action_dim = spec.output_dim
        self._scale = _input_scale(view, spec.input_dim, horizon)

    @classmethod
    def create(cls, rng, view: str, action_dim: int = ACTION_DIM, hidden=DEFAULT_HIDDEN,
               horizon: int = 50, init_log_var: float = 0.0):
        spec = nn.MlpSpec(OBS_DIM[view], tuple(hidden), action_dim)
        params = nn.init_params(spec, rng, final_scale=0.01)
        log_var = nn.ParamVector(
            (("log_var", (action_dim,)),), np.full(action_dim, float(init_log_var))
        )
        return cls(spec, params, log_var, view, horizon)

    def parameters(self):
        return {"net": self.params, "log_var": self.log_var}

    def _variance(self):
        return np.maximum(np.exp(self.log_var.values), SIGMA_MIN)

    def forward(self, obs):
        """Action Gaussian (mu, variance) for one observation or a batch."""
        mu = nn.forward(self.spec, self.params, np.asarray(obs) * self._scale)
        return mu, self._variance()

    def act_batch(self, obs: dict, rng):
        x = obs[self.view] * self._scale
        mu = nn.forward(self.spec, self.params, x)
        var = self._variance()
        raw = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
        logp = gaussian_logpdf(raw, mu, var)
        return np.clip(raw, -1.0, 1.0), raw, logp

    def eval_action(self, obs: dict):
        return nn.forward(self.spec, self.params, obs[self.view] * self._scale)

    def logp_entropy(self, obs: dict, actions):
        x = obs[self.view] * self._scale
        mu, cache = nn.forward_cached(self.spec, self.params, x)
        var = self._variance()
        logp = gaussian_logpdf(actions, mu, var)
        ent = np.broadcast_to(gaussian_entropy(var), logp.shape).copy()
        return logp, ent, (x, actions, mu, var, cache)

    def backward(self, cache, dlogp, dent):
        x, actions, mu, var, fwd_cache = cache
        d = actions - mu
        g_mu = dlogp[:, None] * d / var
        g_var = (dlogp[:, None] * 0.5 * (d * d / var - 1.0) / var).sum(axis=0)
        g_var = g_var + dent.sum() * 0.5 / var
        exp_lv = np.exp(self.log_var.values)
        dvar_dlv = np.where(exp_lv > SIGMA_MIN, exp_lv, 0.0)
        grad_net, _ = nn.backward(self.spec, self.params, x, g_mu, cache=fwd_cache)
        grad_lv = nn.ParamVector(self.log_var.layout, g_var * dvar_dlv)
        return {"net": grad_net, "log_var": grad_lv}


# ---------------------------------------------------------------------------
# Orchestrator over frozen primitives
# ---------------------------------------------------------------------------


class OrchestratorPolicy:
    """Gaussian policy over K gate logits, composed through frozen primitives.

    The learner's action is the logit vector z; the environment action is
    the composite mean under weights sigmoid(z) (floored). Primitive
    parameters are excluded from ``parameters()`` so the optimizer can never
    touch them.
    """

    views = (PRIM_VIEW, GATE_VIEW)

    def __init__(self, prim_spec, prim_params, mean_spec, mean_params, log_var):
        self.prim_spec = prim_spec
        self.prim_params = list(prim_params)
        self.k = len(prim_params)
        self.action_dim = prim_spec.output_dim // 2
        self.mean_spec = mean_spec
        self.mean_params = mean_params
        self.log_var = log_var

    @classmethod
    def create(cls, rng, prim_spec, prim_params, hidden=DEFAULT_HIDDEN,
               init_log_var: float = 0.0, goal_obs_dim: int | None = None):
        k = len(prim_params)
        mean_spec = nn.MlpSpec(goal_obs_dim or OBS_DIM[GATE_VIEW], tuple(hidden), k)
        mean_params = nn.init_params(mean_spec, rng, final_scale=0.01)
        log_var = nn.ParamVector((("log_var", (k,)),), np.full(k, float(init_log_var)))
        return cls(prim_spec, prim_params, mean_spec, mean_params, log_var)

    def parameters(self):
        return {"net": self.mean_params, "log_var": self.log_var}

    def frozen_parameters(self):
        return {f"prim_{i}": p for i, p in enumerate(self.prim_params)}

    def _variance(self):
        return np.maximum(np.exp(self.log_var.values), SIGMA_MIN)

    def _composite_mean(self, xp, z):
        weights = np.maximum(_sigmoid(z), EPS_W)
        n = xp.shape[0]
        means = np.empty((n, self.k, self.action_dim))
        sigmas = np.empty((n, self.k, self.action_dim))
        for i, params in enumerate(self.prim_params):
            out = nn.forward(self.prim_spec, params, xp)
            means[:, i, :] = out[:, : self.action_dim]
            sigmas[:, i, :] = _softplus(out[:, self.action_dim :]) + SIGMA_MIN
        mu, _, _, _ = _compose_batch(means, sigmas, weights)
        return mu

    def act_batch(self, obs: dict, rng):
        xg = obs[GATE_VIEW]
        mu_z = nn.forward(self.mean_spec, self.mean_params, xg)
        var = self._variance()
        z = mu_z + np.sqrt(var) * rng.standard_normal(mu_z.shape)
        logp = gaussian_logpdf(z, mu_z, var)
        env_actions = self._composite_mean(obs[PRIM_VIEW], z)
        return env_actions, z, logp

    def eval_action(self, obs: dict):
        z = nn.forward(self.mean_spec, self.mean_params, obs[GATE_VIEW])
        return self._composite_mean(obs[PRIM_VIEW], z)

    def logp_entropy(self, obs: dict, z):
        xg = obs[GATE_VIEW]
        mu_z, cache = nn.forward_cached(self.mean_spec, self.mean_params, xg)
        var = self._variance()
        logp = gaussian_logpdf(z, mu_z, var)
        ent = np.broadcast_to(gaussian_entropy(var), logp.shape).copy()
        return logp, ent, (xg, z, mu_z, var, cache)

    def backward(self, cache, dlogp, dent):
        xg, z, mu_z, var, fwd_cache = cache
        d = z - mu_z
        g_mu = dlogp[:, None] * d / var
        g_var = (dlogp[:, None] * 0.5 * (d * d / var - 1.0) / var).sum(axis=0)
        g_var = g_var + dent.sum() * 0.5 / var
        exp_lv = np.exp(self.log_var.values)
        dvar_dlv = np.where(exp_lv > SIGMA_MIN, exp_lv, 0.0)
        grad_net, _ = nn.backward(self.mean_spec, self.mean_params, xg, g_mu, cache=fwd_cache)
        grad_lv = nn.ParamVector(self.log_var.layout, g_var * dvar_dlv)
        return {"net": grad_net, "log_var": grad_lv}


# ---------------------------------------------------------------------------
# Value function
# ---------------------------------------------------------------------------


class ValueNet:
    """MLP mapping one observation view to a scalar value estimate."""

    def __init__(self, spec, params, view: str, horizon: int = 50):
        self.spec = spec
        self.params = params
        self.view = view
        self._scale = _input_scale(view, spec.input_dim, horizon)

    @classmethod
    def create(cls, rng, view: str, hidden=DEFAULT_HIDDEN, horizon: int = 50):
        spec = nn.MlpSpec(OBS_DIM[view], tuple(hidden), 1)
        return cls(spec, nn.init_params(spec, rng), view, horizon)

    def parameters(self):
        return {"value": self.params}

    def forward(self, obs: dict):
        x = obs[self.view] * self._scale
        return nn.forward(self.spec, self.params, x)[..., 0]

    def forward_cached(self, obs: dict):
        x = obs[self.view] * self._scale
        v, cache = nn.forward_cached(self.spec, self.params, x)
        return v[..., 0], (x, cache)

    def backward(self, cache, dv):
        x, fwd_cache = cache
        grad, _ = nn.backward(self.spec, self.params, x, dv[:, None], cache=fwd_cache)
        return {"value": grad}
