"""Policy and value networks.

Three families: a global policy with a shared full-state trunk and
per-agent deterministic (mu) and spread (sigma) heads, a centralized
Q-network over the full state plus the joint action, and a local policy
per agent split into a message generator (part 1) and an action head
consuming the observation plus received messages (part 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, eval_mlp, init_affine

HIDDEN = 64
ACTION_DIM = 2
SIGMA_MAX = 1.0
SIGMA_MIN = 1e-3

_LOG_2PI = math.log(2.0 * math.pi)


# -- diagonal Gaussian helpers ----------------------------------------------


def _check_sigma(sigma: np.ndarray) -> None:
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be strictly positive")


def log_prob(mu, sigma, a) -> np.ndarray:
    """Diagonal-Gaussian log density at the pre-clip action, summed over dims."""
    mu, sigma, a = (np.asarray(x, dtype=np.float64) for x in (mu, sigma, a))
    _check_sigma(sigma)
    z = (a - mu) / sigma
    return (-np.log(sigma) - 0.5 * _LOG_2PI - 0.5 * z * z).sum(axis=-1)


def entropy(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    _check_sigma(sigma)
    return (0.5 * (_LOG_2PI + 1.0) + np.log(sigma)).sum(axis=-1)


def d_log_prob_d_sigma(mu, sigma, a) -> np.ndarray:
    """d log N(a; mu, diag sigma^2) / d sigma, elementwise."""
    mu, sigma, a = (np.asarray(x, dtype=np.float64) for x in (mu, sigma, a))
    _check_sigma(sigma)
    diff = a - mu
    return -1.0 / sigma + diff * diff / sigma**3


def d_entropy_d_sigma(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    _check_sigma(sigma)
    return 1.0 / sigma


@dataclass
class GaussianActionSample:
    action: np.ndarray   # clipped to [-1, 1]
    mean: np.ndarray
    std: np.ndarray
    epsilon: np.ndarray  # the N(0, 1) draw; pre-clip action = mean + epsilon * std


# -- global policy -----------------------------------------------------------


class GlobalPolicyNet:
    """Shared trunk over the full state; per-agent mu and sigma heads.

    Trunk and mu heads live in `theta` (trained by the deterministic
    policy-gradient step); sigma heads live in `omega` (trained by the
    entropy-regularized step).  The trunk feeds every head.
    """

    def __init__(self, state_dim, n_agents=3, action_dim=ACTION_DIM, hidden=HIDDEN, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.action_dim = action_dim
        self.hidden = hidden
        self.theta = ParamStore()
        self.omega = ParamStore()
        init_affine(self.theta, "trunk", state_dim, hidden, rng)
        for i in range(n_agents):
            init_affine(self.theta, f"det{i}.h", hidden, hidden, rng)
            init_affine(self.theta, f"det{i}.out", hidden, action_dim, rng)
        for i in range(n_agents):
            init_affine(self.omega, f"std{i}.h", hidden, hidden, rng)
            init_affine(self.omega, f"std{i}.out", hidden, action_dim, rng)

    @staticmethod
    def det_head_spec(i: int) -> list[tuple[str, str]]:
        return [(f"det{i}.h", "relu"), (f"det{i}.out", "tanh")]

    @staticmethod
    def std_head_spec(i: int) -> list[tuple[str, str]]:
        return [(f"std{i}.h", "relu"), (f"std{i}.out", "softplus")]

    # fast value paths

    def trunk_values(self, s) -> np.ndarray:
        return eval_mlp(self.theta, [("trunk", "relu")], s)

    def mu_values(self, s) -> list[np.ndarray]:
        h = self.trunk_values(s)
        return [eval_mlp(self.theta, self.det_head_spec(i), h) for i in range(self.n_agents)]

    def joint_mu(self, s) -> np.ndarray:
        return np.concatenate(self.mu_values(s), axis=1)

    def sigma_values(self, s) -> list[np.ndarray]:
        h = self.trunk_values(s)
        out = []
        for i in range(self.n_agents):
            raw = eval_mlp(self.omega, self.std_head_spec(i), h)
            out.append(np.clip(raw, SIGMA_MIN, SIGMA_MAX))
        return out

    # tape paths

    def tape_joint_mu(self, tape: Tape, s) -> tuple[int, list[int], int]:
        """Returns (state node, per-agent mu nodes, joint-action node)."""
        s_id = tape.input(s)
        h_id = tape.mlp(self.theta, [("trunk", "relu")], s_id)
        mu_ids = [tape.mlp(self.theta, self.det_head_spec(i), h_id) for i in range(self.n_agents)]
        return s_id, mu_ids, tape.concat(mu_ids)

    def tape_sigmas_detached(self, tape: Tape, trunk_out) -> tuple[int, list[int]]:
        """Sigma heads on a tape with the trunk output as a constant input,
        so backprop touches omega only."""
        h_id = tape.input(trunk_out)
        sig_ids = []
        for i in range(self.n_agents):
            raw = tape.mlp(self.omega, self.std_head_spec(i), h_id)
            sig_ids.append(tape.clip(raw, SIGMA_MIN, SIGMA_MAX, escape=True))
        return h_id, sig_ids

    def tape_full(self, tape: Tape, s) -> tuple[list[int], list[int]]:
        """All heads with the trunk on-tape (used by the gradient checker)."""
        s_id = tape.input(s)
        h_id = tape.mlp(self.theta, [("trunk", "relu")], s_id)
        mu_ids = [tape.mlp(self.theta, self.det_head_spec(i), h_id) for i in range(self.n_agents)]
        sig_ids = [
            tape.clip(tape.mlp(self.omega, self.std_head_spec(i), h_id), SIGMA_MIN, SIGMA_MAX, escape=True)
            for i in range(self.n_agents)
        ]
        return mu_ids, sig_ids

    def target_theta(self) -> ParamStore:
        """Fresh copy of trunk + mu heads; sigma heads carry no targets."""
        return self.theta.clone()

    def combined_store(self) -> ParamStore:
        out = self.theta.clone()
        for name, e in self.omega.entries.items():
            out.add(name, e.value.copy())
        return out

    def load_combined(self, store: ParamStore) -> None:
        for name, e in self.theta.entries.items():
            e.value[...] = store[name].value
        for name, e in self.omega.entries.items():
            e.value[...] = store[name].value


def global_forward(net: GlobalPolicyNet, s) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-agent (mu, sigma) for a batch of full states."""
    mus = net.mu_values(s)
    sigmas = net.sigma_values(s)
    return list(zip(mus, sigmas))


def global_det_mu(theta: ParamStore, n_agents: int, s) -> np.ndarray:
    """Joint deterministic action from a theta store (online or target)."""
    h = eval_mlp(theta, [("trunk", "relu")], s)
    parts = [eval_mlp(theta, GlobalPolicyNet.det_head_spec(i), h) for i in range(n_agents)]
    return np.concatenate(parts, axis=1)


def sample_actions(
    net: GlobalPolicyNet, s, rng: np.random.Generator, sigma_fixed: float | None = None
) -> list[GaussianActionSample]:
    """Draw one clipped action per agent for a single full state."""
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    pairs = global_forward(net, s)
    samples = []
    for mu, sigma in pairs:
        mu = mu[0]
        std = np.full_like(mu, sigma_fixed) if sigma_fixed is not None else sigma[0]
        eps = rng.standard_normal(mu.shape[0])
        pre = mu + eps * std
        samples.append(
            GaussianActionSample(
                action=np.clip(pre, -1.0, 1.0), mean=mu, std=std, epsilon=eps
            )
        )
    return samples


# -- centralized Q ------------------------------------------------------------


class CentralQNet:
    """Feedforward state-action value over full state ++ joint action."""

    LAYERS = [("q.h1", "relu"), ("q.h2", "relu"), ("q.out", "linear")]

    def __init__(self, state_dim, n_agents=3, action_dim=ACTION_DIM, hidden=HIDDEN, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.state_dim = state_dim
        self.n_agents = n_agents
        self.action_dim = action_dim
        self.input_dim = state_dim + n_agents * action_dim
        self.params = ParamStore()
        init_affine(self.params, "q.h1", self.input_dim, hidden, rng)
        init_affine(self.params, "q.h2", hidden, hidden, rng)
        init_affine(self.params, "q.out", hidden, 1, rng)

    def _join(self, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if a.shape[1] != self.n_agents * self.action_dim:
            raise ValueError(
                f"joint action must have {self.n_agents * self.action_dim} components, got {a.shape[1]}"
            )
        return np.concatenate([s, a], axis=1)

    def q_values(self, s, a) -> np.ndarray:
        return eval_mlp(self.params, self.LAYERS, self._join(s, a))[:, 0]

    def q_values_from(self, store: ParamStore, s, a) -> np.ndarray:
        return eval_mlp(store, self.LAYERS, self._join(s, a))[:, 0]

    def action_grad(self, s, a) -> np.ndarray:
        """dQ/da per sample, via one backward pass."""
        t = Tape()
        s_id = t.input(np.asarray(s, dtype=np.float64))
        a_id = t.input(np.asarray(a, dtype=np.float64))
        q_id = t.mlp(self.params, self.LAYERS, t.concat([s_id, a_id]))
        t.backprop({q_id: np.ones_like(t.value(q_id))})
        return t.grad(a_id)

    def clone(self) -> "CentralQNet":
        dup = CentralQNet.__new__(CentralQNet)
        dup.state_dim = self.state_dim
        dup.n_agents = self.n_agents
        dup.action_dim = self.action_dim
        dup.input_dim = self.input_dim
        dup.params = self.params.clone()
        return dup


def central_q(net: CentralQNet, s, joint_action) -> np.ndarray:
    return net.q_values(s, joint_action)


# -- local communicating policy ----------------------------------------------


class LocalCommPolicyNet:
    """Per-agent two-part nets with an all-to-all message exchange.

    Part 1 maps the local observation to a bounded message of dim c; part 2
    maps the observation plus the other agents' messages (ascending agent
    order) to the action.  c = 0 drops part 1 entirely, reducing each agent
    to an observation-only actor.  All agents' parameters live in one store
    so gradients can flow through the message channel in a single pass.
    """

    def __init__(self, obs_dim, n_agents=3, message_dim=1, action_dim=ACTION_DIM,
                 hidden=HIDDEN, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        if message_dim < 0:
            raise ValueError("message_dim must be >= 0")
        self.obs_dim = obs_dim
        self.n_agents = n_agents
        self.message_dim = message_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.params = ParamStore()
        part2_in = obs_dim + (n_agents - 1) * message_dim
        for i in range(n_agents):
            if message_dim > 0:
                init_affine(self.params, f"a{i}.p1.h", obs_dim, hidden, rng)
                init_affine(self.params, f"a{i}.p1.out", hidden, message_dim, rng)
            init_affine(self.params, f"a{i}.p2.h", part2_in, hidden, rng)
            init_affine(self.params, f"a{i}.p2.out", hidden, action_dim, rng)

    @staticmethod
    def part1_spec(i: int) -> list[tuple[str, str]]:
        return [(f"a{i}.p1.h", "relu"), (f"a{i}.p1.out", "tanh")]

    @staticmethod
    def part2_spec(i: int) -> list[tuple[str, str]]:
        return [(f"a{i}.p2.h", "relu"), (f"a{i}.p2.out", "tanh")]

    def param_count(self) -> int:
        """o*h + h + h*c + c per part 1; (o + (N-1)c)*h + h + h*A + A per part 2."""
        return self.params.total_params()

    def forward(self, observations: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Two phases: all messages first, then every action head."""
        if len(observations) != self.n_agents:
            raise ValueError(f"need {self.n_agents} observations, got {len(observations)}")
        obs = [np.asarray(o, dtype=np.float64) for o in observations]
        if self.message_dim > 0:
            messages = [eval_mlp(self.params, self.part1_spec(i), obs[i]) for i in range(self.n_agents)]
        else:
            messages = [np.zeros((o.shape[0], 0)) for o in obs]
        actions = []
        for i in range(self.n_agents):
            inbox = [messages[j] for j in range(self.n_agents) if j != i]
            x = np.concatenate([obs[i]] + inbox, axis=1)
            actions.append(eval_mlp(self.params, self.part2_spec(i), x))
        return messages, actions

    def tape_forward(self, tape: Tape, observations: list[np.ndarray]) -> tuple[list[int], list[int], int]:
        """Differentiable pass; returns (message nodes, action nodes, joint node)."""
        obs_ids = [tape.input(np.asarray(o, dtype=np.float64)) for o in observations]
        if self.message_dim > 0:
            msg_ids = [tape.mlp(self.params, self.part1_spec(i), obs_ids[i]) for i in range(self.n_agents)]
        else:
            msg_ids = []
        act_ids = []
        for i in range(self.n_agents):
            if self.message_dim > 0:
                inbox = [msg_ids[j] for j in range(self.n_agents) if j != i]
                x_id = tape.concat([obs_ids[i]] + inbox)
            else:
                x_id = obs_ids[i]
            act_ids.append(tape.mlp(self.params, self.part2_spec(i), x_id))
        return msg_ids, act_ids, tape.concat(act_ids)

    def joint_actions(self, observations: list[np.ndarray]) -> np.ndarray:
        _, actions = self.forward(observations)
        return np.concatenate(actions, axis=1)

    def clone(self) -> "LocalCommPolicyNet":
        dup = LocalCommPolicyNet.__new__(LocalCommPolicyNet)
        dup.obs_dim = self.obs_dim
        dup.n_agents = self.n_agents
        dup.message_dim = self.message_dim
        dup.action_dim = self.action_dim
        dup.hidden = self.hidden
        dup.params = self.params.clone()
        return dup


def local_forward(net: LocalCommPolicyNet, observations) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return net.forward(observations)
