"""Stage-1 centralized training: replay, TD and policy-gradient updates.

The Q-network minimizes squared TD error against targets built from the
target deterministic heads.  mu heads (plus the shared trunk) ascend the
deterministic policy gradient; sigma heads ascend a score-function term
weighted by the advantage of the sampled action over the deterministic
action, plus an entropy bonus weighted by an annealed factor.  The same
Q-update drives the communicating-local-policy baseline trainer.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, adam_step, clip_grad_norm
from .networks import (
    CentralQNet,
    GlobalPolicyNet,
    LocalCommPolicyNet,
    d_entropy_d_sigma,
    d_log_prob_d_sigma,
)
from .particle_world import EnvSpec, observe, state_from_vector

log = logging.getLogger(__name__)

BUF_MAGIC = b"CTEDDBUF"
BUF_FORMAT_VERSION = 1


@dataclass
class Transition:
    s: np.ndarray             # full state vector
    s_next: np.ndarray
    joint_action: np.ndarray  # executed (clipped) actions, 2N components
    reward: float
    t_global: int
    done: float               # 1.0 only for environment-terminal states (never
                              # set by the time-limited benchmark envs)


@dataclass
class TrainConfig:
    gamma: float = 0.95
    batch: int = 1024
    lr_ctedd: float = 0.005
    lr_maddpg: float = 0.01
    tau: float = 0.01
    learn_interval: int = 100
    alpha_start: float = 0.1
    alpha_end: float = 0.001
    alpha_steps: int = 3_000_000
    buffer_capacity: int = 1_000_000
    grad_clip: float = 0.5
    maddpg_noise_std: float = 0.1
    maddpg_noise_decay: float = 0.999
    sigma_fixed: float | None = None


@dataclass
class AlphaSchedule:
    start: float = 0.1
    end: float = 0.001
    horizon_steps: int = 3_000_000


def alpha_at(schedule: AlphaSchedule, step: int) -> float:
    """Linear anneal start -> end over the horizon, constant afterwards."""
    if step < 0:
        raise ValueError("step must be >= 0")
    frac = min(step, schedule.horizon_steps) / schedule.horizon_steps
    # convex form so both endpoints are exact in floating point
    return (1.0 - frac) * schedule.start + frac * schedule.end


class ReplayBuffer:
    """FIFO ring of transitions; iteration order is always insertion order."""

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._start = 0          # ring head once full
        self._last_t: int | None = None
        self._recent: list[Transition] = []

    def __len__(self) -> int:
        return len(self._data)

    def push(self, tr: Transition) -> None:
        if self._last_t is not None and tr.t_global <= self._last_t:
            raise ValueError(
                f"t_global must be strictly increasing (got {tr.t_global} after {self._last_t})"
            )
        self._last_t = tr.t_global
        if len(self._data) < self.capacity:
            self._data.append(tr)
        else:
            self._data[self._start] = tr
            self._start = (self._start + 1) % self.capacity
        self._recent.append(tr)

    def chronological(self) -> list[Transition]:
        """Current contents oldest-to-newest."""
        return self._data[self._start:] + self._data[:self._start]

    def sample_uniform(self, k: int, rng: np.random.Generator) -> list[Transition]:
        """k i.i.d. draws with replacement over current contents."""
        if len(self._data) == 0:
            raise ValueError("cannot sample from an empty buffer")
        if k > len(self._data):
            raise ValueError(f"requested {k} samples from a buffer of {len(self._data)}")
        idx = rng.integers(0, len(self._data), size=k)
        return [self._data[i] for i in idx]

    def recent_batch(self) -> list[Transition]:
        """Transitions pushed since the previous call, in push order."""
        out = self._recent
        self._recent = []
        return out


@dataclass
class RecentBatch:
    """On-policy slice for the sigma update: states plus both action views."""

    states: np.ndarray    # (B, S)
    actions: np.ndarray   # executed, clipped  (B, 2N)
    preclip: np.ndarray   # raw Gaussian samples (B, 2N)


def batch_arrays(batch: list[Transition]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    s = np.stack([t.s for t in batch])
    s_next = np.stack([t.s_next for t in batch])
    a = np.stack([t.joint_action for t in batch])
    r = np.array([t.reward for t in batch])
    done = np.array([t.done for t in batch])
    return s, s_next, a, r, done


# -- updates -----------------------------------------------------------------


def q_update(
    qnet: CentralQNet,
    target_q: CentralQNet,
    target_mu,
    batch: list[Transition],
    gamma: float,
    lr: float,
    grad_clip: float = 0.5,
) -> float:
    """One Adam step on the squared TD error; returns the pre-step batch loss.

    `target_mu(s_next)` supplies the joint action used inside the bootstrap
    target (deterministic target heads for the global policy, target local
    nets for the baseline).
    """
    if not batch:
        raise ValueError("q_update needs a non-empty batch")
    s, s_next, a, r, done = batch_arrays(batch)
    a_next = target_mu(s_next)
    y = r + gamma * (1.0 - done) * target_q.q_values(s_next, a_next)

    t = Tape()
    x_id = t.input(np.concatenate([s, a], axis=1))
    q_id = t.mlp(qnet.params, qnet.LAYERS, x_id)
    q = t.value(q_id)[:, 0]
    err = q - y
    loss = float(np.sum(err * err))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite TD loss")
    # optimize the batch mean so the clip threshold is batch-size independent
    qnet.params.zero_grads()
    t.backprop({q_id: (2.0 * err / len(batch))[:, None]})
    clip_grad_norm(qnet.params, grad_clip)
    adam_step(qnet.params, lr)
    return loss


def dpg_update(
    net: GlobalPolicyNet,
    qnet,
    batch: list[Transition],
    lr: float,
    grad_clip: float = 0.5,
) -> None:
    """Ascend mean_B Q(s, mu(s)) in theta (trunk + mu heads); sigma untouched.

    `qnet` only needs an `action_grad(s, a)` method, so tests can inject
    closed-form critics.
    """
    s = np.stack([t.s for t in batch])
    tape = Tape()
    _, _, joint_id = net.tape_joint_mu(tape, s)
    a = tape.value(joint_id)
    g = qnet.action_grad(s, a)              # dQ/da per sample
    net.theta.zero_grads()
    tape.backprop({joint_id: -g / len(batch)})   # minimize -J
    clip_grad_norm(net.theta, grad_clip)
    adam_step(net.theta, lr)


def advantages(qnet, s: np.ndarray, actions: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Q(s, sampled) - Q(s, mu(s)); exactly zero when actions equal mu."""
    return qnet.q_values(s, actions) - qnet.q_values(s, mu)


def exploration_update(
    net: GlobalPolicyNet,
    qnet,
    recent: RecentBatch | None,
    alpha: float,
    lr: float,
    grad_clip: float = 0.5,
) -> None:
    """Entropy-regularized score-function step on the sigma heads (omega only).

    Per sample and dim the objective gradient is
    adv * dlogp/dsigma + alpha * dH/dsigma, batch-averaged; the log density
    is evaluated at the pre-clip Gaussian sample while the advantage uses the
    executed action, the one the environment actually scored.
    """
    if recent is None or recent.states.shape[0] == 0:
        log.warning("exploration_update skipped: empty recent batch")
        return
    s = recent.states
    n_b = s.shape[0]
    trunk_out = net.trunk_values(s)
    mu = np.concatenate(
        [np.asarray(m) for m in net.mu_values(s)], axis=1
    )
    adv = advantages(qnet, s, recent.actions, mu)   # (B,)

    tape = Tape()
    _, sig_ids = net.tape_sigmas_detached(tape, trunk_out)
    seeds: dict[int, np.ndarray] = {}
    for i, sig_id in enumerate(sig_ids):
        sigma = tape.value(sig_id)
        lo = i * net.action_dim
        hi = lo + net.action_dim
        dlogp = d_log_prob_d_sigma(mu[:, lo:hi], sigma, recent.preclip[:, lo:hi])
        d_obj = adv[:, None] * dlogp + alpha * d_entropy_d_sigma(sigma)
        seeds[sig_id] = -d_obj / n_b             # minimize -J
    net.omega.zero_grads()
    tape.backprop(seeds)
    clip_grad_norm(net.omega, grad_clip)
    adam_step(net.omega, lr)


def soft_update(target: ParamStore, online: ParamStore, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, entry by entry.

    Every target entry must exist in `online` with an identical shape;
    online may hold extra entries (heads that carry no targets).
    """
    for name, e in target.entries.items():
        if name not in online:
            raise KeyError(f"online store lacks target entry '{name}'")
        src = online[name].value
        if src.shape != e.value.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        e.value *= 1.0 - tau
        e.value += tau * src


# -- communicating-local-policy baseline --------------------------------------


def observations_from_states(spec: EnvSpec, s_batch: np.ndarray) -> list[np.ndarray]:
    """Per-agent observation matrices rebuilt from stored full-state vectors."""
    n = spec.num_agents
    rows = [state_from_vector(spec, row) for row in s_batch]
    return [
        np.stack([observe(spec, st, i) for st in rows])
        for i in range(n)
    ]


def maddpg_train_step(
    local_net: LocalCommPolicyNet,
    qnet: CentralQNet,
    target_local: LocalCommPolicyNet,
    target_q: CentralQNet,
    batch: list[Transition],
    spec: EnvSpec,
    gamma: float,
    lr: float,
    grad_clip: float = 0.5,
) -> float:
    """Critic + actor step for the baseline; gradients cross the message channel."""

    def target_mu(s_next):
        return target_local.joint_actions(observations_from_states(spec, s_next))

    loss = q_update(qnet, target_q, target_mu, batch, gamma, lr, grad_clip)

    s = np.stack([t.s for t in batch])
    obs = observations_from_states(spec, s)
    tape = Tape()
    _, _, joint_id = local_net.tape_forward(tape, obs)
    a = tape.value(joint_id)
    g = qnet.action_grad(s, a)
    local_net.params.zero_grads()
    tape.backprop({joint_id: -g / len(batch)})
    clip_grad_norm(local_net.params, grad_clip)
    adam_step(local_net.params, lr)
    return loss


# -- buffer persistence --------------------------------------------------------


def save_buffer(
    buffer: ReplayBuffer, path, env_id: str, n_agents: int, state_dim: int, action_dim: int
) -> None:
    """`replay.buf` layout: header then fixed-width little-endian float64 records
    <t_global, s, s_next, joint_action, reward, done>."""
    records = buffer.chronological()
    env_b = env_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(BUF_MAGIC)
        f.write(struct.pack("<I", BUF_FORMAT_VERSION))
        f.write(struct.pack("<I", len(env_b)))
        f.write(env_b)
        f.write(struct.pack("<III", n_agents, state_dim, action_dim))
        f.write(struct.pack("<Q", len(records)))
        for tr in records:
            row = np.concatenate(
                [
                    [float(tr.t_global)],
                    tr.s,
                    tr.s_next,
                    tr.joint_action,
                    [tr.reward, tr.done],
                ]
            ).astype("<f8")
            f.write(row.tobytes())


def load_buffer(path) -> tuple[ReplayBuffer, dict]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != BUF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {BUF_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != BUF_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported buffer version {version}")
        (env_len,) = struct.unpack("<I", f.read(4))
        env_id = f.read(env_len).decode("utf-8")
        n_agents, state_dim, action_dim = struct.unpack("<III", f.read(12))
        (count,) = struct.unpack("<Q", f.read(8))
        width = 1 + 2 * state_dim + n_agents * action_dim + 2
        buf = ReplayBuffer(capacity=max(count, 1))
        for _ in range(count):
            raw = f.read(width * 8)
            if len(raw) != width * 8:
                raise ValueError(f"{path}: truncated record")
            row = np.frombuffer(raw, dtype="<f8")
            joint = n_agents * action_dim
            buf.push(
                Transition(
                    s=row[1 : 1 + state_dim].copy(),
                    s_next=row[1 + state_dim : 1 + 2 * state_dim].copy(),
                    joint_action=row[1 + 2 * state_dim : 1 + 2 * state_dim + joint].copy(),
                    reward=float(row[-2]),
                    t_global=int(row[0]),
                    done=float(row[-1]),
                )
            )
        buf.recent_batch()  # loading does not count as fresh pushes
    meta = {
        "env_id": env_id,
        "n_agents": n_agents,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "count": count,
    }
    return buf, meta
