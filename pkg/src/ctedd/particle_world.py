"""Deterministic 2-D multi-agent particle benchmarks.

Four cooperative tasks: two cooperative-navigation variants (cn-v1, cn-v2),
push-forward (pf) and predator-prey (pp).  Three agents share one scalar
team reward per step.  Dynamics are point-mass with velocity damping,
speed clamping and position clamping to the world box; all constants are
fixed here so trajectories are bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

DT = 0.1
ACCEL = 5.0            # action-to-acceleration gain
DAMPING = 0.25
MAX_SPEED = 1.0
WORLD_BOUND = 1.5      # positions clamped to [-1.5, 1.5]^2
SPAWN_BOUND = 1.0      # reset placement is uniform in [-1, 1]^2
COLLISION_RADIUS = 0.15
PUSH_ZONE_RADIUS = 0.3
PUSH_DIST = 0.05
CAPTURE_RADIUS = 0.25
PREY_STEP = 0.08
PREY_DIRECTIONS = 16

ENV_IDS = ("cn-v1", "cn-v2", "pf", "pp")

# Instrumentation: every Env.step bumps this, so offline stages can prove
# they consumed zero environment samples.
GLOBAL_ENV_STEPS = 0


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    num_agents: int
    num_landmarks: int
    episode_length: int
    movable_landmarks: bool
    action_dim: int = 2

    @property
    def obs_dim(self) -> int:
        # own position, own velocity, distances to others, distances to landmarks
        return 4 + (self.num_agents - 1) + self.num_landmarks

    @property
    def state_dim(self) -> int:
        per_landmark = 4 if self.movable_landmarks else 2
        return 4 * self.num_agents + per_landmark * self.num_landmarks


_SPECS = {
    "cn-v1": EnvSpec("cn-v1", 3, 3, 25, movable_landmarks=False),
    "cn-v2": EnvSpec("cn-v2", 3, 2, 25, movable_landmarks=False),
    "pf": EnvSpec("pf", 3, 3, 50, movable_landmarks=True),
    "pp": EnvSpec("pp", 3, 2, 50, movable_landmarks=True),
}


def make_spec(env_id: str) -> EnvSpec:
    try:
        return _SPECS[env_id]
    except KeyError:
        raise ValueError(f"unknown environment id '{env_id}' (choose from {ENV_IDS})") from None


@dataclass
class WorldState:
    agent_pos: np.ndarray     # (N, 2)
    agent_vel: np.ndarray     # (N, 2)
    agent_accel: np.ndarray   # (N, 2) acceleration applied on the previous step
    landmark_pos: np.ndarray  # (L, 2)
    landmark_vel: np.ndarray  # (L, 2); zero for static landmarks
    time_step: int

    def copy(self) -> "WorldState":
        return WorldState(
            self.agent_pos.copy(),
            self.agent_vel.copy(),
            self.agent_accel.copy(),
            self.landmark_pos.copy(),
            self.landmark_vel.copy(),
            self.time_step,
        )


def reset(spec: EnvSpec, rng: np.random.Generator) -> WorldState:
    """Fresh episode: i.i.d. uniform placement in the spawn box, zero velocities."""
    n, l = spec.num_agents, spec.num_landmarks
    agent_pos = rng.uniform(-SPAWN_BOUND, SPAWN_BOUND, size=(n, 2))
    landmark_pos = rng.uniform(-SPAWN_BOUND, SPAWN_BOUND, size=(l, 2))
    return WorldState(
        agent_pos=agent_pos,
        agent_vel=np.zeros((n, 2)),
        agent_accel=np.zeros((n, 2)),
        landmark_pos=landmark_pos,
        landmark_vel=np.zeros((l, 2)),
        time_step=0,
    )


def _pair_distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def collision_pairs(state: WorldState) -> int:
    """Number of agent pairs closer than twice the collision radius."""
    d = _pair_distances(state.agent_pos)
    n = state.agent_pos.shape[0]
    iu = np.triu_indices(n, k=1)
    return int((d[iu] < 2.0 * COLLISION_RADIUS).sum())


def _agent_landmark_dists(state: WorldState) -> np.ndarray:
    """(L, N) Euclidean distances from each landmark to each agent."""
    diff = state.landmark_pos[:, None, :] - state.agent_pos[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def push_succeeded(prev: WorldState, next_state: WorldState) -> bool:
    """PF rule: a distinct-zone assignment at prev plus a rightward move by all."""
    if not np.all(next_state.agent_pos[:, 0] > prev.agent_pos[:, 0]):
        return False
    d = _agent_landmark_dists(prev)  # (L, N)
    in_zone = d < PUSH_ZONE_RADIUS
    # need a perfect agent<->landmark matching inside the zones; 3! is tiny
    import itertools

    n = prev.agent_pos.shape[0]
    for perm in itertools.permutations(range(n)):
        if all(in_zone[perm[a], a] for a in range(n)):
            return True
    return False


def prey_move(state: WorldState) -> np.ndarray:
    """New landmark positions for the predator-prey escape rule.

    Each landmark predicts every agent's next position from its current
    position, velocity and last applied acceleration, then moves a fixed
    distance along whichever of the evenly spaced candidate directions
    maximizes the summed distance to the predicted positions.  Ties break
    to the lowest direction index.
    """
    predicted = (
        state.agent_pos
        + state.agent_vel * DT
        + 0.5 * state.agent_accel * DT * DT
    )  # (N, 2)
    angles = 2.0 * np.pi * np.arange(PREY_DIRECTIONS) / PREY_DIRECTIONS
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (K, 2)
    new_pos = state.landmark_pos.copy()
    for li in range(state.landmark_pos.shape[0]):
        candidates = state.landmark_pos[li] + PREY_STEP * dirs  # (K, 2)
        diff = candidates[:, None, :] - predicted[None, :, :]
        scores = np.sqrt((diff * diff).sum(axis=2)).sum(axis=1)  # (K,)
        new_pos[li] = candidates[int(np.argmax(scores))]
    return new_pos


def physics_step(spec: EnvSpec, state: WorldState, actions) -> WorldState:
    """Advance one step: agent kinematics, then the per-env landmark rule."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (spec.num_agents, spec.action_dim):
        raise ValueError(
            f"expected {spec.num_agents} actions of dim {spec.action_dim}, got shape {actions.shape}"
        )
    a = np.clip(actions, -1.0, 1.0)

    vel = (1.0 - DAMPING) * state.agent_vel + a * ACCEL * DT
    speed = np.sqrt((vel * vel).sum(axis=1, keepdims=True))
    over = speed > MAX_SPEED
    if over.any():
        scale = np.where(over, MAX_SPEED / np.maximum(speed, 1e-300), 1.0)
        vel = vel * scale
    pos = np.clip(state.agent_pos + vel * DT, -WORLD_BOUND, WORLD_BOUND)

    next_state = WorldState(
        agent_pos=pos,
        agent_vel=vel,
        agent_accel=a * ACCEL,
        landmark_pos=state.landmark_pos.copy(),
        landmark_vel=np.zeros_like(state.landmark_vel),
        time_step=state.time_step + 1,
    )

    if spec.env_id == "pf":
        if push_succeeded(state, next_state):
            next_state.landmark_pos[:, 0] += PUSH_DIST
            next_state.landmark_vel[:, 0] = PUSH_DIST / DT
    elif spec.env_id == "pp":
        moved = prey_move(state)
        next_state.landmark_vel = (moved - state.landmark_pos) / DT
        next_state.landmark_pos = moved
    return next_state


def observe(spec: EnvSpec, state: WorldState, agent_index: int) -> np.ndarray:
    """Local view: own kinematics plus scalar distances; no foreign velocities
    or landmark coordinates leak through."""
    p = state.agent_pos[agent_index]
    v = state.agent_vel[agent_index]
    other = [
        np.linalg.norm(state.agent_pos[j] - p)
        for j in range(spec.num_agents)
        if j != agent_index
    ]
    landmarks = [np.linalg.norm(lp - p) for lp in state.landmark_pos]
    return np.concatenate([p, v, np.array(other), np.array(landmarks)])


def full_state_vector(spec: EnvSpec, state: WorldState) -> np.ndarray:
    """Flat layout: per agent [px py vx vy], then per landmark [px py (vx vy)].

    Landmark velocities are included only for envs with movable landmarks.
    time_step and the stored accelerations are bookkeeping, not state layout.
    """
    parts = [np.concatenate([state.agent_pos[i], state.agent_vel[i]]) for i in range(spec.num_agents)]
    for li in range(spec.num_landmarks):
        if spec.movable_landmarks:
            parts.append(np.concatenate([state.landmark_pos[li], state.landmark_vel[li]]))
        else:
            parts.append(state.landmark_pos[li])
    return np.concatenate(parts)


def state_from_vector(spec: EnvSpec, vec, time_step: int = 0) -> WorldState:
    """Inverse of full_state_vector (accelerations come back zeroed)."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (spec.state_dim,):
        raise ValueError(f"expected state vector of length {spec.state_dim}, got {vec.shape}")
    n, l = spec.num_agents, spec.num_landmarks
    agent_block = vec[: 4 * n].reshape(n, 4)
    rest = vec[4 * n:]
    if spec.movable_landmarks:
        lm = rest.reshape(l, 4)
        landmark_pos, landmark_vel = lm[:, :2].copy(), lm[:, 2:].copy()
    else:
        landmark_pos = rest.reshape(l, 2).copy()
        landmark_vel = np.zeros((l, 2))
    return WorldState(
        agent_pos=agent_block[:, :2].copy(),
        agent_vel=agent_block[:, 2:].copy(),
        agent_accel=np.zeros((n, 2)),
        landmark_pos=landmark_pos,
        landmark_vel=landmark_vel,
        time_step=time_step,
    )


# -- rewards ---------------------------------------------------------------


def _shaping(next_state: WorldState) -> float:
    """Negative sum over landmarks of the closest-agent distance."""
    d = _agent_landmark_dists(next_state)
    return -float(d.min(axis=1).sum())


def reward_cn_v1(prev: WorldState, next_state: WorldState) -> float:
    return _shaping(next_state) - 1.0 * collision_pairs(next_state)


def reward_cn_v2(prev: WorldState, next_state: WorldState) -> float:
    """Shaping over two landmarks plus the 2/1 occupancy-split penalty."""
    d = _agent_landmark_dists(next_state)  # (2, N)
    r = -float(d.min(axis=1).sum())
    favored = int(np.argmin(d.min(axis=1)))  # landmark closest to the team
    nearest = np.argmin(d, axis=0)           # per-agent nearest landmark
    if int((nearest != favored).sum()) >= 2:
        r -= 10.0
    r -= 1.0 * collision_pairs(next_state)
    return r


def reward_pf(prev: WorldState, next_state: WorldState) -> tuple[float, float]:
    """Returns (team reward, landmark x-displacement this step)."""
    pushed = push_succeeded(prev, next_state)
    r = 10.0 if pushed else 0.0
    r += _shaping(next_state)
    r -= 1.0 * collision_pairs(next_state)
    return r, PUSH_DIST if pushed else 0.0


def captured_landmarks(state: WorldState) -> np.ndarray:
    """Boolean mask of landmarks with every agent inside the capture radius."""
    d = _agent_landmark_dists(state)
    return (d < CAPTURE_RADIUS).all(axis=1)


def reward_pp(prev: WorldState, next_state: WorldState) -> float:
    r = 10.0 * float(captured_landmarks(next_state).sum())
    r += _shaping(next_state)
    r -= 1.0 * collision_pairs(next_state)
    return r


def team_reward(spec: EnvSpec, prev: WorldState, next_state: WorldState) -> float:
    if spec.env_id == "cn-v1":
        return reward_cn_v1(prev, next_state)
    if spec.env_id == "cn-v2":
        return reward_cn_v2(prev, next_state)
    if spec.env_id == "pf":
        return reward_pf(prev, next_state)[0]
    if spec.env_id == "pp":
        return reward_pp(prev, next_state)
    raise ValueError(f"unknown env '{spec.env_id}'")


class Env:
    """One episode owner: holds the stream used for resets and prey respawns."""

    def __init__(self, spec: EnvSpec, rng: np.random.Generator):
        self.spec = spec
        self._rng = rng
        self._state: WorldState | None = None

    @property
    def state(self) -> WorldState:
        if self._state is None:
            raise RuntimeError("environment not reset")
        return self._state

    def reset(self) -> WorldState:
        self._state = reset(self.spec, self._rng)
        return self._state

    def step(self, actions) -> tuple[WorldState, float, bool]:
        global GLOBAL_ENV_STEPS
        prev = self.state
        nxt = physics_step(self.spec, prev, actions)
        r = team_reward(self.spec, prev, nxt)
        if self.spec.env_id == "pp":
            # captured prey respawn after the reward is settled; episode continues
            caught = captured_landmarks(nxt)
            for li in np.flatnonzero(caught):
                nxt.landmark_pos[li] = self._rng.uniform(-SPAWN_BOUND, SPAWN_BOUND, size=2)
                nxt.landmark_vel[li] = 0.0
        self._state = nxt
        GLOBAL_ENV_STEPS += 1
        done = nxt.time_step >= self.spec.episode_length
        return nxt, r, done


def write_trajectory_csv(path, rows) -> None:
    """Dump per-agent kinematics, one row per (t, agent).

    Each row: (t, agent_id, px, py, vx, vy, ax, ay, reward).
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "agent_id", "px", "py", "vx", "vy", "ax", "ay", "reward"])
        for row in rows:
            w.writerow(list(row))
