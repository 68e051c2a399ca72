"""Stage-2 policy distillation.

Students (local communicating policies) regress onto the frozen teacher's
deterministic actions over the stage-1 replay data, consumed in strict
collection order so the student tracks the teacher's evolving state
distribution.  No environment interaction happens here; the same buffer
serves any message width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import adam_step, clip_grad_norm, Tape
from .networks import GlobalPolicyNet, LocalCommPolicyNet
from .particle_world import EnvSpec
from .training import Transition, observations_from_states


@dataclass
class DistillConfig:
    batch: int = 1024
    repetitions_per_batch: int = 4
    lr: float = 0.005
    message_dim: int = 1
    grad_clip: float = 0.5


@dataclass
class DistillBatch:
    states: np.ndarray            # (B, S) in non-decreasing t_global order
    teacher_targets: np.ndarray   # (B, N*A) frozen-teacher joint mu
    t_global_max: int


def teacher_targets(teacher: GlobalPolicyNet, states: np.ndarray) -> np.ndarray:
    return teacher.joint_mu(states)


def chronological_batches(
    transitions: list[Transition], teacher: GlobalPolicyNet, batch_size: int
):
    """Consecutive non-overlapping state windows in t_global order, final
    partial window included."""
    if not transitions:
        raise ValueError("no transitions to distill from")
    if any(
        transitions[i].t_global >= transitions[i + 1].t_global
        for i in range(len(transitions) - 1)
    ):
        raise ValueError("transitions are not in chronological order")
    for lo in range(0, len(transitions), batch_size):
        chunk = transitions[lo : lo + batch_size]
        states = np.stack([t.s for t in chunk])
        yield DistillBatch(
            states=states,
            teacher_targets=teacher_targets(teacher, states),
            t_global_max=chunk[-1].t_global,
        )


def distill_loss(students: LocalCommPolicyNet, spec: EnvSpec, batch: DistillBatch) -> float:
    """Mean over the batch of the summed per-agent squared action error."""
    obs = observations_from_states(spec, batch.states)
    joint = students.joint_actions(obs)
    diff = joint - batch.teacher_targets
    return float(np.sum(diff * diff) / batch.states.shape[0])


def _distill_step(
    students: LocalCommPolicyNet, obs: list[np.ndarray], targets: np.ndarray,
    lr: float, grad_clip: float,
) -> float:
    tape = Tape()
    _, _, joint_id = students.tape_forward(tape, obs)
    joint = tape.value(joint_id)
    diff = joint - targets
    loss = float(np.sum(diff * diff) / targets.shape[0])
    students.params.zero_grads()
    tape.backprop({joint_id: 2.0 * diff / targets.shape[0]})
    clip_grad_norm(students.params, grad_clip)
    adam_step(students.params, lr)
    return loss


def distill_train(
    students: LocalCommPolicyNet,
    transitions: list[Transition],
    teacher: GlobalPolicyNet,
    spec: EnvSpec,
    config: DistillConfig,
) -> list[tuple[int, int, float]]:
    """Single chronological pass; several regression steps per batch.

    Returns one (batch_index, t_global_max, loss) row per batch where the
    loss is measured before the batch's first step, i.e. on unseen data.
    """
    if students.message_dim != config.message_dim:
        raise ValueError(
            f"student message dim {students.message_dim} != configured {config.message_dim}"
        )
    trace = []
    for bi, batch in enumerate(chronological_batches(transitions, teacher, config.batch)):
        obs = observations_from_states(spec, batch.states)
        first_loss = None
        for _ in range(config.repetitions_per_batch):
            loss = _distill_step(students, obs, batch.teacher_targets, config.lr, config.grad_clip)
            if first_loss is None:
                first_loss = loss
        trace.append((bi, batch.t_global_max, first_loss))
    return trace


@dataclass
class AgentFidelity:
    agent: int
    mse: float
    cosine: float


def fidelity_report(
    students: LocalCommPolicyNet,
    teacher: GlobalPolicyNet,
    spec: EnvSpec,
    probe_states: np.ndarray,
) -> list[AgentFidelity]:
    """Per-agent action MSE and mean cosine similarity on probe states."""
    obs = observations_from_states(spec, probe_states)
    _, student_actions = students.forward(obs)
    teacher_mus = teacher.mu_values(probe_states)
    out = []
    for i in range(spec.num_agents):
        t_a = teacher_mus[i]
        s_a = student_actions[i]
        err = s_a - t_a
        mse = float(np.mean(np.sum(err * err, axis=1)))
        norms = np.linalg.norm(t_a, axis=1) * np.linalg.norm(s_a, axis=1)
        ok = norms > 1e-12
        cos = float(np.mean(np.sum(t_a * s_a, axis=1)[ok] / norms[ok])) if ok.any() else 0.0
        out.append(AgentFidelity(agent=i, mse=mse, cosine=cos))
    return out
