"""Experiment orchestration: sampling/learning loop, evaluation, artifacts.

One `run_train` call executes the full stage-1 loop for either algorithm,
appending an evaluation snapshot to metrics.csv every `eval_every`
environment steps and persisting the final networks plus the replay
buffer.  `run_distill` consumes those artifacts offline.  Every random
draw derives from the experiment seed through labelled streams, so a
(config, seed) pair fixes every artifact byte.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .autodiff import finite_diff_check, load_params, save_params
from .distillation import DistillConfig, distill_train, fidelity_report
from .networks import (
    CentralQNet,
    GlobalPolicyNet,
    LocalCommPolicyNet,
    global_det_mu,
    sample_actions,
)
from .particle_world import (
    ENV_IDS,
    Env,
    EnvSpec,
    full_state_vector,
    make_spec,
    observe,
)
from .training import (
    AlphaSchedule,
    RecentBatch,
    ReplayBuffer,
    Transition,
    alpha_at,
    dpg_update,
    exploration_update,
    load_buffer,
    maddpg_train_step,
    q_update,
    save_buffer,
    soft_update,
)

METRICS_COLUMNS = ["env_steps", "episodes", "variant", "mean_return", "ci95", "wallclock_s"]


class InputError(ValueError):
    """Bad user input (config, paths, manifests); maps to exit code 2."""


@dataclass
class ExperimentConfig:
    env_id: str = "cn-v1"
    algorithm: str = "ctedd"          # ctedd | maddpg
    message_dim: int = 1
    seed: int = 0
    total_env_steps: int = 50_000
    eval_every: int = 10_000
    eval_episodes: int = 400
    sigma_fixed: float | None = None  # ablation: freeze action-sampling spread
    # stage-1 training
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
    # stage-2 distillation
    distill_batch: int = 1024
    distill_repetitions: int = 4
    distill_lr: float = 0.005
    # bookkeeping
    hidden: int = 64
    out_dir: str = "runs/default"
    record_wallclock: bool = False    # off by default: keeps metrics.csv byte-reproducible

    def validate(self) -> None:
        if self.env_id not in ENV_IDS:
            raise InputError(f"unknown env '{self.env_id}' (choose from {ENV_IDS})")
        if self.algorithm not in ("ctedd", "maddpg"):
            raise InputError(f"unknown algorithm '{self.algorithm}'")
        if self.sigma_fixed is not None and self.algorithm != "ctedd":
            raise InputError("sigma_fixed only applies to the ctedd algorithm")
        if self.message_dim not in (0, 1, 3):
            raise InputError("message_dim must be 0, 1 or 3")
        for name in ("eval_episodes", "batch", "learn_interval", "eval_every"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config file not found: {path}")
    for ln, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = val
    return out


def config_from_file(path, overrides: dict | None = None) -> ExperimentConfig:
    raw = parse_config_file(path)
    cfg = ExperimentConfig()
    valid = {f.name: f for f in fields(ExperimentConfig)}
    updates = {}
    for key, val in raw.items():
        if key not in valid:
            raise InputError(f"{path}: unknown config key '{key}'")
        updates[key] = _coerce(key, val)
    cfg = replace(cfg, **updates)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


def _coerce(key: str, val: str):
    hints = {f.name: f.type for f in fields(ExperimentConfig)}
    hint = hints[key]
    if val.lower() == "none":
        return None
    if hint in ("int",):
        return int(val)
    if hint in ("float", "float | None"):
        return float(val)
    if hint in ("bool",):
        if val.lower() not in _BOOL:
            raise InputError(f"config key '{key}': expected a boolean, got {val!r}")
        return _BOOL[val.lower()]
    return val


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsRow:
    env_steps: int
    episodes: int
    variant: str
    mean_return: float
    ci95: float
    wallclock_s: float


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(
                [
                    r.env_steps,
                    r.episodes,
                    r.variant,
                    f"{r.mean_return:.9g}",
                    f"{r.ci95:.9g}",
                    f"{r.wallclock_s:.3f}",
                ]
            )


def read_metrics_csv(path) -> list[MetricsRow]:
    p = Path(path)
    if not p.exists():
        raise InputError(f"metrics file not found: {path}")
    rows = []
    with open(p, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != METRICS_COLUMNS:
            raise InputError(f"{path}:1: bad header {header!r}")
        for ln, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_COLUMNS):
                raise InputError(f"{path}:{ln}: expected {len(METRICS_COLUMNS)} fields, got {len(rec)}")
            try:
                rows.append(
                    MetricsRow(
                        env_steps=int(rec[0]),
                        episodes=int(rec[1]),
                        variant=rec[2],
                        mean_return=float(rec[3]),
                        ci95=float(rec[4]),
                        wallclock_s=float(rec[5]),
                    )
                )
            except ValueError as e:
                raise InputError(f"{path}:{ln}: {e}") from None
    return rows


# -- evaluation ---------------------------------------------------------------


def evaluate_policy(policy_fn, spec: EnvSpec, episodes: int, seed: int, label="eval"):
    """Mean undiscounted team return and its normal-approx CI95 half-width.

    Each episode runs in a fresh environment on its own derived stream, so
    results do not depend on evaluation order or worker count.
    """
    returns = np.empty(episodes)
    for e in range(episodes):
        env = Env(spec, rng_mod.stream(seed, label, e))
        state = env.reset()
        total = 0.0
        for _ in range(spec.episode_length):
            state, r, done = env.step(policy_fn(state))
            total += r
        returns[e] = total
    mean = float(returns.mean())
    if episodes < 2:
        return mean, float("nan"), returns
    ci = 1.96 * float(returns.std(ddof=1)) / math.sqrt(episodes)
    return mean, ci, returns


def global_mu_policy(net: GlobalPolicyNet, spec: EnvSpec):
    """Deterministic acting from the trained global heads; sigma plays no part."""

    def policy(state):
        s = full_state_vector(spec, state).reshape(1, -1)
        return np.concatenate(net.mu_values(s), axis=0)  # (N, 2): one row per agent

    return policy


def local_policy(net: LocalCommPolicyNet, spec: EnvSpec):
    def policy(state):
        obs = [observe(spec, state, i).reshape(1, -1) for i in range(spec.num_agents)]
        _, actions = net.forward(obs)
        return np.concatenate(actions, axis=0)

    return policy


# -- checkpoints ----------------------------------------------------------------


def _manifest_path(net_path) -> Path:
    p = Path(net_path)
    return p.with_suffix(".json")


def save_checkpoint(net_path, store, manifest: dict) -> None:
    save_params(store, net_path)
    _manifest_path(net_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(net_path) -> dict:
    mp = _manifest_path(net_path)
    if not mp.exists():
        raise InputError(f"manifest not found: {mp}")
    return json.loads(mp.read_text())


def load_policy(net_path):
    """Rebuild a policy from a checkpoint; returns (policy_fn, manifest, spec)."""
    p = Path(net_path)
    if not p.exists():
        raise InputError(f"checkpoint not found: {net_path}")
    manifest = load_manifest(net_path)
    spec = make_spec(manifest["env_id"])
    store = load_params(net_path)
    if manifest["kind"] == "global":
        net = GlobalPolicyNet(spec.state_dim, spec.num_agents, hidden=manifest["hidden"])
        net.load_combined(store)
        return global_mu_policy(net, spec), manifest, spec
    if manifest["kind"] == "local":
        net = LocalCommPolicyNet(
            spec.obs_dim, spec.num_agents, manifest["message_dim"], hidden=manifest["hidden"]
        )
        for name, e in net.params.entries.items():
            e.value[...] = store[name].value
        return local_policy(net, spec), manifest, spec
    raise InputError(f"unknown checkpoint kind '{manifest['kind']}'")


def load_teacher(net_path) -> tuple[GlobalPolicyNet, dict, EnvSpec]:
    manifest = load_manifest(net_path)
    if manifest.get("kind") != "global":
        raise InputError(f"{net_path}: not a global-policy checkpoint")
    spec = make_spec(manifest["env_id"])
    net = GlobalPolicyNet(spec.state_dim, spec.num_agents, hidden=manifest["hidden"])
    net.load_combined(load_params(net_path))
    return net, manifest, spec


# -- stage 1 --------------------------------------------------------------------


def run_train(cfg: ExperimentConfig) -> dict[str, Path]:
    """Algorithm-1 sampling/learning loop; writes metrics, buffer, checkpoint."""
    cfg.validate()
    spec = make_spec(cfg.env_id)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    init_rng = rng_mod.stream(cfg.seed, "init", cfg.env_id, cfg.algorithm)
    act_rng = rng_mod.stream(cfg.seed, "act")
    batch_rng = rng_mod.stream(cfg.seed, "batch")
    env = Env(spec, rng_mod.stream(cfg.seed, "env"))

    is_ctedd = cfg.algorithm == "ctedd"
    if is_ctedd:
        net = GlobalPolicyNet(spec.state_dim, spec.num_agents, hidden=cfg.hidden, rng=init_rng)
        qnet = CentralQNet(spec.state_dim, spec.num_agents, hidden=cfg.hidden, rng=init_rng)
        target_theta = net.target_theta()
        target_q = qnet.clone()
        variant = "CTEDD-G"
        eval_policy = global_mu_policy(net, spec)
        lr = cfg.lr_ctedd
    else:
        net = LocalCommPolicyNet(
            spec.obs_dim, spec.num_agents, cfg.message_dim, hidden=cfg.hidden, rng=init_rng
        )
        qnet = CentralQNet(spec.state_dim, spec.num_agents, hidden=cfg.hidden, rng=init_rng)
        target_local = net.clone()
        target_q = qnet.clone()
        variant = f"MADDPG-{cfg.message_dim}"
        eval_policy = local_policy(net, spec)
        lr = cfg.lr_maddpg

    sched = AlphaSchedule(cfg.alpha_start, cfg.alpha_end, cfg.alpha_steps)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    preclip_log: dict[int, np.ndarray] = {}
    rows: list[MetricsRow] = []
    noise_std = cfg.maddpg_noise_std
    state = env.reset()
    t0 = time.perf_counter()

    for t in range(1, cfg.total_env_steps + 1):
        s_vec = full_state_vector(spec, state)
        if is_ctedd:
            samples = sample_actions(net, s_vec, act_rng, sigma_fixed=cfg.sigma_fixed)
            actions = np.stack([smp.action for smp in samples])
            preclip_log[t] = np.concatenate(
                [smp.mean + smp.epsilon * smp.std for smp in samples]
            )
        else:
            obs = [observe(spec, state, i).reshape(1, -1) for i in range(spec.num_agents)]
            _, acts = net.forward(obs)
            raw = np.concatenate(acts, axis=0)
            raw = raw + noise_std * act_rng.standard_normal(raw.shape)
            actions = np.clip(raw, -1.0, 1.0)

        next_state, reward, done = env.step(actions)
        buffer.push(
            Transition(
                s=s_vec,
                s_next=full_state_vector(spec, next_state),
                joint_action=actions.reshape(-1).copy(),
                reward=reward,
                t_global=t,
                done=0.0,  # time-limit ends are not environment-terminal
            )
        )
        if done:
            state = env.reset()
            noise_std *= cfg.maddpg_noise_decay
        else:
            state = next_state

        if t % cfg.learn_interval == 0 and len(buffer) >= cfg.batch:
            recent = buffer.recent_batch()
            batch = buffer.sample_uniform(cfg.batch, batch_rng)
            if is_ctedd:
                q_update(
                    qnet,
                    target_q,
                    lambda sn: global_det_mu(target_theta, spec.num_agents, sn),
                    batch,
                    cfg.gamma,
                    lr,
                    cfg.grad_clip,
                )
                dpg_update(net, qnet, batch, lr, cfg.grad_clip)
                if cfg.sigma_fixed is None and recent:
                    rb = RecentBatch(
                        states=np.stack([tr.s for tr in recent]),
                        actions=np.stack([tr.joint_action for tr in recent]),
                        preclip=np.stack([preclip_log[tr.t_global] for tr in recent]),
                    )
                    exploration_update(net, qnet, rb, alpha_at(sched, t), lr, cfg.grad_clip)
                preclip_log.clear()
                soft_update(target_theta, net.theta, cfg.tau)
                soft_update(target_q.params, qnet.params, cfg.tau)
            else:
                maddpg_train_step(
                    net, qnet, target_local, target_q, batch, spec, cfg.gamma, lr, cfg.grad_clip
                )
                soft_update(target_local.params, net.params, cfg.tau)
                soft_update(target_q.params, qnet.params, cfg.tau)

        if t % cfg.eval_every == 0:
            mean, ci, _ = evaluate_policy(
                eval_policy, spec, cfg.eval_episodes, cfg.seed, label=f"eval-{t}"
            )
            wall = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
            rows.append(MetricsRow(t, cfg.eval_episodes, variant, mean, ci, wall))

    metrics_path = out / "metrics.csv"
    write_metrics_csv(metrics_path, rows)
    buffer_path = out / "replay.buf"
    save_buffer(buffer, buffer_path, cfg.env_id, spec.num_agents, spec.state_dim, spec.action_dim)

    if is_ctedd:
        ckpt_path = out / "teacher.net"
        manifest = {
            "kind": "global",
            "variant": variant,
            "env_id": cfg.env_id,
            "n_agents": spec.num_agents,
            "state_dim": spec.state_dim,
            "obs_dim": spec.obs_dim,
            "action_dim": spec.action_dim,
            "hidden": cfg.hidden,
            "message_dim": None,
            "layers": net.theta.names() + net.omega.names(),
            "seed": cfg.seed,
        }
        save_checkpoint(ckpt_path, net.combined_store(), manifest)
    else:
        ckpt_path = out / "policy.net"
        manifest = {
            "kind": "local",
            "variant": variant,
            "env_id": cfg.env_id,
            "n_agents": spec.num_agents,
            "state_dim": spec.state_dim,
            "obs_dim": spec.obs_dim,
            "action_dim": spec.action_dim,
            "hidden": cfg.hidden,
            "message_dim": cfg.message_dim,
            "layers": net.params.names(),
            "seed": cfg.seed,
        }
        save_checkpoint(ckpt_path, net.params, manifest)
    return {"metrics": metrics_path, "buffer": buffer_path, "checkpoint": ckpt_path}


# -- stage 2 --------------------------------------------------------------------


def run_distill(cfg: ExperimentConfig, buffer_path, teacher_path) -> dict[str, Path]:
    """Offline distillation from persisted stage-1 artifacts."""
    bp = Path(buffer_path)
    if not bp.exists():
        raise InputError(f"buffer not found: {buffer_path}")
    buffer, meta = load_buffer(bp)
    teacher, manifest, spec = load_teacher(teacher_path)
    if meta["env_id"] != manifest["env_id"]:
        raise InputError(
            f"buffer env '{meta['env_id']}' does not match teacher env '{manifest['env_id']}'"
        )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    c = cfg.message_dim
    students = LocalCommPolicyNet(
        spec.obs_dim,
        spec.num_agents,
        c,
        hidden=cfg.hidden,
        rng=rng_mod.stream(cfg.seed, "distill-init", c),
    )
    dconf = DistillConfig(
        batch=cfg.distill_batch,
        repetitions_per_batch=cfg.distill_repetitions,
        lr=cfg.distill_lr,
        message_dim=c,
        grad_clip=cfg.grad_clip,
    )
    transitions = buffer.chronological()
    trace = distill_train(students, transitions, teacher, spec, dconf)

    tail = transitions[max(0, len(transitions) - max(1, len(transitions) // 10)):]
    probe_states = np.stack([tr.s for tr in tail])
    fid = fidelity_report(students, teacher, spec, probe_states)

    student_path = out / f"student_c{c}.net"
    save_checkpoint(
        student_path,
        students.params,
        {
            "kind": "local",
            "variant": f"CTEDD-L-{c}",
            "env_id": spec.env_id,
            "n_agents": spec.num_agents,
            "state_dim": spec.state_dim,
            "obs_dim": spec.obs_dim,
            "action_dim": spec.action_dim,
            "hidden": cfg.hidden,
            "message_dim": c,
            "layers": students.params.names(),
            "seed": cfg.seed,
            "teacher": str(teacher_path),
        },
    )
    trace_path = out / "distill_trace.csv"
    with open(trace_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch_index", "t_global_max", "loss"])
        for bi, tmax, loss in trace:
            w.writerow([bi, tmax, f"{loss:.9g}"])
    fid_path = out / "fidelity.csv"
    with open(fid_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["agent", "mse", "cosine"])
        for row in fid:
            w.writerow([row.agent, f"{row.mse:.9g}", f"{row.cosine:.9g}"])
    return {"student": student_path, "trace": trace_path, "fidelity": fid_path}


def run_eval(policy_path, env_id: str, episodes: int, seed: int):
    """Deterministic evaluation of a persisted policy; returns (variant, mean, ci95)."""
    policy_fn, manifest, spec = load_policy(policy_path)
    if manifest["env_id"] != env_id:
        raise InputError(
            f"checkpoint was trained on '{manifest['env_id']}', requested env '{env_id}'"
        )
    mean, ci, _ = evaluate_policy(policy_fn, spec, episodes, seed)
    return manifest["variant"], mean, ci


# -- gradient gate ---------------------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def _check_store(tape_builder, store, probe_weights) -> float:
    """tape_builder() must rebuild the tape and return output (node, tape) pairs."""

    def loss():
        pairs, tape = tape_builder()
        seeds = {nid: w for (nid, w) in pairs}
        total = sum(float(np.sum(w * tape.value(nid))) for nid, w in pairs)
        tape.backprop(seeds)
        return total

    def fwd():
        pairs, tape = tape_builder()
        return sum(float(np.sum(w * tape.value(nid))) for nid, w in pairs)

    return finite_diff_check(loss, store, 1e-5, forward_fn=fwd)


def run_gradcheck(envs=ENV_IDS, message_dims=(1, 3)) -> list[GradCheckResult]:
    """Finite-difference gate over every network family used in the project."""
    from .autodiff import Tape

    results = []
    for env_id in envs:
        spec = make_spec(env_id)
        rng = rng_mod.stream(20_26, "gradcheck", env_id)
        s = rng.uniform(-1.0, 1.0, size=(2, spec.state_dim))

        net = GlobalPolicyNet(spec.state_dim, spec.num_agents, rng=rng)
        w_mu = [rng.standard_normal((2, spec.action_dim)) for _ in range(spec.num_agents)]
        w_sig = [rng.standard_normal((2, spec.action_dim)) for _ in range(spec.num_agents)]

        def build_global():
            tape = Tape()
            mu_ids, sig_ids = net.tape_full(tape, s)
            pairs = [(nid, w) for nid, w in zip(mu_ids, w_mu)]
            pairs += [(nid, w) for nid, w in zip(sig_ids, w_sig)]
            return pairs, tape

        for label, store in (("theta", net.theta), ("omega", net.omega)):
            err = _check_store(build_global, store, None)
            results.append(
                GradCheckResult(f"{env_id}/global-policy/{label}", err, store.total_params())
            )

        qnet = CentralQNet(spec.state_dim, spec.num_agents, rng=rng)
        a = rng.uniform(-1.0, 1.0, size=(2, spec.num_agents * spec.action_dim))
        w_q = rng.standard_normal((2, 1))

        def build_q():
            tape = Tape()
            x_id = tape.input(np.concatenate([s, a], axis=1))
            q_id = tape.mlp(qnet.params, qnet.LAYERS, x_id)
            return [(q_id, w_q)], tape

        err = _check_store(build_q, qnet.params, None)
        results.append(GradCheckResult(f"{env_id}/central-q", err, qnet.params.total_params()))

        for c in message_dims:
            local = LocalCommPolicyNet(spec.obs_dim, spec.num_agents, c, rng=rng)
            obs = [rng.uniform(-1.0, 1.0, size=(2, spec.obs_dim)) for _ in range(spec.num_agents)]
            w_act = [rng.standard_normal((2, spec.action_dim)) for _ in range(spec.num_agents)]
            w_msg = [rng.standard_normal((2, c)) for _ in range(spec.num_agents)]

            def build_local():
                tape = Tape()
                msg_ids, act_ids, _ = local.tape_forward(tape, obs)
                pairs = [(nid, w) for nid, w in zip(act_ids, w_act)]
                pairs += [(nid, w) for nid, w in zip(msg_ids, w_msg)]
                return pairs, tape

            err = _check_store(build_local, local.params, None)
            results.append(
                GradCheckResult(f"{env_id}/local-comm-c{c}", err, local.params.total_params())
            )
    return results
