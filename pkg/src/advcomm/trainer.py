"""Rollout collection, advantage estimation and the two policy gradients.

The cooperative update ascends a clipped surrogate whose advantage is the
team sum (every agent's log-prob ratio carries the joint advantage); the
self-interested update uses only agent n's advantage but still sums the
ratio terms over all agents, so gradients reach theta^n through the
communication channel's influence on other agents' actions. Frozen groups
are never touched by the optimizer and are asserted bitwise unchanged.

`ppo_update` is generic over a policy callable returning per-agent action
log-probabilities and an optional value callable, which lets small tabular
policies exercise the exact same update path as the CNN/GNN actors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from . import graphnet as gn
from . import policy as pol
from .diffcore import ParamTree, Tensor
from .gridworld import GridWorld


@dataclass
class TrainerConfig:
    lr: float = 5e-4
    gamma: float = 0.9
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    batch_steps: int = 5000
    minibatch_steps: int = 1000
    sgd_iters: int = 5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    normalize_advantages: bool = True
    grad_clip_norm: float | None = 0.5
    optimizer: str = "adam"
    total_steps: int = 200_000

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must be in [0, 1)")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.minibatch_steps > self.batch_steps:
            raise ValueError("minibatch larger than batch")


def trainer_config_for(task: str, **over) -> TrainerConfig:
    base = dict(lr=5e-4, gamma=0.9)
    if task == "path_planning":
        base = dict(lr=4e-4, gamma=0.99)
    base.update(over)
    return TrainerConfig(**base)


@dataclass
class Trajectory:
    obs: np.ndarray        # (T, N, 2, fw, fh) float32
    adj: np.ndarray        # (T, N, N) float32 raw adjacency incl. self-loops
    states: np.ndarray     # (T, C, W, H) float32 rendered global states
    actions: np.ndarray    # (T, N) int64
    logp: np.ndarray       # (T, N) float32 behavior log-probs
    rewards: np.ndarray    # (T, N) float32
    values: np.ndarray     # (T, N) float32
    terminal: bool = True
    bootstrap: np.ndarray | None = None  # (N,) value of the cut-off state

    def __len__(self):
        return self.obs.shape[0]

    @property
    def episode_return(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


def compute_returns_and_gae(rewards, values, gamma: float, lam: float,
                            bootstrap=None) -> tuple[np.ndarray, np.ndarray]:
    """Exponentially weighted advantage recursion (float64).

    delta_t = r_t + gamma*V_{t+1} - V_t with V_T taken from `bootstrap`
    (zeros for terminal episodes); advantages run the backward recursion
    A_t = delta_t + gamma*lam*A_{t+1}; returns are A + V.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} misaligned with values {v.shape}")
    t_len, n = r.shape
    boot = np.zeros(n) if bootstrap is None else np.asarray(bootstrap, np.float64)
    v_next = np.vstack([v[1:], boot[None, :]])
    delta = r + gamma * v_next - v
    adv = np.zeros_like(delta)
    acc = np.zeros(n)
    for t in range(t_len - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v


# ---------------------------------------------------------------------------
# rollouts


def collect_rollouts(env_factory: Callable[[], GridWorld], params: ParamTree,
                     pcfg: pol.PolicyConfig, assignment: pol.ParamAssignment,
                     comm_mode: str, n_steps: int, seed: int,
                     with_values: bool = True) -> list[Trajectory]:
    """Run whole episodes under the parameter snapshot until at least
    `n_steps` environment steps are gathered (single-threaded,
    deterministic in `seed`)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    root = np.random.SeedSequence(seed)
    act_rng = np.random.default_rng(root.spawn(1)[0])
    trajs: list[Trajectory] = []
    steps = 0
    while steps < n_steps:
        env_seed = int(root.spawn(1)[0].generate_state(1)[0])
        trajs.append(_run_episode(env_factory, params, pcfg, assignment,
                                  comm_mode, env_seed, act_rng, with_values))
        steps += len(trajs[-1])
    return trajs


def _run_episode(env_factory, params, pcfg, assignment, comm_mode,
                 env_seed, act_rng, with_values) -> Trajectory:
    env = env_factory()
    res = env.reset(seed=env_seed)
    n = env.n_agents
    obs_l, adj_l, st_l, act_l, lp_l, rew_l = [], [], [], [], [], []
    done = False
    while not done:
        adj = gn.adjacency_from_edges(res.edges, n)
        state_t = pol.render_global_state(env.state, env.config, assignment)
        out = pol.joint_forward(params, pcfg, assignment, res.observations, adj,
                                comm_mode)
        actions, logp = pol.sample_actions(out.probs_np(), act_rng)
        obs_l.append(res.observations)
        adj_l.append(adj)
        st_l.append(state_t)
        act_l.append(actions)
        lp_l.append(logp)
        res = env.step(actions)
        rew_l.append(res.rewards)
        done = res.done
    obs = np.stack(obs_l)
    states = np.stack(st_l)
    if with_values:
        values = pol.values_for_agents(params, pcfg, assignment, obs, states,
                                       tuple(range(n))).data.astype(np.float32)
    else:
        values = np.zeros((len(obs_l), n), dtype=np.float32)
    return Trajectory(
        obs=obs, adj=np.stack(adj_l), states=states,
        actions=np.stack(act_l), logp=np.stack(lp_l),
        rewards=np.stack(rew_l).astype(np.float32), values=values,
        terminal=True,
    )


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    obs: np.ndarray
    adj: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantage: np.ndarray   # (B,) selected (summed over advantage agents)
    returns: np.ndarray     # (B, N) per-agent value targets
    mean_return: dict = field(default_factory=dict)

    def __len__(self):
        return self.obs.shape[0]

    def slice(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.adj[idx], self.states[idx],
                     self.actions[idx], self.logp_old[idx],
                     self.advantage[idx], self.returns[idx])


def build_batch(trajs: Sequence[Trajectory], tcfg: TrainerConfig,
                assignment: pol.ParamAssignment,
                advantage_agents: tuple[int, ...]) -> Batch:
    advs, rets = [], []
    for tr in trajs:
        a, g = compute_returns_and_gae(tr.rewards, tr.values, tcfg.gamma,
                                       tcfg.gae_lambda,
                                       None if tr.terminal else tr.bootstrap)
        advs.append(a)
        rets.append(g)
    adv = np.concatenate(advs)                      # (B, N) float64
    selected = adv[:, list(advantage_agents)].sum(axis=1)
    if tcfg.normalize_advantages:
        std = selected.std()
        selected = (selected - selected.mean()) / (std + 1e-8)
    returns_coop = np.array([tr.episode_return[list(assignment.coop_agents)].mean()
                             for tr in trajs])
    mean_ret = {"coop": float(returns_coop.mean())}
    if assignment.si_agent is not None:
        mean_ret["si"] = float(np.mean([tr.episode_return[assignment.si_agent]
                                        for tr in trajs]))
    return Batch(
        obs=np.concatenate([tr.obs for tr in trajs]),
        adj=np.concatenate([tr.adj for tr in trajs]),
        states=np.concatenate([tr.states for tr in trajs]),
        actions=np.concatenate([tr.actions for tr in trajs]),
        logp_old=np.concatenate([tr.logp for tr in trajs]),
        advantage=selected.astype(np.float32),
        returns=np.concatenate(rets).astype(np.float32),
        mean_return=mean_ret,
    )


# ---------------------------------------------------------------------------
# the PPO update


def make_policy_fn(pcfg: pol.PolicyConfig, assignment: pol.ParamAssignment,
                   comm_mode: str):
    def fn(params: ParamTree, mb: Batch) -> pol.PolicyOutput:
        return pol.joint_forward(params, pcfg, assignment, mb.obs, mb.adj, comm_mode)
    return fn


def make_value_fn(pcfg: pol.PolicyConfig, assignment: pol.ParamAssignment,
                  agents: tuple[int, ...]):
    def fn(params: ParamTree, mb: Batch) -> Tensor:
        return pol.values_for_agents(params, pcfg, assignment, mb.obs, mb.states,
                                     agents)
    return fn


def ppo_update(params: ParamTree, batch: Batch, tcfg: TrainerConfig,
               optimizer, policy_fn, value_fn,
               trainable_prefixes: tuple[str, ...],
               entropy_agents: tuple[int, ...],
               valued_agents: tuple[int, ...],
               rng: np.random.Generator) -> tuple[ParamTree, dict]:
    """Clipped-surrogate ascent over `sgd_iters` passes of minibatches.

    The surrogate sums every agent's ratio term against the batch's selected
    advantage; the entropy bonus and the value fit cover only the trained
    group. Returns updated parameters (untrained paths carried by
    reference) and scalar metrics.
    """
    b = len(batch)
    metrics = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
               "clip_fraction": 0.0}
    n_mb = 0
    new_params = params
    for _ in range(tcfg.sgd_iters):
        order = rng.permutation(b)
        for lo in range(0, b, tcfg.minibatch_steps):
            mb_idx = order[lo:lo + tcfg.minibatch_steps]
            mb = batch.slice(mb_idx)
            with dc.ComputationRecord() as rec:
                out = policy_fn(new_params, mb)
                logp_new = dc.gather_last(out.log_probs, mb.actions)
                delta = dc.clip(dc.sub(logp_new, mb.logp_old), -20.0, 20.0)
                ratio = dc.exp(delta)
                adv = mb.advantage[:, None]
                unclipped = dc.mul(ratio, adv)
                clipped = dc.mul(dc.clip(ratio, 1.0 - tcfg.clip_eps,
                                         1.0 + tcfg.clip_eps), adv)
                surrogate = dc.minimum(unclipped, clipped)
                policy_obj = dc.reduce_mean(dc.reduce_sum(surrogate, axis=1))
                objective = policy_obj

                ent_val = 0.0
                if tcfg.entropy_coef != 0.0 and entropy_agents:
                    plogp = dc.mul(out.probs, out.log_probs)
                    ent_all = dc.scale(dc.reduce_sum(plogp, axis=2), -1.0)  # (B,N)
                    ent_rows = dc.take(ent_all, np.asarray(entropy_agents), axis=1)
                    ent_obj = dc.reduce_mean(dc.reduce_sum(ent_rows, axis=1))
                    objective = dc.add(objective, dc.scale(ent_obj, tcfg.entropy_coef))
                    ent_val = ent_obj.item() / len(entropy_agents)

                v_val = 0.0
                if value_fn is not None and tcfg.value_coef != 0.0 and valued_agents:
                    v = value_fn(new_params, mb)
                    targets = mb.returns[:, list(valued_agents)]
                    v_loss = dc.mse(v, targets)
                    objective = dc.add(objective, dc.scale(v_loss, -tcfg.value_coef))
                    v_val = v_loss.item()

            if not math.isfinite(objective.item()):
                raise FloatingPointError(
                    f"non-finite loss in minibatch at offset {lo}")
            grads = dc.backward(rec, objective, new_params)
            sub = ParamTree({p: g for p, g in grads.items()
                             if any(p == pre or p.startswith(pre + ".")
                                    for pre in trainable_prefixes)})
            if tcfg.grad_clip_norm is not None:
                sub, _ = dc.clip_by_global_norm(sub, tcfg.grad_clip_norm)
            new_params = optimizer.step(new_params, sub)

            metrics["policy_loss"] += -policy_obj.item()
            metrics["value_loss"] += v_val
            metrics["entropy"] += ent_val
            metrics["clip_fraction"] += float(
                np.mean(np.abs(ratio.data - 1.0) > tcfg.clip_eps))
            n_mb += 1
    for k in metrics:
        metrics[k] /= max(n_mb, 1)
    return new_params, metrics


# ---------------------------------------------------------------------------
# phases


PHASES = ("cooperative", "self_interested", "readapt")


def phase_roles(phase: str, assignment: pol.ParamAssignment) -> dict:
    all_agents = tuple(range(assignment.n_agents))
    if phase == "cooperative":
        return dict(trainable=("actor.coop", "critic.coop"),
                    advantage_agents=all_agents,
                    trained_agents=all_agents)
    if assignment.si_agent is None:
        raise ValueError(f"phase {phase!r} requires a self-interested agent")
    if phase == "self_interested":
        return dict(trainable=("actor.si", "critic.si"),
                    advantage_agents=assignment.si_agents,
                    trained_agents=assignment.si_agents)
    if phase == "readapt":
        return dict(trainable=("actor.coop", "critic.coop"),
                    advantage_agents=assignment.coop_agents,
                    trained_agents=assignment.coop_agents)
    raise ValueError(f"unknown phase {phase!r}")


def prepare_si_params(prior: ParamTree, pcfg: pol.PolicyConfig,
                      assignment: pol.ParamAssignment, rng: np.random.Generator,
                      si_init: str = "clone") -> ParamTree:
    """Introduce the self-interested agent next to a cooperative checkpoint:
    its actor starts as a copy of the cooperative one ("clone") or fresh;
    its critic is always re-initialized (the value landscape changes)."""
    params = ParamTree({p: t for p, t in prior.items()})
    if si_init == "clone":
        params.update(pol.clone_subtree(prior, "actor.coop", "actor.si"))
    elif si_init == "fresh":
        params.update(pol.init_actor_params(pcfg, "actor.si", rng))
    else:
        raise ValueError(f"unknown si_init {si_init!r}")
    params.update(pol.init_critic_params(pcfg, "critic.si", rng))
    return params


def run_phase(phase: str, env_factory: Callable[[], GridWorld],
              assignment: pol.ParamAssignment, pcfg: pol.PolicyConfig,
              tcfg: TrainerConfig, seed: int,
              init_params: ParamTree | None = None,
              metrics_fp=None, si_init: str = "clone",
              log_cb=None) -> tuple[ParamTree, list[dict]]:
    """Train one curriculum phase; returns final parameters and the metric
    history (also written to `metrics_fp` as JSON lines if given)."""
    roles = phase_roles(phase, assignment)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    if phase == "cooperative":
        params = init_params if init_params is not None else \
            pol.init_joint_params(pcfg, assignment, rng)
    elif phase == "self_interested":
        if init_params is None:
            raise ValueError("self_interested phase requires a prior cooperative checkpoint")
        params = init_params if "actor.si.enc.fc.w" in init_params else \
            prepare_si_params(init_params, pcfg, assignment, rng, si_init)
    else:  # readapt
        if init_params is None or "actor.si.enc.fc.w" not in init_params:
            raise ValueError("readapt phase requires a checkpoint containing the SI agent")
        params = init_params

    frozen_prefixes = tuple(p for p in ("actor.coop", "critic.coop", "actor.si", "critic.si")
                            if p not in roles["trainable"] and len(params.subtree(p)))
    frozen_before = {pre: {p: t for p, t in params.subtree(pre).items()}
                     for pre in frozen_prefixes}

    optimizer = dc.make_optimizer(dc.OptimConfig(kind=tcfg.optimizer, lr=tcfg.lr))
    policy_fn = make_policy_fn(pcfg, assignment, "full")
    value_fn = make_value_fn(pcfg, assignment, roles["trained_agents"])
    seeds = np.random.SeedSequence(seed + 7_777_777)

    history = []
    env_steps = 0
    iteration = 0
    while env_steps < tcfg.total_steps:
        collect_seed = int(seeds.spawn(1)[0].generate_state(1)[0])
        trajs = collect_rollouts(env_factory, params, pcfg, assignment, "full",
                                 tcfg.batch_steps, collect_seed)
        batch = build_batch(trajs, tcfg, assignment, roles["advantage_agents"])
        params, metrics = ppo_update(
            params, batch, tcfg, optimizer, policy_fn, value_fn,
            roles["trainable"], roles["trained_agents"], roles["trained_agents"],
            rng)
        env_steps += sum(len(t) for t in trajs)
        iteration += 1

        for pre, before in frozen_before.items():
            for p, t in before.items():
                if params[p] is not t and not np.array_equal(params[p].data, t.data):
                    raise AssertionError(f"frozen parameter {p} changed during {phase}")

        row = {
            "phase": phase,
            "iteration": iteration,
            "env_steps": env_steps,
            "mean_return_coop": batch.mean_return.get("coop"),
            "mean_return_si": batch.mean_return.get("si"),
            "policy_loss": metrics["policy_loss"],
            "value_loss": metrics["value_loss"],
            "entropy": metrics["entropy"],
            "clip_fraction": metrics["clip_fraction"],
        }
        history.append(row)
        if metrics_fp is not None:
            metrics_fp.write(json.dumps(row) + "\n")
            metrics_fp.flush()
        if log_cb is not None:
            log_cb(row)
    return params, history


# ---------------------------------------------------------------------------
# evaluation rollouts


@dataclass
class EvalResult:
    returns: np.ndarray        # (episodes, N) per-agent episode returns
    reward_curves: np.ndarray  # (episodes, horizon, N) per-step rewards

    def group_stats(self, agents: tuple[int, ...]) -> tuple[float, float]:
        """Mean and 1-sigma of per-agent returns pooled over episodes."""
        vals = self.returns[:, list(agents)].reshape(-1)
        return float(vals.mean()), float(vals.std())


def evaluate_policy(params: ParamTree, pcfg: pol.PolicyConfig,
                    assignment: pol.ParamAssignment,
                    env_factory: Callable[[], GridWorld], comm_mode: str,
                    episodes: int, horizon: int, seed: int,
                    greedy: bool = False) -> EvalResult:
    """Fixed-horizon evaluation (early termination disabled by the factory)."""
    root = np.random.SeedSequence(seed)
    act_rng = np.random.default_rng(root.spawn(1)[0])
    returns = np.zeros((episodes, assignment.n_agents), dtype=np.float64)
    curves = np.zeros((episodes, horizon, assignment.n_agents), dtype=np.float32)
    for ep in range(episodes):
        env = env_factory()
        env_seed = int(root.spawn(1)[0].generate_state(1)[0])
        res = env.reset(seed=env_seed)
        for t in range(horizon):
            adj = gn.adjacency_from_edges(res.edges, env.n_agents)
            out = pol.joint_forward(params, pcfg, assignment, res.observations,
                                    adj, comm_mode)
            probs = out.probs_np()
            if greedy:
                actions = probs.argmax(axis=-1)
            else:
                actions, _ = pol.sample_actions(probs, act_rng)
            res = env.step(actions)
            returns[ep] += res.rewards
            curves[ep, t] = res.rewards
            if res.done:
                break
    return EvalResult(returns=returns, reward_curves=curves)
