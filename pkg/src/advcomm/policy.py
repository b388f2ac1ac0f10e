"""Actor and centralized-critic networks.

Actor (local, decentralizable): per-agent CNN encoder -> shared-channel
AGNN -> MLP action head with softmax over the 5 grid actions. Critic
(training only): CNN over the agent's observation + CNN over a rendered
global-state tensor, concatenated into an MLP producing a scalar value.

Agents are partitioned into a cooperative group (shared parameters under
"actor.coop.* / critic.coop.*") and an optional self-interested agent
("actor.si.* / critic.si.*"). All agents exchange messages over one
differentiable channel regardless of group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import graphnet as gn
from .diffcore import ParamTree, Tensor
from .gridworld import EnvConfig, WorldState

COMM_MODES = ("full", "no_comms", "mask_si_outgoing")
N_ACTIONS = 5
GROUPS = ("coop", "si")


@dataclass(frozen=True)
class PolicyConfig:
    fov: tuple[int, int] = (11, 11)
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    enc_dim: int = 64            # F, the transmitted message width
    gnn_hops: int = 3            # K
    gnn_layers: int = 1          # L
    gnn_dim: int = 64            # F'
    head_hidden: int = 64
    leaky_slope: float = 0.01
    state_shape: tuple[int, int] = (24, 24)
    state_channels: int = 4
    critic_conv_channels: tuple[int, int] = (16, 32)
    critic_feat: int = 64
    critic_hidden: int = 64


def desk_policy_config(env: EnvConfig, **over) -> PolicyConfig:
    """Small architecture for laptop-scale experiments."""
    base = dict(
        fov=env.fov,
        conv_channels=(8, 16, 16),
        enc_dim=16,
        gnn_hops=2,
        gnn_dim=16,
        head_hidden=32,
        state_shape=(env.width, env.height),
        critic_conv_channels=(8, 16),
        critic_feat=32,
        critic_hidden=32,
    )
    base.update(over)
    return PolicyConfig(**base)


@dataclass(frozen=True)
class ParamAssignment:
    """Which agents run the shared cooperative parameters vs their own."""

    n_agents: int
    si_agent: int | None = None

    def __post_init__(self):
        if self.si_agent is not None and not (0 <= self.si_agent < self.n_agents):
            raise ValueError(f"si_agent {self.si_agent} out of range")

    @property
    def coop_agents(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_agents) if i != self.si_agent)

    @property
    def si_agents(self) -> tuple[int, ...]:
        return () if self.si_agent is None else (self.si_agent,)

    def group_of(self, agent: int) -> str:
        return "si" if agent == self.si_agent else "coop"

    def groups(self) -> list[tuple[str, tuple[int, ...]]]:
        out = [("coop", self.coop_agents)]
        if self.si_agent is not None:
            out.append(("si", self.si_agents))
        return out

    def agents_of(self, group: str) -> tuple[int, ...]:
        return self.coop_agents if group == "coop" else self.si_agents


# ---------------------------------------------------------------------------
# initialization


def _orthogonal(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols], dtype=np.float32)


def _init_conv(tree, prefix, c_in, c_out, gain, rng, k=3):
    w = _orthogonal(c_out, c_in * k * k, gain, rng).reshape(c_out, c_in, k, k)
    tree[f"{prefix}.w"] = Tensor(w)
    tree[f"{prefix}.b"] = Tensor(np.zeros(c_out, np.float32))


def _init_dense(tree, prefix, f_in, f_out, gain, rng):
    tree[f"{prefix}.w"] = Tensor(_orthogonal(f_in, f_out, gain, rng))
    tree[f"{prefix}.b"] = Tensor(np.zeros(f_out, np.float32))


def _pooled(s: int, n_pools: int = 2) -> int:
    for _ in range(n_pools):
        s //= 2
    if s < 1:
        raise ValueError(f"spatial size collapses to zero after {n_pools} poolings")
    return s


def _enc_flat_dim(cfg: PolicyConfig) -> int:
    return cfg.conv_channels[2] * _pooled(cfg.fov[0]) * _pooled(cfg.fov[1])


def _critic_flat_dim(cfg: PolicyConfig, shape: tuple[int, int]) -> int:
    return cfg.critic_conv_channels[1] * _pooled(shape[0]) * _pooled(shape[1])


def _gnn_tap_path(prefix: str, layer: int, k: int, n_layers: int) -> str:
    if n_layers == 1:
        return f"{prefix}.gnn.tap.k{k}"
    return f"{prefix}.gnn.l{layer}.tap.k{k}"


def init_actor_params(cfg: PolicyConfig, prefix: str, rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    c1, c2, c3 = cfg.conv_channels
    _init_conv(tree, f"{prefix}.enc.conv0", 2, c1, np.sqrt(2), rng)
    _init_conv(tree, f"{prefix}.enc.conv1", c1, c2, np.sqrt(2), rng)
    _init_conv(tree, f"{prefix}.enc.conv2", c2, c3, np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.enc.fc", _enc_flat_dim(cfg), cfg.enc_dim, 1.0, rng)
    tap_gain = 1.0 / np.sqrt(cfg.gnn_hops + 1)
    for li in range(cfg.gnn_layers):
        f_in = cfg.enc_dim if li == 0 else cfg.gnn_dim
        for k in range(cfg.gnn_hops + 1):
            tree[_gnn_tap_path(prefix, li, k, cfg.gnn_layers)] = Tensor(
                _orthogonal(f_in, cfg.gnn_dim, tap_gain, rng))
    _init_dense(tree, f"{prefix}.head.fc0", cfg.gnn_dim, cfg.head_hidden, np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.head.fc1", cfg.head_hidden, N_ACTIONS, 0.01, rng)
    return tree


def init_critic_params(cfg: PolicyConfig, prefix: str, rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    k1, k2 = cfg.critic_conv_channels
    _init_conv(tree, f"{prefix}.obs.conv0", 2, k1, np.sqrt(2), rng)
    _init_conv(tree, f"{prefix}.obs.conv1", k1, k2, np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.obs.fc", _critic_flat_dim(cfg, cfg.fov),
                cfg.critic_feat, np.sqrt(2), rng)
    _init_conv(tree, f"{prefix}.state.conv0", cfg.state_channels, k1, np.sqrt(2), rng)
    _init_conv(tree, f"{prefix}.state.conv1", k1, k2, np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.state.fc", _critic_flat_dim(cfg, cfg.state_shape),
                cfg.critic_feat, np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.head.fc0", 2 * cfg.critic_feat, cfg.critic_hidden,
                np.sqrt(2), rng)
    _init_dense(tree, f"{prefix}.head.fc1", cfg.critic_hidden, 1, 1.0, rng)
    return tree


def init_joint_params(cfg: PolicyConfig, assignment: ParamAssignment,
                      rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    tree.update(init_actor_params(cfg, "actor.coop", rng))
    tree.update(init_critic_params(cfg, "critic.coop", rng))
    if assignment.si_agent is not None:
        tree.update(init_actor_params(cfg, "actor.si", rng))
        tree.update(init_critic_params(cfg, "critic.si", rng))
    return tree


def clone_subtree(params: ParamTree, src_prefix: str, dst_prefix: str) -> ParamTree:
    """Copy e.g. actor.coop.* into actor.si.* (fresh tensors)."""
    out = ParamTree()
    for p, t in params.subtree(src_prefix).items():
        out[dst_prefix + p[len(src_prefix):]] = t.copy()
    return out


# ---------------------------------------------------------------------------
# forward passes


def _conv_block(params: ParamTree, prefix: str, x, n_convs: int,
                slope: float):
    h = x
    for i in range(n_convs):
        h = dc.leaky_relu(dc.conv2d(h, params[f"{prefix}.conv{i}.w"],
                                    params[f"{prefix}.conv{i}.b"], padding=1), slope)
        if i < 2:
            h = dc.avgpool2x(h)
    b = h.shape[0]
    flat = dc.reshape(h, (b, int(np.prod(h.shape[1:]))))
    return dc.dense(flat, params[f"{prefix}.fc.w"], params[f"{prefix}.fc.b"])


def encoder_forward(params: ParamTree, cfg: PolicyConfig, prefix: str, obs) -> Tensor:
    """(B, 2, fov_w, fov_h) observations -> (B, enc_dim) transmitted encodings."""
    return _conv_block(params, f"{prefix}.enc", obs, 3, cfg.leaky_slope)


def head_forward(params: ParamTree, cfg: PolicyConfig, prefix: str, feats) -> Tensor:
    h = dc.leaky_relu(dc.dense(feats, params[f"{prefix}.head.fc0.w"],
                               params[f"{prefix}.head.fc0.b"]), cfg.leaky_slope)
    return dc.dense(h, params[f"{prefix}.head.fc1.w"], params[f"{prefix}.head.fc1.b"])


def _banks_for(params: ParamTree, cfg: PolicyConfig, assignment: ParamAssignment,
               layer: int) -> gn.FilterBank | gn.HeteroFilterBank:
    def bank(prefix):
        return gn.FilterBank(taps=[
            params[_gnn_tap_path(prefix, layer, k, cfg.gnn_layers)]
            for k in range(cfg.gnn_hops + 1)])

    if assignment.si_agent is None:
        return bank("actor.coop")
    return gn.HeteroFilterBank(
        n_agents=assignment.n_agents,
        groups=[(assignment.coop_agents, bank("actor.coop")),
                (assignment.si_agents, bank("actor.si"))])


def comm_matrices(adj: np.ndarray, assignment: ParamAssignment,
                  comm_mode: str) -> np.ndarray:
    """Normalized shift operators for a batch of raw adjacencies."""
    if comm_mode not in COMM_MODES:
        raise ValueError(f"unknown comm mode {comm_mode!r}")
    if comm_mode == "no_comms":
        return np.zeros_like(adj, dtype=np.float32)
    if comm_mode == "mask_si_outgoing":
        if assignment.si_agent is None:
            raise ValueError("mask_si_outgoing requires a self-interested agent")
        adj = gn.mask_outgoing_adjacency(adj, assignment.si_agent)
    return gn.normalize_adjacency(adj, "symmetric")


@dataclass
class PolicyOutput:
    logits: Tensor                 # (B, N, 5)
    log_probs: Tensor              # (B, N, 5)
    probs: Tensor                  # (B, N, 5)
    encodings: Tensor | None = None  # (B, N, F)   first transmitted messages
    gnn_out: Tensor | None = None    # (B, N, F')  post-aggregation features
    single_step: bool = False

    def probs_np(self) -> np.ndarray:
        p = self.probs.data
        return p[0] if self.single_step else p

    def log_probs_np(self) -> np.ndarray:
        lp = self.log_probs.data
        return lp[0] if self.single_step else lp


def _group_stack(per_group: list[Tensor], orders: list[tuple[int, ...]], n: int) -> Tensor:
    stacked = dc.concat(per_group, axis=1) if len(per_group) > 1 else per_group[0]
    order = [i for grp in orders for i in grp]
    inverse = np.empty(n, dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(n)
    if np.array_equal(inverse, np.arange(n)):
        return stacked
    return dc.take(stacked, inverse, axis=1)


def joint_forward(params: ParamTree, cfg: PolicyConfig, assignment: ParamAssignment,
                  obs: np.ndarray, adj: np.ndarray,
                  comm_mode: str = "full") -> PolicyOutput:
    """Run every agent's policy over the shared channel.

    obs: (B, N, 2, fov_w, fov_h) or a single step (N, 2, fov_w, fov_h);
    adj: raw adjacency (self-loops included) matching the leading dims.
    """
    single = obs.ndim == 4
    if single:
        obs = obs[None]
        adj = adj[None]
    b, n = obs.shape[0], obs.shape[1]
    if n != assignment.n_agents:
        raise dc.ShapeError(f"{n} observations for {assignment.n_agents} agents")
    if adj.shape != (b, n, n):
        raise dc.ShapeError(f"adjacency {adj.shape} does not match obs {obs.shape}")

    # per-group encoders
    enc_groups, orders = [], []
    for gname, agents in assignment.groups():
        idx = np.asarray(agents, dtype=np.intp)
        gob = obs[:, idx].reshape(b * len(idx), *obs.shape[2:])
        enc = encoder_forward(params, cfg, f"actor.{gname}", gob)
        enc_groups.append(dc.reshape(enc, (b, len(idx), cfg.enc_dim)))
        orders.append(agents)
    X = _group_stack(enc_groups, orders, n)

    # shared channel
    S = comm_matrices(adj, assignment, comm_mode)
    layers = [_banks_for(params, cfg, assignment, li) for li in range(cfg.gnn_layers)]
    Xp = gn.agnn_forward(X, S, layers)

    # per-group heads
    logit_groups = []
    for gname, agents in assignment.groups():
        idx = np.asarray(agents, dtype=np.intp)
        rows = dc.take(Xp, idx, axis=1)
        logit_groups.append(head_forward(params, cfg, f"actor.{gname}", rows))
    logits = _group_stack(logit_groups, orders, n)

    return PolicyOutput(
        logits=logits,
        log_probs=dc.log_softmax(logits),
        probs=dc.softmax(logits),
        encodings=X,
        gnn_out=Xp,
        single_step=single,
    )


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent categorical samples; returns (actions, log_probs)."""
    p = np.asarray(probs, dtype=np.float64)
    lead = p.shape[:-1]
    flat = p.reshape(-1, p.shape[-1])
    flat = flat / flat.sum(axis=1, keepdims=True)
    u = rng.random((flat.shape[0], 1))
    cum = np.cumsum(flat, axis=1)
    acts = (u >= cum).sum(axis=1)
    acts = np.minimum(acts, p.shape[-1] - 1).astype(np.int64)
    logp = np.log(np.maximum(flat[np.arange(flat.shape[0]), acts], 1e-30))
    return acts.reshape(lead), logp.reshape(lead).astype(np.float32)


def critic_value(params: ParamTree, cfg: PolicyConfig, group: str,
                 obs, states) -> Tensor:
    """Scalar value per batch row from (local obs, global state)."""
    prefix = f"critic.{group}"
    f_obs = dc.leaky_relu(_conv_block(params, f"{prefix}.obs", obs, 2, cfg.leaky_slope),
                          cfg.leaky_slope)
    f_state = dc.leaky_relu(_conv_block(params, f"{prefix}.state", states, 2,
                                        cfg.leaky_slope), cfg.leaky_slope)
    feats = dc.concat([f_obs, f_state], axis=1)
    h = dc.leaky_relu(dc.dense(feats, params[f"{prefix}.head.fc0.w"],
                               params[f"{prefix}.head.fc0.b"]), cfg.leaky_slope)
    v = dc.dense(h, params[f"{prefix}.head.fc1.w"], params[f"{prefix}.head.fc1.b"])
    return dc.reshape(v, (v.shape[0],))


def values_for_agents(params: ParamTree, cfg: PolicyConfig, assignment: ParamAssignment,
                      obs: np.ndarray, states: np.ndarray,
                      agents: tuple[int, ...]) -> Tensor:
    """(B, len(agents)) values, each agent scored by its group's critic."""
    b = obs.shape[0]
    cols = []
    for a in agents:
        v = critic_value(params, cfg, assignment.group_of(a), obs[:, a], states)
        cols.append(dc.reshape(v, (b, 1)))
    return dc.concat(cols, axis=1) if len(cols) > 1 else cols[0]


def render_global_state(state: WorldState, env: EnvConfig,
                        assignment: ParamAssignment) -> np.ndarray:
    """Critic input: obstacles, per-group agent occupancy, coverage/goals."""
    w, h = state.obstacles.shape
    out = np.zeros((4, w, h), dtype=np.float32)
    out[0] = state.obstacles
    for i, (x, y) in enumerate(state.positions):
        ch = 2 if i == assignment.si_agent else 1
        out[ch, x, y] = 1.0
    if state.coverage is not None:
        out[3] = state.global_coverage()
    elif state.goals is not None:
        for x, y in state.goals:
            out[3, x, y] = 1.0
    return out


# ---------------------------------------------------------------------------
# decentralized execution path (equivalence oracle uses the matrix form)


def decentralized_forward(params: ParamTree, cfg: PolicyConfig,
                          assignment: ParamAssignment, obs: np.ndarray,
                          S: gn.GraphShiftOperator) -> np.ndarray:
    """Single-step distributions via per-node message rounds; the GNN layer
    runs through local_node_execute instead of matrix powers."""
    if cfg.gnn_layers != 1:
        raise NotImplementedError("decentralized path implemented for L=1")
    n = assignment.n_agents
    enc = np.zeros((n, cfg.enc_dim), dtype=np.float32)
    for gname, agents in assignment.groups():
        idx = np.asarray(agents, dtype=np.intp)
        enc_g = encoder_forward(params, cfg, f"actor.{gname}", obs[idx])
        enc[idx] = enc_g.data
    banks = _banks_for(params, cfg, assignment, 0)
    if isinstance(banks, gn.FilterBank):
        banks = gn.HeteroFilterBank(n_agents=n, groups=[(tuple(range(n)), banks)])
    agg = gn.run_decentralized(enc, S, banks)
    # same nonlinearity the centralized AGNN applies between layers
    feats = np.where(agg > 0, agg, 0.01 * agg).astype(np.float32)
    probs = np.zeros((n, N_ACTIONS), dtype=np.float32)
    for gname, agents in assignment.groups():
        for a in agents:
            logits = head_forward(params, cfg, f"actor.{gname}", feats[a][None])
            probs[a] = dc.softmax(logits).data[0]
    return probs


# ---------------------------------------------------------------------------
# checkpoints (parameters + assignment + architecture metadata in one file)


def save_checkpoint(path: str, params: ParamTree, cfg: PolicyConfig,
                    assignment: ParamAssignment) -> None:
    tree = ParamTree({p: t for p, t in params.items()})

    def meta(name, values):
        tree[f"meta.{name}"] = Tensor(np.asarray(values, dtype=np.float32))

    meta("n_agents", [assignment.n_agents])
    meta("si_agent", [-1 if assignment.si_agent is None else assignment.si_agent])
    meta("policy.fov", cfg.fov)
    meta("policy.conv_channels", cfg.conv_channels)
    meta("policy.enc_dim", [cfg.enc_dim])
    meta("policy.gnn", [cfg.gnn_hops, cfg.gnn_layers, cfg.gnn_dim])
    meta("policy.head_hidden", [cfg.head_hidden])
    meta("policy.leaky_slope", [cfg.leaky_slope])
    meta("policy.state", [cfg.state_channels, *cfg.state_shape])
    meta("policy.critic", [*cfg.critic_conv_channels, cfg.critic_feat, cfg.critic_hidden])
    dc.save_param_tree(tree, path)


def load_checkpoint(path: str) -> tuple[ParamTree, PolicyConfig, ParamAssignment]:
    tree = dc.load_param_tree(path)

    def meta(name):
        return tree[f"meta.{name}"].data

    ints = lambda a: tuple(int(round(float(v))) for v in a)
    n_agents = ints(meta("n_agents"))[0]
    si = ints(meta("si_agent"))[0]
    gnn = ints(meta("policy.gnn"))
    state = ints(meta("policy.state"))
    critic = ints(meta("policy.critic"))
    cfg = PolicyConfig(
        fov=ints(meta("policy.fov")),
        conv_channels=ints(meta("policy.conv_channels")),
        enc_dim=ints(meta("policy.enc_dim"))[0],
        gnn_hops=gnn[0], gnn_layers=gnn[1], gnn_dim=gnn[2],
        head_hidden=ints(meta("policy.head_hidden"))[0],
        # slopes are persisted at float32 precision
        leaky_slope=round(float(meta("policy.leaky_slope")[0]), 8),
        state_channels=state[0], state_shape=(state[1], state[2]),
        critic_conv_channels=(critic[0], critic[1]),
        critic_feat=critic[2], critic_hidden=critic[3],
    )
    assignment = ParamAssignment(n_agents=n_agents, si_agent=None if si < 0 else si)
    params = ParamTree({p: t for p, t in tree.items() if not p.startswith("meta.")})
    return params, cfg, assignment
