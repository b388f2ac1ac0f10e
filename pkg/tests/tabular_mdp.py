"""Exact two-agent tabular games for validating the policy-gradient
estimators by full trajectory enumeration.

Model A ("shared"): both agents run softmax(theta_c[s]); the team estimator
sums every agent's score against the joint (summed) advantage.

Model B ("channel"): agent 1 is self-interested with its own logits table
and a 2-vector message m; agent 0's logits are theta_c[s] + W[s] @ m, a
differentiable one-hop channel. Gradients w.r.t. theta_n = (logits, m) flow
into agent 0's actions only through m.

Horizon 2, gamma = 1, deterministic transitions s' = (s + a0 + a1) mod 2:
with Monte-Carlo advantages G_t - V_t(s_t) from exact per-step values, the
estimator's expectation equals the true objective gradient exactly, so
enumeration comparisons can run at 1e-6 relative tolerance in float64.
"""

from dataclasses import dataclass
from itertools import product

import numpy as np

N_STATES = 2
N_ACTIONS = 2
HORIZON = 2


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TabularGame:
    rewards: np.ndarray            # (agent, s, a0, a1)
    theta_c: np.ndarray            # (s, a) cooperative logits
    si_logits: np.ndarray | None = None   # (s, a), model B only
    si_msg: np.ndarray | None = None      # (2,), model B only
    W: np.ndarray | None = None           # (s, a, msg), model B channel
    horizon: int = HORIZON

    @property
    def model(self) -> str:
        return "shared" if self.si_logits is None else "channel"

    def pi(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent policies, each (s, a)."""
        if self.model == "shared":
            p = _softmax(self.theta_c)
            return p, p
        logits0 = self.theta_c + np.einsum("sam,m->sa", self.W, self.si_msg)
        return _softmax(logits0), _softmax(self.si_logits)

    def n_params(self) -> int:
        return self.theta_c.size if self.model == "shared" else \
            self.si_logits.size + self.si_msg.size

    def flat_params(self) -> np.ndarray:
        if self.model == "shared":
            return self.theta_c.reshape(-1).copy()
        return np.concatenate([self.si_logits.reshape(-1), self.si_msg])

    def with_flat_params(self, flat) -> "TabularGame":
        g = TabularGame(rewards=self.rewards, theta_c=self.theta_c.copy(),
                        si_logits=None if self.si_logits is None else self.si_logits.copy(),
                        si_msg=None if self.si_msg is None else self.si_msg.copy(),
                        W=self.W, horizon=self.horizon)
        if g.model == "shared":
            g.theta_c = np.asarray(flat, dtype=np.float64).reshape(g.theta_c.shape)
        else:
            k = g.si_logits.size
            g.si_logits = np.asarray(flat[:k], dtype=np.float64).reshape(g.si_logits.shape)
            g.si_msg = np.asarray(flat[k:], dtype=np.float64)
        return g


def make_game(model: str, seed: int = 0) -> TabularGame:
    rng = np.random.default_rng(seed)
    rewards = rng.normal(size=(2, N_STATES, N_ACTIONS, N_ACTIONS))
    theta_c = rng.normal(size=(N_STATES, N_ACTIONS)) * 0.5
    if model == "shared":
        return TabularGame(rewards=rewards, theta_c=theta_c)
    return TabularGame(
        rewards=rewards, theta_c=theta_c,
        si_logits=rng.normal(size=(N_STATES, N_ACTIONS)) * 0.5,
        si_msg=rng.normal(size=2) * 0.5,
        W=rng.normal(size=(N_STATES, N_ACTIONS, 2)))


def next_state(s, a0, a1):
    return (s + a0 + a1) % N_STATES


def state_values(game: TabularGame) -> np.ndarray:
    """Exact per-step values V[agent, t, s] by backward induction."""
    pi0, pi1 = game.pi()
    V = np.zeros((2, game.horizon + 1, N_STATES))
    for t in range(game.horizon - 1, -1, -1):
        for s in range(N_STATES):
            for i in range(2):
                v = 0.0
                for a0 in range(N_ACTIONS):
                    for a1 in range(N_ACTIONS):
                        p = pi0[s, a0] * pi1[s, a1]
                        v += p * (game.rewards[i, s, a0, a1]
                                  + V[i, t + 1, next_state(s, a0, a1)])
                V[i, t, s] = v
    return V


@dataclass
class Rollout:
    prob: float
    states: np.ndarray     # (T,)
    actions: np.ndarray    # (T, 2)
    rewards: np.ndarray    # (2, T)

    @property
    def returns_to_go(self) -> np.ndarray:
        return np.cumsum(self.rewards[:, ::-1], axis=1)[:, ::-1]


def enumerate_rollouts(game: TabularGame, s0: int = 0) -> list[Rollout]:
    pi0, pi1 = game.pi()
    rollouts = []
    joint = list(product(range(N_ACTIONS), repeat=2))
    for seq in product(joint, repeat=game.horizon):
        s = s0
        prob = 1.0
        states, rewards = [], []
        for a0, a1 in seq:
            states.append(s)
            prob *= pi0[s, a0] * pi1[s, a1]
            rewards.append(game.rewards[:, s, a0, a1])
            s = next_state(s, a0, a1)
        rollouts.append(Rollout(prob=prob, states=np.array(states),
                                actions=np.array(seq),
                                rewards=np.array(rewards).T))
    return rollouts


def score_function(game: TabularGame, s: int, a0: int, a1: int) -> np.ndarray:
    """Gradient of log pi^0 + log pi^1 at (s, a) w.r.t. the learned
    parameters (theta_c for model A, (si_logits, msg) for model B)."""
    pi0, pi1 = game.pi()
    if game.model == "shared":
        g = np.zeros((N_STATES, N_ACTIONS))
        for a in (a0, a1):  # both agents share theta_c
            g[s] -= pi0[s]
            g[s, a] += 1.0
        return g.reshape(-1)
    g_logits = np.zeros((N_STATES, N_ACTIONS))
    g_logits[s] -= pi1[s]
    g_logits[s, a1] += 1.0
    onehot = np.zeros(N_ACTIONS)
    onehot[a0] = 1.0
    g_msg = game.W[s].T @ (onehot - pi0[s])
    return np.concatenate([g_logits.reshape(-1), g_msg])


def advantage_weight(game: TabularGame) -> np.ndarray:
    """Which agents' advantages the estimator sums (team vs selfish)."""
    return np.array([1.0, 1.0]) if game.model == "shared" else np.array([0.0, 1.0])


def expected_objective(game: TabularGame, s0: int = 0) -> float:
    w = advantage_weight(game)
    return sum(r.prob * float(w @ r.rewards.sum(axis=1))
               for r in enumerate_rollouts(game, s0))


def exact_objective_grad(game: TabularGame, s0: int = 0) -> np.ndarray:
    """Enumerated gradient of the expected objective: sum_tau P grad(logP) G."""
    grad = np.zeros(game.n_params())
    w = advantage_weight(game)
    for r in enumerate_rollouts(game, s0):
        glogp = sum(score_function(game, r.states[t], *r.actions[t])
                    for t in range(game.horizon))
        grad += r.prob * float(w @ r.rewards.sum(axis=1)) * glogp
    return grad


def fd_objective_grad(game: TabularGame, s0: int = 0, h: float = 1e-6) -> np.ndarray:
    """Independent finite-difference route to the same gradient."""
    flat = game.flat_params()
    out = np.zeros_like(flat)
    for c in range(flat.size):
        fp = flat.copy()
        fp[c] += h
        lp = expected_objective(game.with_flat_params(fp), s0)
        fp[c] -= 2 * h
        lm = expected_objective(game.with_flat_params(fp), s0)
        out[c] = (lp - lm) / (2 * h)
    return out


def estimator_expectation(game: TabularGame, s0: int = 0) -> np.ndarray:
    """Exact expectation of the policy-gradient estimator: per step, the
    joint score times the Monte-Carlo advantage G_t - V_t(s_t)."""
    V = state_values(game)
    w = advantage_weight(game)
    grad = np.zeros(game.n_params())
    for r in enumerate_rollouts(game, s0):
        g2g = r.returns_to_go
        contrib = np.zeros_like(grad)
        for t in range(game.horizon):
            adv = float(w @ (g2g[:, t] - V[:, t, r.states[t]]))
            contrib += score_function(game, r.states[t], *r.actions[t]) * adv
        grad += r.prob * contrib
    return grad


def sample_episodes(game: TabularGame, n: int, seed: int,
                    s0: int = 0) -> dict:
    """Vectorized episode sampling; returns per-episode estimator terms and
    trajectories (for feeding the trainer's update path)."""
    rng = np.random.default_rng(seed)
    pi0, pi1 = game.pi()
    V = state_values(game)
    w = advantage_weight(game)
    T = game.horizon
    states = np.zeros((n, T), dtype=np.int64)
    actions = np.zeros((n, T, 2), dtype=np.int64)
    rewards = np.zeros((n, T, 2))
    s = np.zeros(n, dtype=np.int64)
    for t in range(T):
        states[:, t] = s
        a0 = (rng.random(n) >= pi0[s, 0]).astype(np.int64)
        a1 = (rng.random(n) >= pi1[s, 0]).astype(np.int64)
        actions[:, t, 0] = a0
        actions[:, t, 1] = a1
        rewards[:, t, :] = game.rewards[:, s, a0, a1].T
        s = (s + a0 + a1) % N_STATES
    g2g = np.cumsum(rewards[:, ::-1, :], axis=1)[:, ::-1, :]
    baselines = V[:, :T, :].transpose(1, 2, 0)[
        np.arange(T)[None, :].repeat(n, 0), states]  # (n, T, 2)
    adv = (g2g - baselines) @ w  # (n, T)
    terms = np.zeros((n, game.n_params()))
    for t in range(T):
        # accumulate score * advantage per episode (vectorized over episodes)
        for s_val in range(N_STATES):
            mask = states[:, t] == s_val
            if not mask.any():
                continue
            idx = np.flatnonzero(mask)
            sf = np.stack([score_function(game, s_val,
                                          actions[i, t, 0], actions[i, t, 1])
                           for i in idx])
            terms[idx] += sf * adv[idx, t][:, None]
    return {"states": states, "actions": actions, "rewards": rewards,
            "advantage": adv, "estimator_terms": terms}
