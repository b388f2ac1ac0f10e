"""Aggregation-GNN communication channel.

A graph shift operator S diffuses per-agent feature rows; learned filter
taps H_k weight the k-hop aggregates:

    centralized:   X' = sum_k S^k X H_k
    heterogeneous: row i of X' uses agent i's own taps H_k^i

Both forms admit an equivalent decentralized execution in which each node
recursively combines neighbours' partial aggregates; `local_node_execute`
implements that path and is checked against the matrix form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

NORMALIZATIONS = ("symmetric", "row", "none")


@dataclass(frozen=True)
class GraphShiftOperator:
    """Normalized connectivity matrix plus the raw adjacency it came from."""

    n_agents: int
    matrix: np.ndarray      # (N, N) normalized, float32; [S]ij weights j -> i
    adjacency: np.ndarray   # (N, N) binary incl. self-loops as configured
    normalization: str
    self_loops: bool

    def neighbors(self, i: int) -> np.ndarray:
        """Agents whose messages reach i (excluding i itself)."""
        row = self.adjacency[i].copy()
        row[i] = 0
        return np.flatnonzero(row)


def adjacency_from_edges(edges: Iterable[tuple[int, int]], n_agents: int,
                         self_loops: bool = True) -> np.ndarray:
    adj = np.zeros((n_agents, n_agents), dtype=np.float32)
    for i, j in edges:
        if not (0 <= i < n_agents and 0 <= j < n_agents):
            raise ValueError(f"edge ({i},{j}) out of range for {n_agents} agents")
        if i == j:
            continue
        adj[i, j] = 1.0
        adj[j, i] = 1.0
    if self_loops:
        np.fill_diagonal(adj, 1.0)
    return adj


def build_shift_operator(edges: Iterable[tuple[int, int]], n_agents: int,
                         normalization: str = "symmetric",
                         self_loops: bool = True) -> GraphShiftOperator:
    """Binary adjacency from undirected edges, optionally with self-loops,
    normalized per `normalization` ("symmetric" | "row" | "none")."""
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    adj = adjacency_from_edges(edges, n_agents, self_loops)
    return GraphShiftOperator(
        n_agents=n_agents,
        matrix=normalize_adjacency(adj, normalization),
        adjacency=adj,
        normalization=normalization,
        self_loops=self_loops,
    )


def normalize_adjacency(adj: np.ndarray, kind: str) -> np.ndarray:
    """Normalize a (possibly batched) adjacency matrix.

    "symmetric": D^{-1/2} A D^{-1/2} with D the in-degree (row sums). On
    undirected graphs this is the classic degree normalization; on masked
    (directed) graphs it keeps the spectral radius at most 1 and makes a node
    whose in-edges all vanished behave like an isolated node. "row":
    in-degree row-stochastic. Zero degrees map to zero.
    """
    if kind == "none":
        return adj.astype(np.float32, copy=True)
    a = adj.astype(np.float64)
    row = a.sum(axis=-1)
    if kind == "row":
        inv = np.where(row > 0, 1.0 / np.maximum(row, 1e-30), 0.0)
        out = a * inv[..., :, None]
    elif kind == "symmetric":
        r = np.where(row > 0, 1.0 / np.sqrt(np.maximum(row, 1e-30)), 0.0)
        out = a * r[..., :, None] * r[..., None, :]
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    return out.astype(np.float32)


def spectral_radius(matrix: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(matrix.astype(np.float64)))))


def mask_outgoing(S: GraphShiftOperator, agent: int) -> GraphShiftOperator:
    """Silence an agent: its messages reach no one, it still receives.

    Masking zeroes column `agent` of the raw adjacency (self-loop kept) and
    renormalizes, so the result is a well-formed shift operator.
    """
    if not (0 <= agent < S.n_agents):
        raise ValueError(f"agent {agent} out of range")
    adj = mask_outgoing_adjacency(S.adjacency, agent)
    return GraphShiftOperator(
        n_agents=S.n_agents,
        matrix=normalize_adjacency(adj, S.normalization),
        adjacency=adj,
        normalization=S.normalization,
        self_loops=S.self_loops,
    )


def mask_outgoing_adjacency(adj: np.ndarray, agent: int) -> np.ndarray:
    """Zero column `agent` (keeping the diagonal) of (..., N, N) adjacency."""
    out = adj.copy()
    keep = out[..., agent, agent].copy()
    out[..., :, agent] = 0.0
    out[..., agent, agent] = keep
    return out


@dataclass
class FilterBank:
    """K+1 trainable taps, each (F, F'); tap k weights the k-hop aggregate."""

    taps: list[Tensor]

    def __post_init__(self):
        if not self.taps:
            raise ValueError("FilterBank needs at least the zero-hop tap")
        if self.taps[0].ndim != 2:
            raise dc.ShapeError(f"taps must be 2-D, got {self.taps[0].shape}")
        f, fp = self.taps[0].shape
        for k, t in enumerate(self.taps):
            if t.ndim != 2 or t.shape != (f, fp):
                raise dc.ShapeError(f"tap k{k} has shape {t.shape}, expected {(f, fp)}")

    @property
    def hops(self) -> int:
        return len(self.taps) - 1

    @property
    def f_in(self) -> int:
        return self.taps[0].shape[0]

    @property
    def f_out(self) -> int:
        return self.taps[0].shape[1]


@dataclass
class HeteroFilterBank:
    """Per-agent tap assignment; agents in one sharing group share a bank."""

    n_agents: int
    groups: list[tuple[tuple[int, ...], FilterBank]]

    def __post_init__(self):
        seen: list[int] = []
        for agents, _ in self.groups:
            seen.extend(agents)
        if sorted(seen) != list(range(self.n_agents)):
            raise ValueError(f"groups {seen} do not partition {self.n_agents} agents")
        k0, fi, fo = self.groups[0][1].hops, self.groups[0][1].f_in, self.groups[0][1].f_out
        for _, bank in self.groups:
            if (bank.hops, bank.f_in, bank.f_out) != (k0, fi, fo):
                raise dc.ShapeError("all banks must share (K, F, F')")

    @property
    def hops(self) -> int:
        return self.groups[0][1].hops

    @property
    def f_in(self) -> int:
        return self.groups[0][1].f_in

    @property
    def f_out(self) -> int:
        return self.groups[0][1].f_out

    def bank_of(self, agent: int) -> FilterBank:
        for agents, bank in self.groups:
            if agent in agents:
                return bank
        raise ValueError(f"agent {agent} not assigned")


def _shift_matrix(S) -> np.ndarray:
    return S.matrix if isinstance(S, GraphShiftOperator) else np.asarray(S)


def stacked_powers(mat: np.ndarray, hops: int) -> list[np.ndarray]:
    """[I, S, S^2, ..., S^K] for a single (N,N) or batched (B,N,N) matrix."""
    n = mat.shape[-1]
    eye = np.broadcast_to(np.eye(n, dtype=mat.dtype), mat.shape).copy()
    powers = [eye]
    for _ in range(hops):
        powers.append(powers[-1] @ mat)
    return powers


def graph_conv(X, S, bank: FilterBank) -> Tensor:
    """Homogeneous graph convolution sum_k S^k X H_k.

    X: Tensor (N, F) or (B, N, F); S: GraphShiftOperator or (B, N, N) array.
    """
    xd = X.data if isinstance(X, Tensor) else np.asarray(X)
    if xd.shape[-1] != bank.f_in:
        raise dc.ShapeError(f"graph_conv: signal F={xd.shape[-1]} vs taps F={bank.f_in}")
    mat = _shift_matrix(S)
    if mat.shape[-1] != xd.shape[-2]:
        raise dc.ShapeError(f"graph_conv: shift {mat.shape} vs signal {xd.shape}")
    powers = stacked_powers(mat.astype(xd.dtype, copy=False), bank.hops)
    out = None
    for k, tap in enumerate(bank.taps):
        term = dc.matmul(dc.matmul(powers[k], X), tap)
        out = term if out is None else dc.add(out, term)
    return out


def hetero_graph_conv(X, S, banks: HeteroFilterBank) -> Tensor:
    """Heterogeneous graph convolution: row i uses agent i's taps."""
    xd = X.data if isinstance(X, Tensor) else np.asarray(X)
    if xd.shape[-1] != banks.f_in:
        raise dc.ShapeError(f"hetero_graph_conv: signal F={xd.shape[-1]} vs taps F={banks.f_in}")
    n = xd.shape[-2]
    if n != banks.n_agents:
        raise dc.ShapeError(f"hetero_graph_conv: {n} rows vs {banks.n_agents} agents")
    mat = _shift_matrix(S)
    powers = stacked_powers(mat.astype(xd.dtype, copy=False), banks.hops)
    shifted = [dc.matmul(p, X) for p in powers]  # each (..., N, F)

    group_outputs = []
    order: list[int] = []
    for agents, bank in banks.groups:
        idx = np.asarray(agents, dtype=np.intp)
        acc = None
        for k, tap in enumerate(bank.taps):
            rows = dc.take(shifted[k], idx, axis=-2)
            term = dc.matmul(rows, tap)
            acc = term if acc is None else dc.add(acc, term)
        group_outputs.append(acc)
        order.extend(agents)
    stacked = dc.concat(group_outputs, axis=-2)
    inverse = np.empty(n, dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(n)
    return dc.take(stacked, inverse, axis=-2)


def _apply_nonlinearity(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return dc.leaky_relu(x)
    if kind == "relu":
        return dc.relu(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {kind!r}")


def agnn_forward(X0, S, layers: Sequence[FilterBank | HeteroFilterBank],
                 nonlinearity: str = "leaky_relu") -> Tensor:
    """Cascade of graph convolutions with a pointwise nonlinearity."""
    x = X0 if isinstance(X0, Tensor) else Tensor(np.asarray(X0))
    width = x.shape[-1]
    for li, layer in enumerate(layers):
        if layer.f_in != width:
            raise dc.ShapeError(
                f"agnn_forward: layer {li} expects F={layer.f_in}, got {width}")
        if isinstance(layer, HeteroFilterBank):
            x = hetero_graph_conv(x, S, layer)
        else:
            x = graph_conv(x, S, layer)
        x = _apply_nonlinearity(x, nonlinearity)
        width = layer.f_out
    return x


# ---------------------------------------------------------------------------
# decentralized execution


def local_node_execute(agent: int, own_x: np.ndarray, bank: FilterBank,
                       shift_row: np.ndarray,
                       inbox: dict[int, list[np.ndarray]]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-node K-hop aggregation from neighbours' partial aggregates.

    `inbox[j]` holds neighbour j's aggregates [y_j^0, ..., y_j^{K-1}];
    `shift_row` is this agent's row of the shift operator. Returns the
    node's output row and the outbox [y_i^0, ..., y_i^{K-1}] it would send.
    Only `shift_row` and declared neighbours are consulted (locality).
    """
    hops = bank.hops
    neighbors = [j for j in np.flatnonzero(shift_row) if j != agent]
    for j in neighbors:
        if j not in inbox or len(inbox[j]) < hops:
            raise ValueError(f"agent {agent}: missing aggregates from neighbor {j}")
    y = [np.asarray(own_x, dtype=np.float64)]
    self_w = float(shift_row[agent])
    for k in range(1, hops + 1):
        acc = np.zeros_like(y[0])
        for j in neighbors:
            acc = acc + float(shift_row[j]) * np.asarray(inbox[j][k - 1], dtype=np.float64)
        if self_w != 0.0:
            acc = acc + self_w * y[k - 1]
        y.append(acc)
    out = np.zeros(bank.f_out, dtype=np.float64)
    for k, tap in enumerate(bank.taps):
        out = out + y[k] @ tap.data.astype(np.float64)
    return out.astype(np.float32), [yk.astype(np.float32) for yk in y[:hops]]


def run_decentralized(X: np.ndarray, S: GraphShiftOperator,
                      banks: HeteroFilterBank | FilterBank) -> np.ndarray:
    """Simulate hop-synchronized message rounds and stack per-node outputs.

    Equals the centralized (hetero_)graph_conv up to floating-point
    summation order.
    """
    xd = np.asarray(X)
    n = xd.shape[0]
    if isinstance(banks, FilterBank):
        banks = HeteroFilterBank(n_agents=n, groups=[(tuple(range(n)), banks)])
    hops = banks.hops
    # round k: every node derives y^k from neighbours' y^{k-1}
    levels: list[list[np.ndarray]] = [[xd[i].astype(np.float64)] for i in range(n)]
    for k in range(1, hops):
        for i in range(n):
            row = S.matrix[i]
            acc = np.zeros(xd.shape[1], dtype=np.float64)
            for j in np.flatnonzero(row):
                acc = acc + float(row[j]) * levels[j][k - 1]
            levels[i].append(acc)
    out = np.zeros((n, banks.f_out), dtype=np.float32)
    for i in range(n):
        inbox = {j: [lv.astype(np.float32) for lv in levels[j]]
                 for j in S.neighbors(i)}
        out[i], _ = local_node_execute(i, xd[i], banks.bank_of(i), S.matrix[i], inbox)
    return out
