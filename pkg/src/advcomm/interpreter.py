"""White-box analysis of transmitted messages.

A decoder is trained to reconstruct, from each cooperative agent's
transmitted encoding, the task-relevant plane of the observation that
produced it (own coverage, or the goal map). Reconstruction quality is
scored as mean average precision over masked pixels; the self-interested
agent's encodings are never trained on, only evaluated, so a gap in mAP
between groups exposes encodings that stopped describing the observation.

A second target kind decodes each agent's AGNN output into its local
estimate of the *global* coverage map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, PngImagePlugin

from . import diffcore as dc
from . import graphnet as gn
from . import policy as pol
from .diffcore import ParamTree, Tensor
from .gridworld import GridWorld, eval_horizon

TARGET_KINDS = ("first_message", "agnn_output_coverage")
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
GROUP_CODES = {"coop": 0, "si": 1}

_MAGIC = b"AVSS"
_VERSION = 1


@dataclass
class SampleSet:
    """Columnar (encoding, target, mask) pairs with provenance."""

    encodings: np.ndarray   # (M, F) float32
    targets: np.ndarray     # (M, th, tw) uint8
    masks: np.ndarray       # (M, th, tw) uint8
    episode: np.ndarray     # (M,) uint32
    step: np.ndarray        # (M,) uint32
    agent: np.ndarray       # (M,) uint32
    group: np.ndarray       # (M,) uint8
    split: np.ndarray       # (M,) uint8

    def __len__(self):
        return self.encodings.shape[0]

    def select(self, split: str | None = None, group: str | None = None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.split == SPLIT_CODES[split]
        if group is not None:
            keep &= self.group == GROUP_CODES[group]
        return np.flatnonzero(keep)

    def counts(self) -> dict:
        return {name: int((self.split == code).sum())
                for name, code in SPLIT_CODES.items()}

    def save(self, path: str) -> None:
        m, f = self.encodings.shape
        th, tw = self.targets.shape[1:]
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IIIII", _VERSION, m, f, th, tw))
            fh.write(self.encodings.astype("<f4").tobytes())
            fh.write(self.targets.astype(np.uint8).tobytes())
            fh.write(self.masks.astype(np.uint8).tobytes())
            fh.write(self.episode.astype("<u4").tobytes())
            fh.write(self.step.astype("<u4").tobytes())
            fh.write(self.agent.astype("<u4").tobytes())
            fh.write(self.group.astype(np.uint8).tobytes())
            fh.write(self.split.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path: str) -> "SampleSet":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != _MAGIC:
            raise ValueError(f"{path}: not a sample-set file")
        version, m, f, th, tw = struct.unpack_from("<IIIII", raw, 4)
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        off = 24
        def take(dtype, count, shape):
            nonlocal off
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
            off += arr.nbytes
            return arr.copy()
        plane = m * th * tw
        return cls(
            encodings=take("<f4", m * f, (m, f)),
            targets=take(np.uint8, plane, (m, th, tw)),
            masks=take(np.uint8, plane, (m, th, tw)),
            episode=take("<u4", m, (m,)),
            step=take("<u4", m, (m,)),
            agent=take("<u4", m, (m,)),
            group=take(np.uint8, m, (m,)),
            split=take(np.uint8, m, (m,)),
        )


def fov_in_world_mask(position, width: int, height: int,
                      fov: tuple[int, int]) -> np.ndarray:
    """1 where the agent-centered window maps inside the world."""
    fw, fh = fov
    rx, ry = fw // 2, fh // 2
    px, py = int(position[0]), int(position[1])
    xs = np.arange(px - rx, px + rx + 1)
    ys = np.arange(py - ry, py + ry + 1)
    return (((xs >= 0) & (xs < width))[:, None]
            & ((ys >= 0) & (ys < height))[None, :]).astype(np.uint8)


def _window(plane: np.ndarray, position, fov) -> np.ndarray:
    fw, fh = fov
    rx, ry = fw // 2, fh // 2
    px, py = int(position[0]), int(position[1])
    out = np.zeros((fw, fh), dtype=np.uint8)
    w, h = plane.shape
    x0, y0 = px - rx, py - ry
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(px + rx + 1, w), min(py + ry + 1, h)
    if sx0 < sx1 and sy0 < sy1:
        out[sx0 - x0:sx1 - x0, sy0 - y0:sy1 - y0] = plane[sx0:sx1, sy0:sy1]
    return out


class SampleBudgetError(RuntimeError):
    pass


def collect_samples(params: ParamTree, pcfg: pol.PolicyConfig,
                    assignment: pol.ParamAssignment, env_cfg,
                    target_kind: str, sizes: tuple[int, int, int],
                    sample_prob: float, seed: int,
                    comm_mode: str = "full", si_cap: int | None = None,
                    max_steps: int | None = None) -> SampleSet:
    """Run fixed-horizon episodes under the policy; each step is kept with
    probability `sample_prob` and contributes one pair per cooperative
    agent. Splits fill train -> val -> test, a step's pairs never straddle
    splits, and split sizes land exactly on `sizes`. Self-interested pairs
    (up to `si_cap`, default the test size) all land in the test split.
    """
    if target_kind not in TARGET_KINDS:
        raise ValueError(f"unknown target kind {target_kind!r}")
    if sample_prob <= 0.0:
        raise ValueError("sample_prob must be positive (an empty sample set is useless)")
    quotas = dict(zip(("train", "val", "test"), sizes))
    total_needed = sum(sizes)
    if assignment.si_agent is None:
        si_cap = 0
    elif si_cap is None:
        si_cap = sizes[2]
    if max_steps is None:
        n_coop = max(len(assignment.coop_agents), 1)
        max_steps = max(200_000, int(40 * total_needed / (n_coop * sample_prob)))

    run_cfg = replace(env_cfg, early_termination=False,
                      horizon=eval_horizon(env_cfg))
    root = np.random.SeedSequence(seed)
    keep_rng = np.random.default_rng(root.spawn(1)[0])
    act_rng = np.random.default_rng(root.spawn(1)[0])

    rows = {k: [] for k in ("enc", "tgt", "msk", "ep", "t", "ag", "grp", "spl")}
    filled = {k: 0 for k in quotas}
    si_taken = 0
    steps = 0
    episode = 0

    def coop_quota_left():
        return any(filled[k] < quotas[k] for k in quotas)

    while coop_quota_left() or si_taken < si_cap:
        if steps >= max_steps:
            raise SampleBudgetError(
                f"step budget {max_steps} exhausted with splits {filled} of {quotas}")
        env = GridWorld(run_cfg)
        res = env.reset(seed=int(root.spawn(1)[0].generate_state(1)[0]))
        done = False
        while not done and steps < max_steps:
            if keep_rng.random() < sample_prob:
                adj = gn.adjacency_from_edges(res.edges, env.n_agents)
                out = pol.joint_forward(params, pcfg, assignment,
                                        res.observations, adj, comm_mode)
                enc = (out.encodings if target_kind == "first_message"
                       else out.gnn_out).data[0]
                split = next((k for k in ("train", "val", "test")
                              if filled[k] < quotas[k]), None)
                if split is not None:
                    room = quotas[split] - filled[split]
                    for a in assignment.coop_agents[:room]:
                        tgt, msk = _target_for(env, a, res, target_kind)
                        _append(rows, enc[a], tgt, msk, episode, env.state.t,
                                a, "coop", split)
                        filled[split] += 1
                if assignment.si_agent is not None and si_taken < si_cap:
                    a = assignment.si_agent
                    tgt, msk = _target_for(env, a, res, target_kind)
                    _append(rows, enc[a], tgt, msk, episode, env.state.t,
                            a, "si", "test")
                    si_taken += 1
            actions, _ = pol.sample_actions(
                pol.joint_forward(params, pcfg, assignment, res.observations,
                                  gn.adjacency_from_edges(res.edges, env.n_agents),
                                  comm_mode).probs_np(), act_rng)
            res = env.step(actions)
            steps += 1
            done = res.done
        episode += 1

    return SampleSet(
        encodings=np.asarray(rows["enc"], dtype=np.float32),
        targets=np.asarray(rows["tgt"], dtype=np.uint8),
        masks=np.asarray(rows["msk"], dtype=np.uint8),
        episode=np.asarray(rows["ep"], dtype=np.uint32),
        step=np.asarray(rows["t"], dtype=np.uint32),
        agent=np.asarray(rows["ag"], dtype=np.uint32),
        group=np.asarray(rows["grp"], dtype=np.uint8),
        split=np.asarray(rows["spl"], dtype=np.uint8),
    )


def _target_for(env: GridWorld, agent: int, res, target_kind: str):
    cfg = env.config
    st = env.state
    if target_kind == "first_message":
        target = res.observations[agent, 1].astype(np.uint8)
    else:
        if st.coverage is None:
            raise ValueError("agnn_output_coverage needs a coverage task")
        target = _window(st.global_coverage().astype(np.uint8),
                         st.positions[agent], cfg.fov)
    if st.goals is not None:
        mask = np.ones(cfg.fov, dtype=np.uint8)  # goal maps: score every pixel
    else:
        mask = fov_in_world_mask(st.positions[agent], cfg.width, cfg.height, cfg.fov)
    return target, mask


def _append(rows, enc, tgt, msk, episode, t, agent, group, split):
    rows["enc"].append(np.asarray(enc, dtype=np.float32))
    rows["tgt"].append(tgt)
    rows["msk"].append(msk)
    rows["ep"].append(episode)
    rows["t"].append(t)
    rows["ag"].append(agent)
    rows["grp"].append(GROUP_CODES[group])
    rows["spl"].append(SPLIT_CODES[split])


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderConfig:
    enc_dim: int
    target_shape: tuple[int, int]
    base_channels: int = 32
    base_size: int = 2
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    eval_every: int = 10
    seed: int = 0

    @property
    def n_up(self) -> int:
        n = 0
        s = self.base_size
        while s < max(self.target_shape):
            s *= 2
            n += 1
        return n


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    c = cfg.base_channels
    tree["dec.fc.w"] = Tensor(pol._orthogonal(cfg.enc_dim, c * cfg.base_size ** 2,
                                              np.sqrt(2), rng))
    tree["dec.fc.b"] = Tensor(np.zeros(c * cfg.base_size ** 2, np.float32))
    for i in range(cfg.n_up):
        c_out = max(c // 2, 4)
        pol._init_conv(tree, f"dec.up{i}", c, c_out, np.sqrt(2), rng)
        c = c_out
    pol._init_conv(tree, "dec.out", c, 1, 1.0, rng)
    return tree


def decoder_forward(params: ParamTree, cfg: DecoderConfig, enc) -> Tensor:
    """(B, enc_dim) encodings -> (B, th, tw) reconstruction probabilities."""
    encd = enc.data if isinstance(enc, Tensor) else np.asarray(enc, np.float32)
    b = encd.shape[0]
    h = dc.dense(enc if isinstance(enc, Tensor) else encd,
                 params["dec.fc.w"], params["dec.fc.b"])
    h = dc.leaky_relu(dc.reshape(h, (b, cfg.base_channels, cfg.base_size,
                                     cfg.base_size)))
    for i in range(cfg.n_up):
        h = dc.upsample2x(dc.leaky_relu(
            dc.conv2d(h, params[f"dec.up{i}.w"], params[f"dec.up{i}.b"], padding=1)))
    th, tw = cfg.target_shape
    cur_h, cur_w = h.shape[2], h.shape[3]
    if cur_h < th or cur_w < tw:
        raise dc.ShapeError(f"decoder output {h.shape} smaller than target {cfg.target_shape}")
    off_h, off_w = (cur_h - th) // 2, (cur_w - tw) // 2
    h = dc.take(h, np.arange(off_h, off_h + th), axis=2)
    h = dc.take(h, np.arange(off_w, off_w + tw), axis=3)
    out = dc.conv2d(h, params["dec.out.w"], params["dec.out.b"], padding=1)
    return dc.reshape(dc.sigmoid(out), (b, th, tw))


@dataclass
class MetricsReport:
    map_overall: float | None = None
    map_by_group: dict = field(default_factory=dict)
    n_scored: int = 0
    n_skipped: int = 0
    loss_curve: list = field(default_factory=list)
    val_map_curve: list = field(default_factory=list)
    best_epoch: int | None = None


def masked_bce_loss(params: ParamTree, cfg: DecoderConfig, enc, targets, masks) -> Tensor:
    pred = decoder_forward(params, cfg, enc)
    return dc.bce_with_mask(pred, targets.astype(np.float32),
                            masks.astype(np.float32))


def train_decoder(samples: SampleSet, cfg: DecoderConfig) -> tuple[ParamTree, MetricsReport]:
    """Minibatch ascent on the negated masked BCE; every `eval_every` epochs
    the validation mAP is computed and the best-scoring parameters are kept."""
    tr_idx = samples.select(split="train")
    if len(tr_idx) == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    params = init_decoder_params(cfg, rng)
    opt = dc.Adam(cfg.lr)
    report = MetricsReport()
    best = (None, -1.0, None)  # (params, val_map, epoch)

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(tr_idx)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with dc.ComputationRecord() as rec:
                loss = masked_bce_loss(params, cfg, samples.encodings[idx],
                                       samples.targets[idx], samples.masks[idx])
                objective = dc.scale(loss, -1.0)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"decoder loss diverged at epoch {epoch}")
            grads = dc.backward(rec, objective, params)
            params = opt.step(params, grads)
            epoch_loss += loss.item()
            n_batches += 1
        report.loss_curve.append(epoch_loss / max(n_batches, 1))
        if epoch % cfg.eval_every == 0 and len(samples.select(split="val")):
            val = evaluate_map(params, cfg, samples, split="val")
            report.val_map_curve.append((epoch, val.map_overall))
            if val.map_overall is not None and val.map_overall > best[1]:
                best = (params.copy(), val.map_overall, epoch)
    if best[0] is not None:
        params = best[0]
        report.best_epoch = best[2]
    return params, report


# ---------------------------------------------------------------------------
# scoring


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float | None:
    """Precision averaged over each positive in score-descending order;
    None when there are no positives."""
    t = np.asarray(targets).astype(bool)
    n_pos = int(t.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = t[order]
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].mean())


def evaluate_map(params: ParamTree, cfg: DecoderConfig, samples: SampleSet,
                 split: str = "test", batch_size: int = 256) -> MetricsReport:
    """Per-sample AP over masked pixels, averaged per agent group."""
    idx = samples.select(split=split)
    report = MetricsReport()
    ap_by_group: dict[int, list[float]] = {0: [], 1: []}
    for lo in range(0, len(idx), batch_size):
        sel = idx[lo:lo + batch_size]
        pred = decoder_forward(params, cfg, samples.encodings[sel]).data
        for row, s in enumerate(sel):
            m = samples.masks[s].astype(bool)
            if not m.any():
                report.n_skipped += 1
                continue
            ap = average_precision(pred[row][m], samples.targets[s][m])
            if ap is None:
                report.n_skipped += 1
                continue
            ap_by_group[int(samples.group[s])].append(ap)
            report.n_scored += 1
    all_aps = ap_by_group[0] + ap_by_group[1]
    report.map_overall = float(np.mean(all_aps)) if all_aps else None
    for name, code in GROUP_CODES.items():
        if ap_by_group[code]:
            report.map_by_group[name] = float(np.mean(ap_by_group[code]))
    return report


# ---------------------------------------------------------------------------
# visualization


def reconstruct_grid(dec_params: ParamTree, dcfg: DecoderConfig,
                     params: ParamTree, pcfg: pol.PolicyConfig,
                     assignment: pol.ParamAssignment, env_cfg,
                     episode_seed: int, timesteps: list[int], out_path: str,
                     target_kind: str = "first_message",
                     comm_mode: str = "full",
                     metadata: dict | None = None) -> np.ndarray:
    """Paired true-target / reconstruction panels per agent (self-interested
    agent first), two rows per requested timestep, written as an 8-bit PNG."""
    run_cfg = dc_replace(env_cfg, early_termination=False,
                         horizon=eval_horizon(env_cfg))
    env = GridWorld(run_cfg)
    res = env.reset(seed=episode_seed)
    act_rng = np.random.default_rng(episode_seed + 1)
    wanted = set(timesteps)
    n = assignment.n_agents
    order = list(assignment.si_agents) + list(assignment.coop_agents)
    th, tw = dcfg.target_shape
    panels: list[np.ndarray] = []

    t = 0
    while wanted and t <= max(wanted):
        adj = gn.adjacency_from_edges(res.edges, n)
        out = pol.joint_forward(params, pcfg, assignment, res.observations, adj,
                                comm_mode)
        if t in wanted:
            wanted.discard(t)
            enc = (out.encodings if target_kind == "first_message"
                   else out.gnn_out).data[0]
            true_row, recon_row = [], []
            for a in order:
                tgt, _ = _target_for(env, a, res, target_kind)
                pred = decoder_forward(dec_params, dcfg, enc[a][None]).data[0]
                true_row.append((tgt.astype(np.float32) * 255).round().astype(np.uint8))
                recon_row.append(np.round(pred * 255).astype(np.uint8))
            panels.append(np.concatenate([p.T for p in true_row], axis=1))
            panels.append(np.concatenate([p.T for p in recon_row], axis=1))
        actions, _ = pol.sample_actions(out.probs_np(), act_rng)
        res = env.step(actions)
        t += 1

    if panels:
        sep = np.full((1, panels[0].shape[1]), 255, dtype=np.uint8)
        grid = np.concatenate(sum(([p, sep] for p in panels[:-1]), []) + [panels[-1]],
                              axis=0)
    else:
        grid = np.zeros((1, 1), dtype=np.uint8)

    img = Image.fromarray(grid, mode="L")
    info = PngImagePlugin.PngInfo()
    for k, v in (metadata or {}).items():
        info.add_text(str(k), str(v))
    img.save(out_path, pnginfo=info)
    return grid
