"""Scene ingestion and agent-centric observation building.

Scene file format (plain text, one record per line, extra fields ignored):

    frame_id    agent_id    x    y

Frames are sampled at 0.4 s; coordinates are world meters. A dataset manifest
maps scene names to file paths, one "name path" pair per line (paths resolved
relative to the manifest directory, or to ``FEPDIFF_DATA_DIR`` when set).
"""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

T_OBS = 8
T_FUT = 12
EPS_STD = 1e-6
_COINCIDENT_EPS = 1e-8


class SceneParseError(ValueError):
    """A scene-file line had non-numeric required fields."""


@dataclass
class SceneTable:
    """Per-agent, time-sorted position records of one scene.

    ``agents`` maps agent_id -> (frames [n], positions [n, 2]) with frames
    strictly increasing. ``n_dropped`` counts malformed or duplicated lines
    discarded during parsing.
    """

    agents: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    n_dropped: int = 0

    @property
    def n_records(self) -> int:
        return sum(len(frames) for frames, _ in self.agents.values())

    def frame_index(self) -> dict[int, dict[int, np.ndarray]]:
        """frame -> {agent_id -> position} lookup."""
        index: dict[int, dict[int, np.ndarray]] = {}
        for agent_id, (frames, positions) in self.agents.items():
            for f, p in zip(frames.tolist(), positions):
                index.setdefault(f, {})[agent_id] = p
        return index


@dataclass
class Sample:
    """One prediction sample: 8-frame history and 12-frame future of a target."""

    target_id: int
    t0_frame: int  # frame index of the last observed step (t = 0)
    history: np.ndarray  # [T_OBS, 2]
    future: np.ndarray  # [T_FUT, 2]
    scene: str = ""


@dataclass
class LocalObservation:
    """Ego history plus neighbors within radius delta, and their proximity graph.

    ``nodes`` lists agent ids with the target first; ``edges`` holds unique
    unordered pairs of agent ids whose t = 0 distance is strictly below delta.
    Neighbor histories are back-filled to T_OBS rows by repeating the earliest
    observed position.
    """

    ego: Sample
    neighbor_ids: list[int]
    neighbor_histories: list[np.ndarray]
    nodes: list[int]
    edges: list[tuple[int, int]]
    delta: float

    def node_histories(self) -> list[np.ndarray]:
        return [self.ego.history] + self.neighbor_histories


@dataclass
class ResidualStats:
    """Per-coordinate mean/std of training residuals (meters); std floored."""

    mu_r: np.ndarray  # [2]
    sigma_r: np.ndarray  # [2], elementwise >= EPS_STD


def parse_scene(path: str) -> SceneTable:
    """Parse a scene file into a deduplicated, per-agent time-sorted table.

    Lines with fewer than 4 fields and duplicated (frame, agent) rows are
    dropped and counted. A line whose first four fields are not numeric raises
    :class:`SceneParseError` naming the line number. Unreadable files raise
    ``OSError``.
    """
    records: dict[tuple[int, int], np.ndarray] = {}
    n_dropped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 4:
                n_dropped += 1
                continue
            try:
                frame = int(float(parts[0]))
                agent = int(float(parts[1]))
                x = float(parts[2])
                y = float(parts[3])
            except ValueError as exc:
                raise SceneParseError(
                    f"{path}:{lineno}: non-numeric field in {parts[:4]!r}"
                ) from exc
            if not (np.isfinite(x) and np.isfinite(y)):
                raise SceneParseError(f"{path}:{lineno}: non-finite coordinate")
            key = (frame, agent)
            if key in records:
                n_dropped += 1
                continue
            records[key] = np.array([x, y], dtype=np.float64)

    by_agent: dict[int, list[tuple[int, np.ndarray]]] = {}
    for (frame, agent), pos in records.items():
        by_agent.setdefault(agent, []).append((frame, pos))

    table = SceneTable(n_dropped=n_dropped)
    for agent in sorted(by_agent):
        rows = sorted(by_agent[agent], key=lambda r: r[0])
        frames = np.array([f for f, _ in rows], dtype=np.int64)
        positions = np.stack([p for _, p in rows])
        table.agents[agent] = (frames, positions)
    return table


def infer_frame_step(table: SceneTable) -> int:
    """Modal positive gap between an agent's consecutive frames (ties: smallest)."""
    gaps: Counter[int] = Counter()
    for frames, _ in table.agents.values():
        if len(frames) > 1:
            gaps.update(np.diff(frames).tolist())
    if not gaps:
        return 1
    best = max(gaps.items(), key=lambda kv: (kv[1], -kv[0]))
    return int(best[0])


def window_scene(
    table: SceneTable,
    t_obs: int = T_OBS,
    t_fut: int = T_FUT,
    frame_step: int | None = None,
    scene: str = "",
) -> list[Sample]:
    """Slide a (t_obs + t_fut)-frame window with stride 1 over each agent.

    A sample is emitted for every start frame at which the agent is present
    for t_obs + t_fut consecutive frames (gap == frame_step). ``frame_step``
    defaults to the scene's modal frame gap.
    """
    if t_obs < 2:
        raise ValueError("t_obs must be >= 2 for finite differences")
    if frame_step is None:
        frame_step = infer_frame_step(table)
    seq_len = t_obs + t_fut
    samples: list[Sample] = []
    for agent_id in sorted(table.agents):
        frames, positions = table.agents[agent_id]
        # split into maximal runs of consecutive frames
        run_start = 0
        for i in range(1, len(frames) + 1):
            if i == len(frames) or frames[i] - frames[i - 1] != frame_step:
                run_len = i - run_start
                for s in range(run_start, run_start + max(0, run_len - seq_len + 1)):
                    window = positions[s : s + seq_len]
                    samples.append(
                        Sample(
                            target_id=agent_id,
                            t0_frame=int(frames[s + t_obs - 1]),
                            history=window[:t_obs].copy(),
                            future=window[t_obs:].copy(),
                            scene=scene,
                        )
                    )
                run_start = i
    return samples


def _history_ending_at(
    table: SceneTable, agent_id: int, t0_frame: int, t_obs: int, frame_step: int
) -> np.ndarray:
    """Agent history over the t_obs frames ending at t0_frame, back-filled.

    Missing leading frames repeat the earliest observed position inside the
    window; the agent must be present at t0_frame itself.
    """
    frames, positions = table.agents[agent_id]
    wanted = [t0_frame - k * frame_step for k in range(t_obs - 1, -1, -1)]
    lookup = {int(f): p for f, p in zip(frames, positions)}
    rows: list[np.ndarray | None] = [lookup.get(f) for f in wanted]
    assert rows[-1] is not None, "neighbor must be present at the t=0 frame"
    earliest = next(r for r in rows if r is not None)
    out = np.stack([earliest if r is None else r for r in rows])
    return out.astype(np.float64)


def build_local_observation(
    sample: Sample,
    table: SceneTable,
    delta: float,
    frame_step: int | None = None,
) -> LocalObservation:
    """Collect neighbors strictly within ``delta`` of the target at t = 0.

    Graph edges connect every node pair (target-neighbor and
    neighbor-neighbor) whose t = 0 distance is strictly below delta; edges are
    unique unordered pairs.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if frame_step is None:
        frame_step = infer_frame_step(table)

    p0 = sample.history[-1]
    neighbor_ids: list[int] = []
    neighbor_pos0: list[np.ndarray] = []
    for agent_id in sorted(table.agents):
        if agent_id == sample.target_id:
            continue
        frames, positions = table.agents[agent_id]
        hit = np.nonzero(frames == sample.t0_frame)[0]
        if len(hit) == 0:
            continue
        q0 = positions[hit[0]]
        if np.linalg.norm(q0 - p0) < delta:
            neighbor_ids.append(agent_id)
            neighbor_pos0.append(q0)

    histories = [
        _history_ending_at(table, j, sample.t0_frame, len(sample.history), frame_step)
        for j in neighbor_ids
    ]

    nodes = [sample.target_id] + neighbor_ids
    pos0 = [p0] + neighbor_pos0
    edges: list[tuple[int, int]] = []
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            if np.linalg.norm(pos0[a] - pos0[b]) < delta:
                edges.append((nodes[a], nodes[b]))

    return LocalObservation(
        ego=sample,
        neighbor_ids=neighbor_ids,
        neighbor_histories=histories,
        nodes=nodes,
        edges=edges,
        delta=delta,
    )


def kinematic_features(history: np.ndarray) -> np.ndarray:
    """Stack position, per-step velocity and acceleration into [T, 6].

    Velocities are per-step displacements; row 0 copies row 1. Accelerations
    are velocity differences, defined from row 2 on; rows 0 and 1 copy the
    first defined row (zero when the history is too short to define one).
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] < 2 or history.shape[1] != 2:
        raise ValueError(f"history must be [T>=2, 2], got {history.shape}")
    t = history.shape[0]
    vel = np.zeros_like(history)
    vel[1:] = history[1:] - history[:-1]
    vel[0] = vel[1]
    acc = np.zeros_like(history)
    if t >= 3:
        acc[2:] = vel[2:] - vel[1:-1]
        acc[0] = acc[1] = acc[2]
    return np.concatenate([history, vel, acc], axis=1)


def edge_feature(
    p_i: np.ndarray, v_i: np.ndarray, p_j: np.ndarray, v_j: np.ndarray
) -> np.ndarray:
    """Rotation- and translation-invariant 6-vector for the ordered pair (i, j).

    Components: range, relative speed, closing speed along the line of sight,
    tangential relative speed, ego speed toward j, ego speed.
    """
    dp = np.asarray(p_j, dtype=np.float64) - np.asarray(p_i, dtype=np.float64)
    dv = np.asarray(v_j, dtype=np.float64) - np.asarray(v_i, dtype=np.float64)
    v_i = np.asarray(v_i, dtype=np.float64)
    d = float(np.linalg.norm(dp))
    if d < _COINCIDENT_EPS:
        u = np.zeros(2)
    else:
        u = dp / d
    u_perp = np.array([-u[1], u[0]])
    return np.array(
        [
            d,
            float(np.linalg.norm(dv)),
            float(dv @ u),
            float(dv @ u_perp),
            float(v_i @ u),
            float(np.linalg.norm(v_i)),
        ]
    )


def edge_feature_matrix(positions: np.ndarray, velocities: np.ndarray) -> np.ndarray:
    """Vectorized :func:`edge_feature` over all ordered pairs: [A, A, 6].

    Entry [i, j] is the feature of the ordered pair (i, j); the diagonal is
    zero (self-edges carry the zero feature).
    """
    p = np.asarray(positions, dtype=np.float64)
    v = np.asarray(velocities, dtype=np.float64)
    dp = p[None, :, :] - p[:, None, :]  # [A, A, 2], row i -> j
    dv = v[None, :, :] - v[:, None, :]
    d = np.linalg.norm(dp, axis=-1)
    safe = np.where(d < _COINCIDENT_EPS, 1.0, d)
    u = dp / safe[..., None]
    u[d < _COINCIDENT_EPS] = 0.0
    u_perp = np.stack([-u[..., 1], u[..., 0]], axis=-1)
    v_i = np.broadcast_to(v[:, None, :], dp.shape)
    out = np.stack(
        [
            d,
            np.linalg.norm(dv, axis=-1),
            (dv * u).sum(-1),
            (dv * u_perp).sum(-1),
            (v_i * u).sum(-1),
            np.broadcast_to(np.linalg.norm(v, axis=-1)[:, None], d.shape),
        ],
        axis=-1,
    )
    np.einsum("iik->ik", out)[:] = 0.0
    return out


def state_at_t0(history: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Position and per-step velocity at the last observed step."""
    history = np.asarray(history, dtype=np.float64)
    return history[-1], history[-1] - history[-2]


def observation_arrays(
    obs: LocalObservation,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tensor-ready arrays for one local observation.

    Returns (node_kinematics [N, T_OBS, 6], edge_features [N, N, 6],
    adjacency [N, N] bool). Node 0 is the target; the adjacency diagonal is
    True (self-loops) and the self-edge feature is the zero vector.
    """
    histories = obs.node_histories()
    n = len(histories)
    kin = np.stack([kinematic_features(h) for h in histories])
    states = [state_at_t0(h) for h in histories]
    edge_feats = np.zeros((n, n, 6))
    adj = np.eye(n, dtype=bool)
    index = {agent_id: k for k, agent_id in enumerate(obs.nodes)}
    for a_id, b_id in obs.edges:
        a, b = index[a_id], index[b_id]
        edge_feats[a, b] = edge_feature(*states[a], *states[b])
        edge_feats[b, a] = edge_feature(*states[b], *states[a])
        adj[a, b] = adj[b, a] = True
    return kin, edge_feats, adj


def residual_stats(residuals: list[np.ndarray]) -> ResidualStats:
    """Pooled per-coordinate mean and population std over all residual rows.

    Entries are summed in sorted order so the result is bit-identical for any
    input ordering.
    """
    if not residuals:
        raise ValueError("residuals must be non-empty")
    stacked = np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, 2) for r in residuals])
    ordered = np.sort(stacked, axis=0)
    mu = ordered.mean(axis=0)
    var = np.sort((ordered - mu) ** 2, axis=0).mean(axis=0)
    sigma = np.maximum(np.sqrt(var), EPS_STD)
    return ResidualStats(mu_r=mu, sigma_r=sigma)


def read_manifest(path: str) -> dict[str, str]:
    """Read ``name path`` pairs; paths resolve against FEPDIFF_DATA_DIR or the manifest dir."""
    root = os.environ.get("FEPDIFF_DATA_DIR") or os.path.dirname(os.path.abspath(path))
    scenes: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, rel = line.split(None, 1)
            rel = rel.strip()
            scenes[name] = rel if os.path.isabs(rel) else os.path.join(root, rel)
    return scenes
