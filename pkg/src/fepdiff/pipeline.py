"""Two-stage training orchestration, checkpointing and inference assembly.

Stage 1 trains the belief learner on the free-energy objective; stage 2
freezes it and trains the residual denoiser on winner-hypothesis residuals.
Inference refines all K proxy trajectories with DDIM-sampled residuals using
the denoiser's EMA weights.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import pickle
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from . import dataio, diffusion, metrics
from .belief import BeliefLearner, BeliefOutput, LossBreakdown, total_objective, wta_select
from .dataio import T_FUT, T_OBS, LocalObservation, ResidualStats
from .diffusion import NoiseSchedule, ResidualDenoiser, ddim_sample, denormalize_residual

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"FEPDIFF-CKPT v1\n"
_HYP_SEED_STRIDE = 1_000_003


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class CheckpointMismatch(ValueError):
    """Checkpoints disagree on model dimensions."""


# --------------------------------------------------------------------------
# Experiment configuration
# --------------------------------------------------------------------------

# (dotted key, attribute, type, default, help)
CONFIG_FIELDS: list[tuple[str, str, type, object, str]] = [
    ("data.manifest", "manifest", str, "", "dataset manifest path (scene name -> file)"),
    ("data.heldout", "heldout", str, "", "held-out scene name for leave-one-out"),
    ("data.delta", "delta", float, 4.0, "neighbor radius in meters (strict)"),
    ("data.frame_step", "frame_step", int, 0, "frame index gap of one 0.4 s step; 0 = infer"),
    ("model.hidden_dim", "hidden_dim", int, 128, "context embedding width"),
    ("model.gat_dim", "gat_dim", int, 64, "social branch output width"),
    ("model.latent_dim", "latent_dim", int, 128, "latent belief dimension"),
    ("model.heads", "heads", int, 8, "attention heads (both branches and denoiser)"),
    ("model.n_hypotheses", "n_hypotheses", int, 20, "goal hypotheses K"),
    ("loss.lambda_kl", "lambda_kl", float, 5e-3, "complexity term weight"),
    ("loss.lambda_fb", "lambda_fb", float, 0.02, "free-bits floor per latent dimension"),
    ("loss.lambda_cls", "lambda_cls", float, 0.5, "hypothesis classification weight"),
    ("loss.lambda_div", "lambda_div", float, 0.25, "endpoint diversity weight"),
    ("loss.lambda_cons", "lambda_cons", float, 0.075, "belief consistency weight"),
    ("loss.lambda_coll", "lambda_coll", float, 0.003, "collision penalty weight"),
    ("loss.margin", "margin", float, 2.0, "diversity margin in meters"),
    ("loss.d_min", "d_min", float, 0.2, "collision safety distance in meters"),
    ("belief.lr", "belief_lr", float, 1e-3, "stage-1 Adam learning rate"),
    ("belief.epochs", "belief_epochs", int, 150, "stage-1 max epochs"),
    ("belief.patience", "belief_patience", int, 15, "early-stop patience on val proxy minADE"),
    ("belief.batch_size", "belief_batch_size", int, 64, "target agents per stage-1 batch"),
    ("belief.grad_clip", "belief_grad_clip", float, 1.0, "stage-1 global-norm gradient clip"),
    ("belief.val_fraction", "val_fraction", float, 0.1, "windows held out for validation"),
    ("diffusion.t_steps", "t_steps", int, 200, "diffusion steps T"),
    ("diffusion.beta_start", "beta_start", float, 1e-4, "linear schedule start"),
    ("diffusion.beta_end", "beta_end", float, 0.02, "linear schedule end"),
    ("diffusion.ddim_steps", "ddim_steps", int, 50, "DDIM steps at inference"),
    ("diffusion.lr", "diffusion_lr", float, 1e-4, "stage-2 AdamW peak learning rate"),
    ("diffusion.epochs", "diffusion_epochs", int, 150, "stage-2 epochs"),
    ("diffusion.warmup_epochs", "warmup_epochs", int, 5, "linear warmup epochs before cosine decay"),
    ("diffusion.ema_decay", "ema_decay", float, 0.999, "denoiser EMA decay"),
    ("diffusion.batch_size", "diffusion_batch_size", int, 64, "stage-2 batch size"),
    ("diffusion.grad_clip", "diffusion_grad_clip", float, 1.0, "stage-2 global-norm gradient clip"),
    ("diffusion.width", "denoiser_width", int, 128, "denoiser token width"),
    ("diffusion.depth", "denoiser_depth", int, 4, "denoiser attention blocks"),
    ("ablate.individual_fe", "use_individual_fe", bool, True, "keep the WTA free-energy term"),
    ("ablate.goal_supervision", "use_goal_supervision", bool, True, "keep the classification loss"),
    ("ablate.social_fe", "use_social_fe", bool, True, "keep consistency + collision terms"),
    ("ablate.token_condition", "use_token_condition", bool, True, "inject proxy at token level"),
    ("ablate.diffusion", "use_diffusion", bool, True, "refine proxies with the diffusion stage"),
    ("seed", "seed", int, 0, "global experiment seed"),
]

_ATTR_BY_KEY = {key: attr for key, attr, *_ in CONFIG_FIELDS}


def _parse_value(kind: type, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; see CONFIG_FIELDS for key docs."""

    manifest: str = ""
    heldout: str = ""
    delta: float = 4.0
    frame_step: int = 0
    hidden_dim: int = 128
    gat_dim: int = 64
    latent_dim: int = 128
    heads: int = 8
    n_hypotheses: int = 20
    lambda_kl: float = 5e-3
    lambda_fb: float = 0.02
    lambda_cls: float = 0.5
    lambda_div: float = 0.25
    lambda_cons: float = 0.075
    lambda_coll: float = 0.003
    margin: float = 2.0
    d_min: float = 0.2
    belief_lr: float = 1e-3
    belief_epochs: int = 150
    belief_patience: int = 15
    belief_batch_size: int = 64
    belief_grad_clip: float = 1.0
    val_fraction: float = 0.1
    t_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50
    diffusion_lr: float = 1e-4
    diffusion_epochs: int = 150
    warmup_epochs: int = 5
    ema_decay: float = 0.999
    diffusion_batch_size: int = 64
    diffusion_grad_clip: float = 1.0
    denoiser_width: int = 128
    denoiser_depth: int = 4
    use_individual_fe: bool = True
    use_goal_supervision: bool = True
    use_social_fe: bool = True
    use_token_condition: bool = True
    use_diffusion: bool = True
    seed: int = 0

    def to_dict(self) -> dict[str, object]:
        return {key: getattr(self, attr) for key, attr, *_ in CONFIG_FIELDS}

    @classmethod
    def from_dict(cls, mapping: dict[str, object]) -> "ExperimentConfig":
        cfg = cls()
        for key, value in mapping.items():
            if key not in _ATTR_BY_KEY:
                raise KeyError(f"unknown config key: {key}")
            setattr(cfg, _ATTR_BY_KEY[key], value)
        return cfg

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        cfg = cls()
        kinds = {key: kind for key, _, kind, _, _ in CONFIG_FIELDS}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in _ATTR_BY_KEY:
                    raise KeyError(f"{path}:{lineno}: unknown config key {key!r}")
                setattr(cfg, _ATTR_BY_KEY[key], _parse_value(kinds[key], raw))
        return cfg

    def to_text(self) -> str:
        lines = []
        for key, attr, kind, _, help_text in CONFIG_FIELDS:
            value = getattr(self, attr)
            rendered = str(value).lower() if kind is bool else str(value)
            lines.append(f"{key} = {rendered}  # {help_text}")
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def validate(self) -> "ExperimentConfig":
        weights = (
            self.lambda_kl, self.lambda_fb, self.lambda_cls, self.lambda_div,
            self.lambda_cons, self.lambda_coll,
        )
        if any(w < 0 for w in weights):
            raise ValueError("loss weights must be non-negative")
        if self.n_hypotheses < 1:
            raise ValueError("model.n_hypotheses must be >= 1")
        if self.delta <= 0:
            raise ValueError("data.delta must be positive")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("diffusion beta range must satisfy 0 < start < end < 1")
        return self

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def model_dims(self) -> tuple[int, int, int, int, int]:
        return (self.hidden_dim, self.gat_dim, self.latent_dim, self.heads, self.n_hypotheses)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# --------------------------------------------------------------------------
# Prepared dataset
# --------------------------------------------------------------------------


@dataclass
class Window:
    """All samples of one scene sharing the same t = 0 frame, plus context agents.

    ``agent_ids`` covers every agent appearing in any target's local graph;
    ``node_rows[k]`` indexes this window's agent arrays for target k's graph
    with the target itself first.
    """

    scene: str
    t0_frame: int
    agent_ids: np.ndarray  # [A] int64
    histories: np.ndarray  # [A, T_OBS, 2] float32, back-filled
    target_rows: np.ndarray  # [n_t] int64 rows into agent arrays
    futures: np.ndarray  # [n_t, T_FUT, 2] float32
    node_rows: list[np.ndarray]  # per target: graph node rows, [0] = target
    target_edges: np.ndarray  # [E, 2] int64 pairs of target indices

    @property
    def n_targets(self) -> int:
        return len(self.target_rows)


class WindowTensors:
    """Derived per-window arrays shared by training and evaluation."""

    def __init__(self, window: Window, delta: float):
        self.window = window
        self.scene = window.scene
        self.t0_frame = window.t0_frame
        hist = window.histories.astype(np.float64)
        self.kin = np.stack([dataio.kinematic_features(h) for h in hist]).astype(np.float32)
        pos0 = hist[:, -1]
        vel0 = hist[:, -1] - hist[:, -2]
        self.edge_feats = dataio.edge_feature_matrix(pos0, vel0).astype(np.float32)
        dist = np.linalg.norm(pos0[None] - pos0[:, None], axis=-1)
        adj = dist < delta
        np.fill_diagonal(adj, True)
        self.adj = adj
        self.hist = window.histories
        self.futures = window.futures
        self.node_rows = window.node_rows
        self.target_rows = window.target_rows
        self.target_edges = window.target_edges
        self.agent_ids = window.agent_ids

    @property
    def n_targets(self) -> int:
        return len(self.target_rows)


@dataclass
class BatchTensors:
    """Padded per-target graphs for a list of windows (node 0 = target).

    Positions (kinematic columns 0:2, history, future) are expressed in each
    target's own frame, anchored at its t = 0 position; ``anchors`` holds the
    world-frame origins so outputs and cross-agent distances can be restored.
    Velocities, accelerations and edge features are translation invariant and
    unaffected.
    """

    node_kin: torch.Tensor  # [B, N, T_OBS, 6]
    edge_feats: torch.Tensor  # [B, N, N, 6]
    adj: torch.Tensor  # [B, N, N] bool
    node_mask: torch.Tensor  # [B, N] bool
    history: torch.Tensor  # [B, T_OBS, 2] anchored
    future: torch.Tensor | None  # [B, T_FUT, 2] anchored
    anchors: torch.Tensor  # [B, 2] world-frame target positions at t = 0
    social_edges: torch.Tensor  # Long [E, 2]
    scenes: list[str]
    agent_ids: list[int]

    @property
    def n_targets(self) -> int:
        return self.node_kin.shape[0]


def build_batch(windows: list[WindowTensors], device=None) -> BatchTensors:
    n_max = max(max(len(rows) for rows in w.node_rows) for w in windows)
    kin, edges, adjs, masks, hists, futs, anchors = [], [], [], [], [], [], []
    social: list[tuple[int, int]] = []
    scenes: list[str] = []
    agent_ids: list[int] = []
    offset = 0
    for w in windows:
        for k, rows in enumerate(w.node_rows):
            n = len(rows)
            anchor = w.hist[rows[0], -1].astype(np.float32)
            pad_kin = np.zeros((n_max, T_OBS, 6), dtype=np.float32)
            pad_kin[:n] = w.kin[rows]
            pad_kin[:n, :, 0:2] -= anchor
            pad_edge = np.zeros((n_max, n_max, 6), dtype=np.float32)
            pad_edge[:n, :n] = w.edge_feats[np.ix_(rows, rows)]
            pad_adj = np.eye(n_max, dtype=bool)
            pad_adj[:n, :n] = w.adj[np.ix_(rows, rows)]
            mask = np.zeros(n_max, dtype=bool)
            mask[:n] = True
            kin.append(pad_kin)
            edges.append(pad_edge)
            adjs.append(pad_adj)
            masks.append(mask)
            hists.append(w.hist[rows[0]] - anchor)
            futs.append(w.futures[k] - anchor)
            anchors.append(anchor)
            scenes.append(w.scene)
            agent_ids.append(int(w.agent_ids[rows[0]]))
        social.extend((offset + a, offset + b) for a, b in w.target_edges.tolist())
        offset += w.n_targets
    to = lambda arr, dtype: torch.as_tensor(np.stack(arr), dtype=dtype, device=device)
    social_t = (
        torch.as_tensor(social, dtype=torch.long, device=device)
        if social
        else torch.zeros((0, 2), dtype=torch.long, device=device)
    )
    return BatchTensors(
        node_kin=to(kin, torch.float32),
        edge_feats=to(edges, torch.float32),
        adj=to(adjs, torch.bool),
        node_mask=to(masks, torch.bool),
        history=to(hists, torch.float32),
        future=to(futs, torch.float32) if futs else None,
        anchors=to(anchors, torch.float32),
        social_edges=social_t,
        scenes=scenes,
        agent_ids=agent_ids,
    )


def observation_batch(obs: LocalObservation, device=None) -> BatchTensors:
    """Single-observation batch for :func:`predict`."""
    kin, edge_feats, adj = dataio.observation_arrays(obs)
    anchor = np.asarray(obs.ego.history[-1], dtype=np.float64)
    kin = kin.copy()
    kin[:, :, 0:2] -= anchor
    fut = obs.ego.future
    return BatchTensors(
        node_kin=torch.as_tensor(kin, dtype=torch.float32, device=device).unsqueeze(0),
        edge_feats=torch.as_tensor(edge_feats, dtype=torch.float32, device=device).unsqueeze(0),
        adj=torch.as_tensor(adj, dtype=torch.bool, device=device).unsqueeze(0),
        node_mask=torch.ones((1, kin.shape[0]), dtype=torch.bool, device=device),
        history=torch.as_tensor(
            obs.ego.history - anchor, dtype=torch.float32, device=device
        ).unsqueeze(0),
        future=(
            torch.as_tensor(fut - anchor, dtype=torch.float32, device=device).unsqueeze(0)
            if fut is not None and len(fut)
            else None
        ),
        anchors=torch.as_tensor(anchor, dtype=torch.float32, device=device).unsqueeze(0),
        social_edges=torch.zeros((0, 2), dtype=torch.long, device=device),
        scenes=[obs.ego.scene],
        agent_ids=[obs.ego.target_id],
    )


def prepare_scene(
    path: str, name: str, delta: float, frame_step: int | None = None
) -> tuple[list[Window], int]:
    """Window one scene file and assemble per-window graphs."""
    table = dataio.parse_scene(path)
    step = frame_step or dataio.infer_frame_step(table)
    samples = dataio.window_scene(table, frame_step=step, scene=name)
    by_t0: dict[int, list[dataio.Sample]] = {}
    for s in samples:
        by_t0.setdefault(s.t0_frame, []).append(s)

    windows: list[Window] = []
    for t0 in sorted(by_t0):
        group = sorted(by_t0[t0], key=lambda s: s.target_id)
        obs_list = [dataio.build_local_observation(s, table, delta, step) for s in group]
        ids = sorted({aid for obs in obs_list for aid in obs.nodes})
        row = {aid: i for i, aid in enumerate(ids)}
        histories = np.zeros((len(ids), T_OBS, 2), dtype=np.float32)
        for obs in obs_list:
            for aid, h in zip(obs.nodes, obs.node_histories()):
                histories[row[aid]] = h
        node_rows = [
            np.array([row[aid] for aid in obs.nodes], dtype=np.int64) for obs in obs_list
        ]
        target_ids = [s.target_id for s in group]
        edges = [
            (a, b)
            for a in range(len(group))
            for b in range(a + 1, len(group))
            if target_ids[b] in obs_list[a].neighbor_ids
        ]
        windows.append(
            Window(
                scene=name,
                t0_frame=t0,
                agent_ids=np.array(ids, dtype=np.int64),
                histories=histories,
                target_rows=np.array([row[t] for t in target_ids], dtype=np.int64),
                futures=np.stack([s.future for s in group]).astype(np.float32),
                node_rows=node_rows,
                target_edges=(
                    np.array(edges, dtype=np.int64)
                    if edges
                    else np.zeros((0, 2), dtype=np.int64)
                ),
            )
        )
    return windows, step


def prepare_dataset(
    manifest_path: str, delta: float, frame_step: int | None = None
) -> dict:
    """Window every scene in the manifest into the prepared-archive structure."""
    scene_paths = dataio.read_manifest(manifest_path)
    scenes: dict[str, list[Window]] = {}
    steps: dict[str, int] = {}
    for name in sorted(scene_paths):
        windows, step = prepare_scene(scene_paths[name], name, delta, frame_step)
        scenes[name] = windows
        steps[name] = step
    return {
        "version": 1,
        "delta": delta,
        "t_obs": T_OBS,
        "t_fut": T_FUT,
        "frame_steps": steps,
        "scenes": scenes,
    }


def save_prepared(data: dict, path: str) -> None:
    with open(path, "wb") as fh:
        pickle.dump(data, fh, protocol=4)


def load_prepared(path: str) -> dict:
    with open(path, "rb") as fh:
        return pickle.load(fh)


def split_train_val(
    windows: list[WindowTensors], val_fraction: float, seed: int
) -> tuple[list[WindowTensors], list[WindowTensors]]:
    """Scene-stratified window split; at least one window stays in train."""
    by_scene: dict[str, list[WindowTensors]] = {}
    for w in windows:
        by_scene.setdefault(w.scene, []).append(w)
    rng = random.Random(seed)
    train: list[WindowTensors] = []
    val: list[WindowTensors] = []
    for scene in sorted(by_scene):
        group = sorted(by_scene[scene], key=lambda w: w.t0_frame)
        rng.shuffle(group)
        n_val = int(len(group) * val_fraction)
        n_val = min(n_val, len(group) - 1)
        val.extend(group[:n_val])
        train.extend(group[n_val:])
    train.sort(key=lambda w: (w.scene, w.t0_frame))
    val.sort(key=lambda w: (w.scene, w.t0_frame))
    return train, val


def training_windows(data: dict, config: ExperimentConfig) -> list[WindowTensors]:
    out = []
    for scene in sorted(data["scenes"]):
        if scene == config.heldout:
            continue
        out.extend(WindowTensors(w, config.delta) for w in data["scenes"][scene])
    return out


def heldout_windows(data: dict, config: ExperimentConfig) -> list[WindowTensors]:
    if config.heldout not in data["scenes"]:
        raise KeyError(f"held-out scene {config.heldout!r} not in prepared data")
    return [WindowTensors(w, config.delta) for w in data["scenes"][config.heldout]]


def group_batches(windows: list[WindowTensors], batch_size: int) -> list[list[WindowTensors]]:
    batches: list[list[WindowTensors]] = []
    current: list[WindowTensors] = []
    count = 0
    for w in windows:
        if w.n_targets == 0:
            continue
        current.append(w)
        count += w.n_targets
        if count >= batch_size:
            batches.append(current)
            current, count = [], 0
    if current:
        batches.append(current)
    return batches


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Named float32 parameter map plus experiment metadata."""

    kind: str  # "belief" or "diffusion"
    params: dict[str, np.ndarray]
    config: ExperimentConfig
    ema_params: dict[str, np.ndarray] | None = None
    residual_stats: ResidualStats | None = None
    epoch: int = 0
    best_metric: float = float("nan")
    meta: dict = field(default_factory=dict)


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in module.state_dict().items()
    }


def load_state_from_numpy(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    module.load_state_dict(
        {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in params.items()}
    )


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write the single-file archive: text header, then raw float32 payload."""
    tensor_index = []
    payload = bytearray()
    groups = [("", ckpt.params)]
    if ckpt.ema_params is not None:
        groups.append(("ema/", ckpt.ema_params))
    for prefix, params in groups:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            tensor_index.append({"name": prefix + name, "shape": list(arr.shape)})
            payload.extend(arr.tobytes())
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "meta": ckpt.meta,
        "residual_stats": (
            None
            if ckpt.residual_stats is None
            else {
                "mu_r": ckpt.residual_stats.mu_r.tolist(),
                "sigma_r": ckpt.residual_stats.sigma_r.tolist(),
            }
        ),
        "tensors": tensor_index,
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n\x00")
        fh.write(bytes(payload))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    sep = blob.index(b"\n\x00", len(CKPT_MAGIC))
    header = json.loads(blob[len(CKPT_MAGIC) : sep].decode("utf-8"))
    payload = blob[sep + 2 :]
    params: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        name = entry["name"]
        if name.startswith("ema/"):
            ema[name[4:]] = arr.copy()
        else:
            params[name] = arr.copy()
    stats = header.get("residual_stats")
    return Checkpoint(
        kind=header["kind"],
        params=params,
        ema_params=ema or None,
        config=ExperimentConfig.from_dict(header["config"]),
        residual_stats=(
            None
            if stats is None
            else ResidualStats(np.array(stats["mu_r"]), np.array(stats["sigma_r"]))
        ),
        epoch=header["epoch"],
        best_metric=header["best_metric"],
        meta=header.get("meta", {}),
    )


def build_belief_model(config: ExperimentConfig) -> BeliefLearner:
    return BeliefLearner(
        dim=config.hidden_dim,
        soc_dim=config.gat_dim,
        d_z=config.latent_dim,
        k=config.n_hypotheses,
        heads=config.heads,
        t_fut=T_FUT,
    )


def build_denoiser(config: ExperimentConfig) -> ResidualDenoiser:
    return ResidualDenoiser(
        schedule_from_config(config),
        cond_dim=config.latent_dim + 2,
        width=config.denoiser_width,
        depth=config.denoiser_depth,
        heads=config.heads,
        use_token_condition=config.use_token_condition,
    )


def schedule_from_config(config: ExperimentConfig) -> NoiseSchedule:
    return diffusion.make_schedule(config.t_steps, config.beta_start, config.beta_end)


# --------------------------------------------------------------------------
# Training utilities
# --------------------------------------------------------------------------


class EMA:
    """Exponential moving average of module parameters."""

    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in module.named_parameters() if p.requires_grad
        }

    @torch.no_grad()
    def update(self, module: torch.nn.Module) -> None:
        for name, p in module.named_parameters():
            if p.requires_grad:
                self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def state_numpy(self, module: torch.nn.Module) -> dict[str, np.ndarray]:
        """Full state dict with EMA values substituted for tracked parameters."""
        out = state_to_numpy(module)
        for name, tensor in self.shadow.items():
            out[name] = tensor.cpu().numpy().astype("<f4")
        return out


def warmup_cosine_lr(epoch: int, total_epochs: int, warmup_epochs: int, peak: float) -> float:
    """Per-epoch schedule: linear ramp to peak, then cosine decay to zero."""
    if warmup_epochs > 0 and epoch <= warmup_epochs:
        return peak * epoch / warmup_epochs
    denom = max(1, total_epochs - warmup_epochs)
    progress = (epoch - warmup_epochs) / denom
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _proxy_min_ade(model: BeliefLearner, windows: list[WindowTensors], batch_size: int) -> float:
    """Mean over targets of the best proxy ADE, used for early stopping."""
    if not windows:
        return float("nan")
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for group in group_batches(windows, batch_size):
            batch = build_batch(group)
            out = model(batch.node_kin, batch.edge_feats, batch.adj, batch.node_mask)
            err = (out.proxy - batch.future.unsqueeze(1)).norm(dim=-1).mean(dim=-1)  # [B, K]
            total += err.min(dim=-1).values.sum().item()
            count += batch.n_targets
    model.train()
    return total / max(1, count)


def _breakdown_dump(loss: LossBreakdown) -> str:
    return (
        f"f_ind={loss.f_ind.item():.4g} l_cls={loss.l_cls.item():.4g} "
        f"l_div={loss.l_div.item():.4g} l_cons={loss.l_cons.item():.4g} "
        f"l_coll={loss.l_coll.item():.4g}"
    )


def train_belief(config: ExperimentConfig, data: dict) -> Checkpoint:
    """Stage 1: minimize the free-energy objective with early stopping."""
    config.validate()
    seed_everything(config.seed)
    windows = training_windows(data, config)
    train_w, val_w = split_train_val(windows, config.val_fraction, config.seed)
    model = build_belief_model(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.belief_lr)
    rng = random.Random(config.seed + 1)

    best_metric = float("inf")
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = 0
    patience_left = config.belief_patience
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(1, config.belief_epochs + 1):
        order = list(train_w)
        rng.shuffle(order)
        epoch_total, epoch_n = 0.0, 0
        for group in group_batches(order, config.belief_batch_size):
            batch = build_batch(group)
            out = model(batch.node_kin, batch.edge_feats, batch.adj, batch.node_mask)
            loss = total_objective(
                out,
                batch.future,
                batch.social_edges,
                lambda_kl=config.lambda_kl,
                lambda_fb=config.lambda_fb,
                lambda_cls=config.lambda_cls,
                lambda_div=config.lambda_div,
                lambda_cons=config.lambda_cons,
                lambda_coll=config.lambda_coll,
                margin=config.margin,
                d_min=config.d_min,
                anchors=batch.anchors,
                use_individual_fe=config.use_individual_fe,
                use_goal_supervision=config.use_goal_supervision,
                use_social_fe=config.use_social_fe,
            )
            if not torch.isfinite(loss.total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: {_breakdown_dump(loss)}"
                )
            optimizer.zero_grad()
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.belief_grad_clip)
            optimizer.step()
            step += 1
            logger.info(loss.log_line(step))
            epoch_total += loss.total.item() * batch.n_targets
            epoch_n += batch.n_targets
        epoch_losses.append(epoch_total / max(1, epoch_n))

        metric = _proxy_min_ade(model, val_w, config.belief_batch_size)
        if math.isnan(metric):  # tiny datasets without a val split
            metric = epoch_losses[-1]
        if metric < best_metric - 1e-12:
            best_metric = metric
            best_state = state_to_numpy(model)
            best_epoch = epoch
            patience_left = config.belief_patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                logger.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break

    if best_state is None:
        best_state = state_to_numpy(model)
        best_epoch = config.belief_epochs
    return Checkpoint(
        kind="belief",
        params=best_state,
        config=config,
        epoch=best_epoch,
        best_metric=best_metric,
        meta={"epoch_losses": epoch_losses},
    )


def _frozen_belief(belief_ckpt: Checkpoint) -> BeliefLearner:
    model = build_belief_model(belief_ckpt.config)
    load_state_from_numpy(model, belief_ckpt.params)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def _wta_conditions(
    model: BeliefLearner, windows: list[WindowTensors], batch_size: int
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Frozen-belief conditioning tuples: (cond [M, d_z+2], proxy, residual)."""
    conds, proxies, residuals = [], [], []
    for group in group_batches(windows, batch_size):
        batch = build_batch(group)
        out = model(batch.node_kin, batch.edge_feats, batch.adj, batch.node_mask)
        k_star = wta_select(out.goals, batch.future[:, -1])
        best = out.select(k_star)
        conds.append(torch.cat([best.mu_z, best.goals], dim=-1))
        proxies.append(best.proxy)
        residuals.append(batch.future - best.proxy)
    return torch.cat(conds), torch.cat(proxies), torch.cat(residuals)


def train_diffusion(config: ExperimentConfig, belief_ckpt: Checkpoint, data: dict) -> Checkpoint:
    """Stage 2: train the residual denoiser on frozen-belief WTA residuals."""
    config.validate()
    if belief_ckpt.config.model_dims() != config.model_dims():
        raise CheckpointMismatch(
            f"stage-1 checkpoint dims {belief_ckpt.config.model_dims()} != "
            f"configured dims {config.model_dims()}"
        )
    seed_everything(config.seed)
    belief_model = _frozen_belief(belief_ckpt)
    before = {k: v.copy() for k, v in state_to_numpy(belief_model).items()}

    windows = training_windows(data, config)
    train_w, val_w = split_train_val(windows, config.val_fraction, config.seed)
    cond_tr, proxy_tr, resid_tr = _wta_conditions(belief_model, train_w, config.diffusion_batch_size)
    stats = dataio.residual_stats([resid_tr.numpy()])
    x0_tr = diffusion.normalize_residual(resid_tr, stats)
    if val_w:
        cond_va, proxy_va, resid_va = _wta_conditions(
            belief_model, val_w, config.diffusion_batch_size
        )
        x0_va = diffusion.normalize_residual(resid_va, stats)
    else:
        cond_va = proxy_va = x0_va = None

    schedule = schedule_from_config(config)
    denoiser = build_denoiser(config)
    optimizer = torch.optim.AdamW(denoiser.parameters(), lr=config.diffusion_lr)
    ema = EMA(denoiser, config.ema_decay)
    gen = torch.Generator().manual_seed(config.seed + 2)

    # fixed validation probe so epochs are comparable
    if x0_va is not None:
        t_va = torch.randint(1, config.t_steps + 1, (x0_va.shape[0],), generator=gen)
        eps_va = torch.randn(x0_va.shape, generator=gen)
        xt_va = diffusion.forward_sample(x0_va, t_va, eps_va, schedule)

    n = x0_tr.shape[0]
    best_metric = float("inf")
    best_raw: dict[str, np.ndarray] | None = None
    best_ema: dict[str, np.ndarray] | None = None
    best_epoch = 0
    epoch_losses: list[float] = []
    step = 0
    for epoch in range(1, config.diffusion_epochs + 1):
        lr = warmup_cosine_lr(epoch, config.diffusion_epochs, config.warmup_epochs, config.diffusion_lr)
        for grp in optimizer.param_groups:
            grp["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        epoch_total, n_batches = 0.0, 0
        for start in range(0, n, config.diffusion_batch_size):
            idx = perm[start : start + config.diffusion_batch_size]
            x0b, condb, proxyb = x0_tr[idx], cond_tr[idx], proxy_tr[idx]
            t = torch.randint(1, config.t_steps + 1, (len(idx),), generator=gen)
            eps = torch.randn(x0b.shape, generator=gen)
            x_t = diffusion.forward_sample(x0b, t, eps, schedule)
            eps_hat = denoiser(x_t, t, condb, proxyb)
            loss = diffusion.min_snr_loss(eps_hat, eps, t, schedule)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite diffusion loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(denoiser.parameters(), config.diffusion_grad_clip)
            optimizer.step()
            ema.update(denoiser)
            step += 1
            logger.info("step=%d l_diff=%.6f lr=%.3g", step, loss.item(), lr)
            epoch_total += loss.item()
            n_batches += 1
        epoch_losses.append(epoch_total / max(1, n_batches))

        if x0_va is not None:
            raw_backup = copy.deepcopy(denoiser.state_dict())
            denoiser.load_state_dict(
                {k: ema.shadow.get(k, v) for k, v in denoiser.state_dict().items()}
            )
            denoiser.eval()
            with torch.no_grad():
                eps_hat = denoiser(xt_va, t_va, cond_va, proxy_va)
                metric = diffusion.min_snr_loss(eps_hat, eps_va, t_va, schedule).item()
            denoiser.load_state_dict(raw_backup)
            denoiser.train()
        else:
            metric = epoch_losses[-1]
        if metric < best_metric:
            best_metric = metric
            best_raw = state_to_numpy(denoiser)
            best_ema = ema.state_numpy(denoiser)
            best_epoch = epoch

    after = state_to_numpy(belief_model)
    for name in before:
        if not np.array_equal(before[name], after[name]):
            raise AssertionError(f"belief parameter {name} changed during stage 2")

    if best_raw is None:
        best_raw = state_to_numpy(denoiser)
        best_ema = ema.state_numpy(denoiser)
        best_epoch = config.diffusion_epochs
    return Checkpoint(
        kind="diffusion",
        params=best_raw,
        ema_params=best_ema,
        config=config,
        residual_stats=stats,
        epoch=best_epoch,
        best_metric=best_metric,
        meta={"epoch_losses": epoch_losses},
    )


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


@dataclass
class PredictionSet:
    """K refined trajectories plus the hypothesis weights of one agent."""

    trajectories: np.ndarray  # [K, T_FUT, 2]
    weights: np.ndarray  # [K]
    agent_id: int = -1
    scene: str = ""


def select_deterministic(predictions: PredictionSet) -> np.ndarray:
    """Trajectory of the highest-weight hypothesis (ties: lowest index)."""
    if predictions.trajectories.shape[0] < 1:
        raise ValueError("empty prediction set")
    return predictions.trajectories[int(np.argmax(predictions.weights))]


def _hypothesis_noise(
    k: int, t_fut: int, seed: int, dtype=torch.float32
) -> torch.Tensor:
    """Per-hypothesis start noise, deterministic per (seed, hypothesis)."""
    draws = []
    for h in range(k):
        gen = torch.Generator().manual_seed(seed * _HYP_SEED_STRIDE + h)
        draws.append(torch.randn((t_fut, 2), generator=gen, dtype=dtype))
    return torch.stack(draws)


class Predictor:
    """Loaded model pair ready for batched K-hypothesis inference."""

    def __init__(
        self,
        belief_ckpt: Checkpoint,
        diffusion_ckpt: Checkpoint | None,
        use_ema: bool = True,
    ):
        if diffusion_ckpt is not None:
            if belief_ckpt.config.model_dims() != diffusion_ckpt.config.model_dims():
                raise CheckpointMismatch(
                    f"belief dims {belief_ckpt.config.model_dims()} != "
                    f"diffusion dims {diffusion_ckpt.config.model_dims()}"
                )
        self.config = (diffusion_ckpt or belief_ckpt).config
        self.belief = _frozen_belief(belief_ckpt)
        self.denoiser = None
        self.schedule = None
        self.stats = None
        if diffusion_ckpt is not None and diffusion_ckpt.config.use_diffusion:
            if diffusion_ckpt.residual_stats is None:
                raise ValueError("diffusion checkpoint lacks residual statistics")
            self.denoiser = build_denoiser(diffusion_ckpt.config)
            params = (
                diffusion_ckpt.ema_params
                if use_ema and diffusion_ckpt.ema_params
                else diffusion_ckpt.params
            )
            load_state_from_numpy(self.denoiser, params)
            self.denoiser.eval()
            for p in self.denoiser.parameters():
                p.requires_grad_(False)
            self.schedule = schedule_from_config(diffusion_ckpt.config)
            self.stats = diffusion_ckpt.residual_stats

    def n_parameters(self) -> float:
        total = sum(p.numel() for p in self.belief.parameters())
        if self.denoiser is not None:
            total += sum(p.numel() for p in self.denoiser.parameters())
        return total / 1e6

    @torch.no_grad()
    def predict_batch(self, batch: BatchTensors, seed: int = 0) -> list[PredictionSet]:
        out: BeliefOutput = self.belief(
            batch.node_kin, batch.edge_feats, batch.adj, batch.node_mask
        )
        b, k = out.goals.shape[:2]
        if self.denoiser is None:
            refined = out.proxy
        else:
            cond = out.condition().reshape(b * k, -1)
            proxy = out.proxy.reshape(b * k, T_FUT, 2)
            noise = _hypothesis_noise(k, T_FUT, seed, dtype=proxy.dtype)
            x_t = noise.unsqueeze(0).expand(b, k, T_FUT, 2).reshape(b * k, T_FUT, 2)
            x0_hat = ddim_sample(
                self.denoiser,
                cond,
                proxy,
                self.schedule,
                n_steps=self.config.ddim_steps,
                x_t=x_t,
            )
            residual = denormalize_residual(x0_hat, self.stats)
            refined = diffusion.refine(proxy, residual).reshape(b, k, T_FUT, 2)
        refined = refined + batch.anchors.view(b, 1, 1, 2)  # back to world frame
        weights = out.weights.cpu().numpy()
        refined = refined.cpu().numpy()
        return [
            PredictionSet(
                trajectories=refined[i].astype(np.float64),
                weights=weights[i].astype(np.float64),
                agent_id=batch.agent_ids[i],
                scene=batch.scenes[i],
            )
            for i in range(b)
        ]

    def predict(self, obs: LocalObservation, seed: int = 0) -> PredictionSet:
        return self.predict_batch(observation_batch(obs), seed)[0]


def predict(
    belief_ckpt: Checkpoint,
    diffusion_ckpt: Checkpoint | None,
    obs: LocalObservation,
    k: int | None = None,
    seed: int = 0,
) -> PredictionSet:
    """Full K-hypothesis inference for one local observation."""
    predictor = Predictor(belief_ckpt, diffusion_ckpt)
    if k is not None and k != predictor.config.n_hypotheses:
        raise ValueError(
            f"k={k} does not match configured hypothesis count "
            f"{predictor.config.n_hypotheses}"
        )
    return predictor.predict(obs, seed)


def evaluate(
    predictor: Predictor,
    windows: list[WindowTensors],
    seeds: list[int],
    batch_size: int = 64,
    measure: bool = True,
) -> metrics.EvalReport:
    """Best-of-K and deterministic displacement errors averaged over seeds."""
    per_scene_vals: dict[str, dict[str, list[float]]] = {}
    for seed in seeds:
        for group in group_batches(windows, batch_size):
            batch = build_batch(group)
            preds = predictor.predict_batch(batch, seed)
            future = (batch.future + batch.anchors.unsqueeze(1)).cpu().numpy()
            for i, pred in enumerate(preds):
                min_ade, min_fde = metrics.min_over_k(pred.trajectories, future[i])
                det = select_deterministic(pred)
                vals = per_scene_vals.setdefault(
                    pred.scene, {"min_ade_k": [], "min_fde_k": [], "ade_1": [], "fde_1": []}
                )
                vals["min_ade_k"].append(min_ade)
                vals["min_fde_k"].append(min_fde)
                vals["ade_1"].append(metrics.ade(det, future[i]))
                vals["fde_1"].append(metrics.fde(det, future[i]))

    report = metrics.EvalReport()
    per_scene = {
        scene: {key: float(np.mean(vals)) for key, vals in d.items()}
        for scene, d in per_scene_vals.items()
    }
    report.per_scene = per_scene
    if per_scene:
        for key in ("min_ade_k", "min_fde_k", "ade_1", "fde_1"):
            setattr(report, key, float(np.mean([d[key] for d in per_scene.values()])))
    report.n_agents = sum(len(d["min_ade_k"]) for d in per_scene_vals.values()) // max(1, len(seeds))
    report.params_m = predictor.n_parameters()
    if measure and windows:
        probe = build_batch(windows[:1])
        median, var = metrics.measure_latency(
            lambda b: predictor.predict_batch(b, seeds[0]), _BatchSequence(probe)
        )
        report.latency_ms_per_agent = median
        report.latency_variance = var
    return report


class _BatchSequence(BatchTensors):
    """BatchTensors that also reports its agent count via len()."""

    def __init__(self, batch: BatchTensors):
        self.__dict__.update(batch.__dict__)

    def __len__(self) -> int:
        return self.n_targets
