"""Displacement-error metrics, latency measurement and report formatting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np


def ade(pred, gt) -> float:
    """Mean Euclidean displacement over timesteps (meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    """Euclidean displacement at the final timestep (meters)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def min_over_k(preds, gt) -> tuple[float, float]:
    """Best-of-K displacement errors, minimized independently per metric."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 3 or preds.shape[0] < 1:
        raise ValueError("preds must be a non-empty [K, T, 2] array")
    ades = [ade(p, gt) for p in preds]
    fdes = [fde(p, gt) for p in preds]
    return min(ades), min(fdes)


def constant_velocity(history, t_fut: int = 12) -> np.ndarray:
    """Extrapolate the last observed per-step displacement for t_fut steps."""
    history = np.asarray(history, dtype=np.float64)
    v = history[-1] - history[-2]
    steps = np.arange(1, t_fut + 1)[:, None]
    return history[-1] + steps * v


def params_millions(module) -> float:
    """Trainable parameter count of a torch module, in millions."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad) / 1e6


def measure_latency(predict_fn, obs_batch, repeats: int = 5, warmup: int = 2) -> tuple[float, float]:
    """Median and variance of wall-clock ms per agent over repeated runs.

    ``predict_fn`` is called once per repeat on the full batch; per-agent time
    divides by ``len(obs_batch)``.
    """
    n = max(1, len(obs_batch))
    for _ in range(warmup):
        predict_fn(obs_batch)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        predict_fn(obs_batch)
        times.append((time.perf_counter() - start) * 1000.0 / n)
    return float(np.median(times)), float(np.var(times))


@dataclass
class EvalReport:
    """Aggregated evaluation results with a per-scene breakdown."""

    min_ade_k: float = float("nan")
    min_fde_k: float = float("nan")
    ade_1: float = float("nan")
    fde_1: float = float("nan")
    n_agents: int = 0
    params_m: float = float("nan")
    latency_ms_per_agent: float = float("nan")
    latency_variance: float = float("nan")
    per_scene: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_keyvalues(self) -> str:
        lines = [
            f"min_ade_k={self.min_ade_k:.6f}",
            f"min_fde_k={self.min_fde_k:.6f}",
            f"ade_1={self.ade_1:.6f}",
            f"fde_1={self.fde_1:.6f}",
            f"n_agents={self.n_agents}",
            f"params_m={self.params_m:.6f}",
            f"latency_ms_per_agent={self.latency_ms_per_agent:.6f}",
            f"latency_variance={self.latency_variance:.6f}",
        ]
        for scene in sorted(self.per_scene):
            for key in sorted(self.per_scene[scene]):
                lines.append(f"scene.{scene}.{key}={self.per_scene[scene][key]:.6f}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        rows = [
            ("minADE_K", self.min_ade_k),
            ("minFDE_K", self.min_fde_k),
            ("ADE_1", self.ade_1),
            ("FDE_1", self.fde_1),
            ("agents", self.n_agents),
            ("params (M)", self.params_m),
            ("latency (ms/agent)", self.latency_ms_per_agent),
        ]
        width = max(len(name) for name, _ in rows)
        lines = [f"{name:<{width}}  {value:>12.4f}" if isinstance(value, float) else f"{name:<{width}}  {value:>12d}" for name, value in rows]
        for scene in sorted(self.per_scene):
            vals = self.per_scene[scene]
            detail = "  ".join(f"{k}={v:.4f}" for k, v in sorted(vals.items()))
            lines.append(f"{scene:<{width}}  {detail}")
        return "\n".join(lines)
