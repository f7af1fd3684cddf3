"""Synthetic crowd scenes for tests.

Agents walk toward per-agent goal points with speed noise and gentle mutual
repulsion, producing curved, interaction-bearing trajectories at 0.4 s steps.
Deterministic given the seed.
"""

from __future__ import annotations

import numpy as np

SPEED = 0.5  # meters per 0.4 s step, typical walking pace


def synth_scene(
    n_agents: int = 30,
    n_frames: int = 60,
    seed: int = 0,
    frame_step: int = 1,
    arena: float = 12.0,
    turn_rate: float = 0.06,
    noise: float = 0.02,
) -> list[str]:
    """Generate scene-file lines ``frame id x y``.

    Agents enter at staggered frames, head toward a goal on the far side of
    the arena and steer around close agents; headings drift so constant
    velocity extrapolation is a beatable baseline.
    """
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, max(1, n_frames // 3), size=n_agents)
    pos = rng.uniform(0.0, arena, size=(n_agents, 2))
    goals = rng.uniform(0.0, arena, size=(n_agents, 2))
    # keep goals far enough that agents keep moving for the whole scene
    far = np.linalg.norm(goals - pos, axis=1) < arena / 2
    goals[far] = arena - pos[far]
    heading = rng.uniform(-np.pi, np.pi, size=n_agents)
    curve = rng.uniform(-turn_rate, turn_rate, size=n_agents)

    lines: list[str] = []
    for frame in range(n_frames):
        for a in range(n_agents):
            if frame < starts[a]:
                continue
            to_goal = goals[a] - pos[a]
            desired = np.arctan2(to_goal[1], to_goal[0])
            diff = (desired - heading[a] + np.pi) % (2 * np.pi) - np.pi
            heading[a] += np.clip(diff, -turn_rate, turn_rate) + curve[a]
            step = SPEED * np.array([np.cos(heading[a]), np.sin(heading[a])])
            # soft repulsion from the closest other active agent
            others = [b for b in range(n_agents) if b != a and frame >= starts[b]]
            if others:
                dists = np.linalg.norm(pos[others] - pos[a], axis=1)
                nearest = others[int(np.argmin(dists))]
                d = dists.min()
                if d < 1.0:
                    away = pos[a] - pos[nearest]
                    norm = np.linalg.norm(away)
                    if norm > 1e-9:
                        step += 0.15 * (1.0 - d) * away / norm
            pos[a] = pos[a] + step + rng.normal(0.0, noise, size=2)
            lines.append(
                f"{frame * frame_step} {a + 1} {pos[a][0]:.6f} {pos[a][1]:.6f}"
            )
    return lines


def write_scene(path, **kwargs) -> None:
    lines = synth_scene(**kwargs)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_manifest(path, scenes: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, scene_path in scenes.items():
            fh.write(f"{name} {scene_path}\n")
