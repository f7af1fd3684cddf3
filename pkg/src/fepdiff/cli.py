"""Command-line entry points.

Commands: ``prepare``, ``train-belief``, ``train-diffusion``, ``eval``,
``predict``, ``plot``. Every command is deterministic given its flags and
``--seed``; partial outputs are removed on failure. Exit codes: 0 success,
2 scene missing from the manifest, 3 incompatible checkpoint dimensions,
1 any other error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import dataio, metrics, pipeline

logger = logging.getLogger("fepdiff")

EXIT_MISSING_SCENE = 2
EXIT_CKPT_MISMATCH = 3


class MissingSceneError(KeyError):
    pass


def _setup_logging(log_path: str | None = None) -> None:
    root = logging.getLogger("fepdiff")
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        if isinstance(handler, logging.FileHandler):
            root.removeHandler(handler)
            handler.close()
    if not any(isinstance(h, logging.StreamHandler) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        handler.setLevel(logging.WARNING)
        root.addHandler(handler)
    if log_path:
        handler = logging.FileHandler(log_path, mode="w")
        handler.setFormatter(logging.Formatter("%(message)s"))
        root.addHandler(handler)


def _load_config(args: argparse.Namespace) -> pipeline.ExperimentConfig:
    config = (
        pipeline.ExperimentConfig.from_file(args.config)
        if args.config
        else pipeline.ExperimentConfig()
    )
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


# --------------------------------------------------------------------------
# prediction file format
# --------------------------------------------------------------------------


def write_prediction_file(
    path: str, predictions: list[pipeline.PredictionSet], scene: str, seed: int, config_hash: str
) -> None:
    """Line-oriented text export: header plus one record per (agent, hypothesis)."""
    with open(path, "w", encoding="utf-8") as fh:
        k = predictions[0].trajectories.shape[0] if predictions else 0
        fh.write(f"# scene={scene} seed={seed} k={k} config={config_hash}\n")
        fh.write("# columns: agent_id k pi x1 y1 ... x12 y12\n")
        for pred in predictions:
            for h in range(pred.trajectories.shape[0]):
                coords = " ".join(f"{v:.6f}" for v in pred.trajectories[h].reshape(-1))
                fh.write(f"{pred.agent_id} {h} {pred.weights[h]:.8f} {coords}\n")


def read_prediction_file(path: str) -> tuple[dict[str, str], list[pipeline.PredictionSet]]:
    header: dict[str, str] = {}
    rows: dict[int, list[tuple[int, float, np.ndarray]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        header[key] = value
                continue
            parts = line.split()
            agent_id, k = int(parts[0]), int(parts[1])
            pi = float(parts[2])
            coords = np.array([float(v) for v in parts[3:]]).reshape(-1, 2)
            rows.setdefault(agent_id, []).append((k, pi, coords))
    predictions = []
    for agent_id in sorted(rows):
        entries = sorted(rows[agent_id], key=lambda e: e[0])
        predictions.append(
            pipeline.PredictionSet(
                trajectories=np.stack([e[2] for e in entries]),
                weights=np.array([e[1] for e in entries]),
                agent_id=agent_id,
                scene=header.get("scene", ""),
            )
        )
    return header, predictions


def _first_window_samples(scene_path: str, scene: str, delta: float, frame_step: int | None):
    """One (sample, observation) per agent: its earliest valid window."""
    table = dataio.parse_scene(scene_path)
    step = frame_step or dataio.infer_frame_step(table)
    first: dict[int, dataio.Sample] = {}
    for sample in dataio.window_scene(table, frame_step=step, scene=scene):
        if sample.target_id not in first:
            first[sample.target_id] = sample
    samples = [first[a] for a in sorted(first)]
    return [(s, dataio.build_local_observation(s, table, delta, step)) for s in samples]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    config = _load_config(args)
    manifest = args.manifest or config.manifest
    scenes = dataio.read_manifest(manifest)
    scene = args.scene or config.heldout
    if scene and scene not in scenes:
        raise MissingSceneError(scene)
    delta = args.delta if args.delta is not None else config.delta
    data = pipeline.prepare_dataset(manifest, delta, config.frame_step or None)
    pipeline.save_prepared(data, args.out)
    total_neighbors = 0
    total_samples = 0
    for name in sorted(data["scenes"]):
        windows = data["scenes"][name]
        n_samples = sum(w.n_targets for w in windows)
        n_neigh = sum(len(rows) - 1 for w in windows for rows in w.node_rows)
        total_samples += n_samples
        total_neighbors += n_neigh
        print(f"scene={name} samples={n_samples} windows={len(windows)}")
    avg = total_neighbors / total_samples if total_samples else 0.0
    print(f"total samples={total_samples} avg_neighbors={avg:.3f} archive={args.out}")
    return 0


def cmd_train(args: argparse.Namespace, stage: str) -> int:
    config = _load_config(args)
    _setup_logging(args.out + ".log")
    data = pipeline.load_prepared(args.data)
    if config.heldout and config.heldout not in data["scenes"]:
        raise MissingSceneError(config.heldout)
    if stage == "belief":
        ckpt = pipeline.train_belief(config, data)
    else:
        belief_ckpt = pipeline.load_checkpoint(args.belief)
        ckpt = pipeline.train_diffusion(config, belief_ckpt, data)
    pipeline.save_checkpoint(ckpt, args.out)
    print(f"stage={stage} best_epoch={ckpt.epoch} best_metric={ckpt.best_metric:.6f} -> {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    belief_ckpt = pipeline.load_checkpoint(args.belief)
    diffusion_ckpt = pipeline.load_checkpoint(args.diffusion) if args.diffusion else None
    predictor = pipeline.Predictor(belief_ckpt, diffusion_ckpt)
    data = pipeline.load_prepared(args.data)
    heldout = args.scene or config.heldout
    if heldout not in data["scenes"]:
        raise MissingSceneError(heldout)
    config.heldout = heldout
    windows = pipeline.heldout_windows(data, config)
    seeds = [args.seed + i for i in range(args.n_seeds)]
    report = pipeline.evaluate(predictor, windows, seeds)
    if args.mode == "stochastic":
        print(f"minADE_K={report.min_ade_k:.4f} minFDE_K={report.min_fde_k:.4f}")
    else:
        print(f"ADE_1={report.ade_1:.4f} FDE_1={report.fde_1:.4f}")
    print(report.format_table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_keyvalues())
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    config = _load_config(args)
    belief_ckpt = pipeline.load_checkpoint(args.belief)
    diffusion_ckpt = pipeline.load_checkpoint(args.diffusion) if args.diffusion else None
    predictor = pipeline.Predictor(belief_ckpt, diffusion_ckpt)
    scenes = dataio.read_manifest(args.manifest or config.manifest)
    scene = args.scene or config.heldout
    if scene not in scenes:
        raise MissingSceneError(scene)
    pairs = _first_window_samples(scenes[scene], scene, config.delta, config.frame_step or None)
    predictions = [predictor.predict(obs, args.seed) for _, obs in pairs]
    write_prediction_file(args.out, predictions, scene, args.seed, config.content_hash())
    print(f"wrote {len(predictions)} agents x {predictor.config.n_hypotheses} hypotheses to {args.out}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    config = _load_config(args)
    header, predictions = read_prediction_file(args.predictions)
    scene = header.get("scene", "")
    pairs = _first_window_samples(args.scene_file, scene, config.delta, config.frame_step or None)
    by_agent = {s.target_id: s for s, _ in pairs}

    width, height = (float(v) for v in args.figsize.split(","))
    fig, ax = plt.subplots(figsize=(width, height), dpi=args.dpi)
    for pred in predictions:
        sample = by_agent.get(pred.agent_id)
        if sample is None:
            continue
        hist, fut = sample.history, sample.future
        ax.plot(hist[:, 0], hist[:, 1], "-", color="tab:blue", linewidth=1.5)
        ax.plot(
            np.concatenate([[hist[-1, 0]], fut[:, 0]]),
            np.concatenate([[hist[-1, 1]], fut[:, 1]]),
            "--",
            color="tab:green",
            linewidth=1.5,
        )
        ades = [metrics.ade(t, fut) for t in pred.trajectories]
        best = int(np.argmin(ades))
        for h, traj in enumerate(pred.trajectories):
            xs = np.concatenate([[hist[-1, 0]], traj[:, 0]])
            ys = np.concatenate([[hist[-1, 1]], traj[:, 1]])
            if h == best:
                ax.plot(xs, ys, "-", color="tab:red", linewidth=1.5, alpha=1.0)
            else:
                ax.plot(xs, ys, "-", color="tab:red", linewidth=0.8, alpha=0.15)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    fig.savefig(args.out)  # no tight bbox: output pixels stay figsize * dpi
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="experiment config file (key = value)")
    parser.add_argument("--seed", type=int, default=0, help="seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fepdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="window scenes into a prepared dataset archive")
    _add_common(p)
    p.add_argument("--manifest", default=None, help="scene manifest path")
    p.add_argument("--scene", default=None, help="held-out scene name to validate")
    p.add_argument("--delta", type=float, default=None, help="neighbor radius override")
    p.add_argument("--out", required=True, help="output archive path")
    p.set_defaults(func=cmd_prepare, outputs=lambda a: [a.out])

    p = sub.add_parser("train-belief", help="stage 1: train the belief learner")
    _add_common(p)
    p.add_argument("--data", required=True, help="prepared dataset archive")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=lambda a: cmd_train(a, "belief"), outputs=lambda a: [a.out, a.out + ".log"])

    p = sub.add_parser("train-diffusion", help="stage 2: train the residual denoiser")
    _add_common(p)
    p.add_argument("--data", required=True, help="prepared dataset archive")
    p.add_argument("--belief", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(
        func=lambda a: cmd_train(a, "diffusion"), outputs=lambda a: [a.out, a.out + ".log"]
    )

    p = sub.add_parser("eval", help="evaluate checkpoints on the held-out scene")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--belief", required=True)
    p.add_argument("--diffusion", default=None)
    p.add_argument("--scene", default=None, help="held-out scene override")
    p.add_argument("--mode", choices=("stochastic", "deterministic"), default="stochastic")
    p.add_argument("--n-seeds", type=int, default=3, help="seeds averaged (default 3)")
    p.add_argument("--out", default=None, help="report file path")
    p.set_defaults(func=cmd_eval, outputs=lambda a: [a.out] if a.out else [])

    p = sub.add_parser("predict", help="export per-agent K-hypothesis predictions")
    _add_common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--scene", default=None)
    p.add_argument("--belief", required=True)
    p.add_argument("--diffusion", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict, outputs=lambda a: [a.out])

    p = sub.add_parser("plot", help="render history, ground truth and predictions")
    _add_common(p)
    p.add_argument("--predictions", required=True, help="prediction file from `predict`")
    p.add_argument("--scene-file", required=True, help="scene file for history/ground truth")
    p.add_argument("--figsize", default="8,6", help="figure size inches, W,H")
    p.add_argument("--dpi", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot, outputs=lambda a: [a.out])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    outputs = args.outputs(args)
    try:
        return args.func(args)
    except pipeline.CheckpointMismatch as exc:
        print(f"error: incompatible checkpoints: {exc}", file=sys.stderr)
        code = EXIT_CKPT_MISMATCH
    except MissingSceneError as exc:
        print(f"error: scene not in manifest: {exc}", file=sys.stderr)
        code = EXIT_MISSING_SCENE
    except Exception as exc:  # noqa: BLE001 - top-level command boundary
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    for path in outputs:
        if path and os.path.exists(path):
            os.remove(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
