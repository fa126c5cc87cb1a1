"""End-to-end helpers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .config import MODES, RunConfig
from .field import SdfFieldModel
from .mesh import TriangleMesh, chamfer, marching_cubes, normal_mae
from .report import plot_ablation, plot_loss_curves, write_table
from .scene import sdf_gradient
from .train import Trainer, rendered_normal_mae


def ground_truth_mesh(shape, resolution: int = 128) -> TriangleMesh:
    """Marching-cubes mesh of an analytic shape, with analytic-gradient normals."""
    return marching_cubes(shape.sdf, resolution, gradient=lambda x: (None, sdf_gradient(shape, x)))


def extract_mesh(model: SdfFieldModel, resolution: int = 128) -> TriangleMesh:
    return marching_cubes(model.sdf, resolution, gradient=model.sdf_and_gradient)


def train_model(dataset, config: RunConfig, out=None, threads: int = 1, callback=None):
    """Train from scratch; returns the trainer and its step records."""
    trainer = Trainer(dataset, config, threads=threads)
    records = trainer.fit(out, callback=callback)
    if out is not None:
        Path(out, "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        plot_loss_curves([r.__dict__ for r in records], Path(out) / "loss_curves.png",
                         title=f"mode={config.train.mode}")
    return trainer, records


def score_model(model, dataset, config: RunConfig, gt: TriangleMesh | None = None) -> dict:
    """Mesh and rendered-normal errors against ground truth.

    Rendered normals are always taken at the localized surface point, so every
    model is judged by the same renderer whatever it was trained with.
    """
    ev = config.eval
    gt = gt if gt is not None else ground_truth_mesh(dataset.shape, ev.resolution)
    pred = extract_mesh(model, ev.resolution)
    row = {"chamfer": float("inf"), "normal_mae_deg": float("nan"), "rendered_normal_mae_deg": float("nan")}
    if not pred.is_empty:
        row["chamfer"] = chamfer(pred, gt, ev.chamfer_samples, ev.seed)
        row["normal_mae_deg"] = normal_mae(pred, gt)
    row["rendered_normal_mae_deg"] = rendered_normal_mae(model, dataset, config.sampling, "localized")
    return row


def run_ablation(dataset, config: RunConfig, out=None, threads: int = 1, modes=MODES) -> list[dict]:
    """Train one model per normal-supervision mode with a shared seed and score each."""
    gt = ground_truth_mesh(dataset.shape, config.eval.resolution)
    rows = []
    for mode in modes:
        cfg = copy.deepcopy(config)
        cfg.train.mode = mode
        sub = Path(out) / mode if out is not None else None
        trainer, records = train_model(dataset, cfg, sub, threads)
        scores = score_model(trainer.model, dataset, cfg, gt)
        # error of the normals the mode was supervised through, for reference
        scores["training_normal_mae_deg"] = (
            rendered_normal_mae(trainer.model, dataset, cfg.sampling, "accumulated")
            if mode == "accumulated" else scores["rendered_normal_mae_deg"])
        rows.append({"mode": mode, "seed": cfg.train.seed, "steps": len(records), **scores,
                     "final_L_color": records[-1].L_color if records else float("nan")})
    if out is not None:
        write_table(rows, Path(out) / "ablation.tsv")
        plot_ablation(rows, Path(out) / "ablation.png")
    return rows
