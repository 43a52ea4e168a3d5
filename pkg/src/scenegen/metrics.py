"""Reconstruction metrics: occupancy IOU, Chamfer distance and F-score."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

import torch

from .chunks import eval_query_split, normalize_coords
from .diffusion import repaint_calls
from .vae import ChunkVAE, decode_chunk
from .voxel import sample_surface_points

DEFAULT_SURFACE_POINTS = 10_000


def iou(pred: np.ndarray, target: np.ndarray) -> float:
    """Intersection over union of two boolean arrays; 1.0 when both are empty."""
    pred, target = np.asarray(pred, dtype=bool), np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For every point in ``a`` the Euclidean distance to its nearest point in ``b``."""
    if len(b) == 0:
        return np.full(len(a), np.inf)
    return cKDTree(b).query(a, k=1)[0]


def nearest_distances_brute(a: np.ndarray, b: np.ndarray, block: int = 2048) -> np.ndarray:
    out = np.empty(len(a))
    for s in range(0, len(a), block):
        d = np.linalg.norm(a[s:s + block, None, :] - b[None, :, :], axis=-1)
        out[s:s + block] = d.min(axis=1)
    return out


def chamfer_f(pc_a: np.ndarray, pc_b: np.ndarray, threshold: float, brute: bool = False) -> tuple[float, float]:
    """Unsquared Chamfer distance (sum of both directed means) and F-score at an inclusive threshold."""
    pc_a, pc_b = np.asarray(pc_a, dtype=np.float64), np.asarray(pc_b, dtype=np.float64)
    if len(pc_a) == 0 or len(pc_b) == 0:
        raise ValueError("chamfer_f needs two non-empty point clouds")
    nn = nearest_distances_brute if brute else nearest_distances
    d_ab, d_ba = nn(pc_a, pc_b), nn(pc_b, pc_a)
    precision = float(np.mean(d_ab <= threshold))
    recall = float(np.mean(d_ba <= threshold))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(d_ab.mean() + d_ba.mean()), f


@dataclass
class MetricReport:
    """Aggregate reconstruction metrics over a set of chunks; serialized as one JSON document."""

    iou: float = float("nan")
    cd: float = float("nan")
    f_score: float = float("nan")
    height_mae: float = float("nan")
    threshold: float = float("nan")
    n_points: int = 0
    n_queries: int = 0
    per_chunk: list = field(default_factory=list)
    header: dict = field(default_factory=lambda: {
        "cd": "unsquared, sum of directed means, normalized chunk coordinates",
        "f_score": "inclusive threshold",
        "fpd": "unavailable", "kpd": "unavailable"})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    @classmethod
    def from_chunks(cls, per_chunk: list[dict], threshold: float, n_points: int, n_queries: int) -> "MetricReport":
        def mean(key):
            v = [c[key] for c in per_chunk if key in c and np.isfinite(c[key])]
            return float(np.mean(v)) if v else float("nan")
        return cls(mean("iou"), mean("cd"), mean("f_score"), mean("height_mae"), threshold, n_points, n_queries,
                   per_chunk)


def nfe_report(trace, method: str, steps: int, resample_r: int = 5, gen_seconds: float | None = None,
               decode_seconds: float | None = None) -> dict:
    """Denoiser-call counts implied by ``trace`` for ``method`` next to the counts actually recorded."""
    per_quad = steps if method == "explicit" else repaint_calls(steps, resample_r)
    return {"method": method, "quads": len(trace), "steps": steps, "calls_per_quad": per_quad,
            "expected_calls": per_quad * len(trace), "recorded_calls": trace.calls,
            "emb_gen_seconds": gen_seconds, "occ_decode_seconds": decode_seconds}


@torch.no_grad()
def evaluate_vae(model: ChunkVAE, data, seed: int = 0, n_queries: int = 2000,
                 n_points: int = DEFAULT_SURFACE_POINTS, surface: bool = True) -> MetricReport:
    """Reconstruction metrics over every chunk of a prepared dataset (see ``training.ChunkData``).

    IOU uses the stratified query split; CD and F-score compare surface
    samples of the ground-truth mesh and the mesh decoded with the
    predicted height, in normalized chunk coordinates.
    """
    rng = np.random.default_rng(seed)
    s = data.chunk_size
    threshold = 2.0 / s
    model.eval()
    rows = []
    for n, item in enumerate(data.items):
        pts = torch.as_tensor(data.points(n, model.cfg.n_points, rng), dtype=torch.float32)[None]
        _, mean, _ = model.encode(pts, sample=False)
        qb = eval_query_split(item.chunk, rng, n_queries)
        logits = model(mean, torch.as_tensor(qb.coords_norm, dtype=torch.float32)[None])[0].numpy()
        h_hat = float(model.predict_height(mean)[0])
        row = {"index": n, "origin": list(item.chunk.origin), "h_vox": item.chunk.h_vox,
               "iou": iou(logits > 0, qb.occ_labels),
               "height_mae": abs(s * (h_hat + 1) / 2 - item.chunk.h_vox)}
        if surface:
            _, mesh, _ = decode_chunk(model, mean[0], s)
            if len(mesh.triangles) and len(item.mesh.triangles):
                a = normalize_coords(sample_surface_points(item.mesh, n_points, rng), (s,) * 3)
                b = normalize_coords(sample_surface_points(mesh, n_points, rng), (s,) * 3)
                row["cd"], row["f_score"] = chamfer_f(b, a, threshold)
            else:
                row["cd"], row["f_score"] = float("inf"), 0.0
        rows.append(row)
    return MetricReport.from_chunks(rows, threshold, n_points if surface else 0, n_queries)
