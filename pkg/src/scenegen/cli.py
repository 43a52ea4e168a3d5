"""Command-line entry point: ``scenegen <command> [--config file.json] [flags]``.

Every command resolves its settings as defaults < JSON config < flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import formats
from .chunks import DEFAULT_CHUNK
from .diffusion import Denoiser, DenoiserConfig, build_schedule, train_diffusion
from .generator import (GenerationTrace, QuadSampler, SceneLatentGrid, antidiagonal_generate, decode_scene,
                        raster_generate)
from .metrics import evaluate_vae, nfe_report
from .toy import DEFAULT_DIMS, STYLES, SceneSpec, build_dataset, synth_scene
from .training import ChunkData, encode_chunks, train_vae
from .vae import ChunkVAE, VaeConfig
from .voxel import WatertightError, detect_ground_level, fix_ground, flood_fill_solid, voxelize_mesh

log = logging.getLogger("scenegen")

BUILDERS = {
    "vae": lambda cfg: ChunkVAE(VaeConfig.from_dict(cfg)),
    "denoiser": lambda cfg: Denoiser(DenoiserConfig.from_dict(cfg)),
}

DEFAULTS = {
    "synth": {"style": "blocks", "seed": 0, "dims": None, "chunk": DEFAULT_CHUNK, "out": "scene.nuiv", "spec": None},
    "preprocess": {"input": None, "out": "scene.nuiv", "resolution": 256, "ground_level": None,
                   "check_watertight": True},
    "sample-chunks": {"scenes": [], "out": "dataset", "quads_per_scene": 200, "chunk": DEFAULT_CHUNK,
                      "val_fraction": 0.05},
    "train-vae": {"data": "dataset", "out": "vae.ckpt", "steps": None, "epochs": None, "batch_size": 16,
                  "lr": 1e-3, "seed": 0, "n_queries": 4096, "time_limit": None, "head": None,
                  "bf16": False, "model": {}},
    "encode-latents": {"data": "dataset", "vae": "vae.ckpt", "out": "latents.bin", "split": "train", "seed": 0},
    "train-diffusion": {"latents": "latents.bin", "out": "diffusion.ckpt", "steps": None, "epochs": None,
                        "batch_size": 64, "lr": 1e-3, "seed": 0, "model": {}},
    "generate": {"diffusion": "diffusion.ckpt", "vae": None, "rows": 4, "cols": 4, "seed": 0,
                 "method": "explicit", "resample_r": 5, "steps": 50, "parallel": None,
                 "out": "scene.nuig", "trace": None, "obj": None, "resolution": None},
    "decode": {"vae": "vae.ckpt", "grid": "scene.nuig", "out": "scene.obj", "voxels": None, "resolution": None},
    "eval": {"vae": "vae.ckpt", "data": "dataset", "split": "val", "seed": 0, "n_queries": 2000,
             "n_points": 10000, "out": None},
    "info": {"path": None},
}


class CliError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with settings for this command")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenegen", description="Chunked 3D scene generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("synth", help="generate a procedural toy scene")
    p.add_argument("--style", choices=STYLES, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--dims", type=int, nargs=3, default=S)
    p.add_argument("--chunk", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--spec", default=S, help="read seed/style/dims from a scene spec file")

    p = sub.add_parser("preprocess", help="voxelize a mesh or clean a voxel file")
    p.add_argument("input", nargs="?", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--resolution", type=int, default=S)
    p.add_argument("--ground-level", type=int, default=S)
    p.add_argument("--no-watertight-check", dest="check_watertight", action="store_false", default=S)

    p = sub.add_parser("sample-chunks", help="sample quad-chunks into a dataset directory")
    p.add_argument("scenes", nargs="*", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--quads-per-scene", type=int, default=S)
    p.add_argument("--chunk", type=int, default=S)
    p.add_argument("--val-fraction", type=float, default=S)

    p = sub.add_parser("train-vae", help="train the chunk VAE")
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--epochs", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-queries", type=int, default=S)
    p.add_argument("--time-limit", type=float, default=S)
    p.add_argument("--head", choices=("vecset", "triplane"), default=S)
    p.add_argument("--bf16", action="store_true", default=S, help="bfloat16 autocast for the forward pass")

    p = sub.add_parser("encode-latents", help="encode dataset quads into a latent file")
    p.add_argument("--data", default=S)
    p.add_argument("--vae", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--split", choices=("train", "val", "all"), default=S)
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("train-diffusion", help="train the outpainting denoiser on quad latents")
    p.add_argument("--latents", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--epochs", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("generate", help="outpaint a rows x cols latent grid")
    p.add_argument("--diffusion", default=S)
    p.add_argument("--vae", default=S, help="also decode the grid to an OBJ mesh")
    p.add_argument("--rows", type=int, default=S)
    p.add_argument("--cols", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--method", choices=("explicit", "repaint"), default=S)
    p.add_argument("--resample-r", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--parallel", type=int, default=S, help="worker threads (default: logical cores)")
    p.add_argument("--out", default=S)
    p.add_argument("--trace", default=S)
    p.add_argument("--obj", default=S)
    p.add_argument("--resolution", type=int, default=S)

    p = sub.add_parser("decode", help="decode a latent grid into a mesh")
    p.add_argument("--vae", default=S)
    p.add_argument("--grid", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--voxels", default=S, help="also write the decoded occupancy as NUIV")
    p.add_argument("--resolution", type=int, default=S)

    p = sub.add_parser("eval", help="reconstruction metrics of a VAE on a dataset split")
    p.add_argument("--vae", default=S)
    p.add_argument("--data", default=S)
    p.add_argument("--split", choices=("train", "val", "all"), default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--n-queries", type=int, default=S)
    p.add_argument("--n-points", type=int, default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("info", help="describe a file written by this package")
    p.add_argument("path", default=S)

    for p in sub.choices.values():
        _add_common(p)
    return parser


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(settings)
        if unknown:
            raise CliError(f"unknown settings for {command}: {sorted(unknown)}")
        settings.update(file_cfg)
    settings.update(flags)
    return settings


def _steps(s: dict, n_items: int) -> int:
    if s["steps"] is not None:
        return int(s["steps"])
    epochs = s["epochs"] if s["epochs"] is not None else 1
    return max(1, math.ceil(epochs * n_items / s["batch_size"]))


def _split(s: str | None):
    return None if s == "all" else s


def _load(path, kind):
    if not path or not Path(path).exists():
        raise CliError(f"missing {kind} checkpoint {path!r}")
    module, meta = formats.load_module(path, {kind: BUILDERS[kind]})
    return module, meta


def cmd_synth(s):
    if s["spec"]:
        spec = SceneSpec.load(s["spec"])
    else:
        dims = tuple(s["dims"]) if s["dims"] else DEFAULT_DIMS[s["style"]]
        spec = SceneSpec(int(s["seed"]), s["style"], dims, int(s["chunk"]))
    grid = synth_scene(spec.seed, spec.style, spec.dims, spec.chunk)
    formats.write_nuiv(s["out"], grid)
    Path(s["out"]).with_suffix(".json").write_text(spec.to_json())
    print(f"wrote {s['out']} dims {grid.dims} occupied {grid.count()}")


def cmd_preprocess(s):
    src = s["input"]
    if not src or not Path(src).exists():
        raise CliError(f"missing input {src!r}")
    if formats.sniff(src) == b"NUIV":
        grid = formats.read_nuiv(src)
    else:
        mesh = formats.read_obj(src)
        grid = voxelize_mesh(mesh, int(s["resolution"]), check_watertight=bool(s["check_watertight"]))
    grid = flood_fill_solid(grid)
    level = s["ground_level"] if s["ground_level"] is not None else detect_ground_level(grid)
    grid = fix_ground(grid, int(level))
    formats.write_nuiv(s["out"], grid)
    print(f"wrote {s['out']} dims {grid.dims} ground level {level}")


def cmd_sample_chunks(s):
    if not s["scenes"]:
        raise CliError("sample-chunks needs at least one scene file")
    scenes = [formats.read_nuiv(p) for p in s["scenes"]]
    quads = build_dataset(scenes, int(s["quads_per_scene"]), s["out"], int(s["chunk"]),
                          float(s["val_fraction"]), meta={"scenes": [str(p) for p in s["scenes"]]})
    idx = formats.dataset_index(s["out"])
    print(f"wrote {len(quads)} quads to {s['out']} ({idx['split'].count('val')} validation)")


def _chunk_data(path, split):
    idx = formats.dataset_index(path)
    quads = formats.read_dataset(path, split)
    if not quads:
        raise CliError(f"dataset {path} has no {split or 'any'} quads")
    return quads, ChunkData.from_quads(quads, idx["chunk"])


def cmd_train_vae(s):
    torch.manual_seed(int(s["seed"]))
    _, data = _chunk_data(s["data"], "train")
    model_cfg = dict(s["model"])
    if s.get("head"):
        model_cfg["head"] = s["head"]
    model_cfg["chunk"] = data.chunk_size
    model = ChunkVAE(VaeConfig.from_dict(model_cfg))
    steps = _steps(s, len(data))
    hist = train_vae(model, data, steps, int(s["batch_size"]), float(s["lr"]), int(s["n_queries"]),
                     seed=int(s["seed"]), time_limit=s["time_limit"], warmup=min(100, steps),
                     bf16=bool(s["bf16"]))
    formats.save_module(s["out"], model, "vae", model.cfg.to_dict(), {"steps": steps})
    print(f"trained {steps} steps, final loss {hist[-1]['loss']:.4f}; wrote {s['out']}")


def cmd_encode_latents(s):
    model, _ = _load(s["vae"], "vae")
    _, data = _chunk_data(s["data"], _split(s["split"]))
    z = encode_chunks(model, data, seed=int(s["seed"]))
    formats.write_latents(s["out"], z)
    print(f"wrote {len(z) // 4} quads ({z.shape[0]} chunk latents) to {s['out']}")


def cmd_train_diffusion(s):
    torch.manual_seed(int(s["seed"]))
    z = formats.read_latents(s["latents"])
    if len(z) % 4:
        raise CliError(f"latent file holds {len(z)} chunks, not a whole number of quads")
    quads = torch.as_tensor(z.reshape(-1, 4, *z.shape[1:]))
    cfg = DenoiserConfig.from_dict({**s["model"], "latents": z.shape[1], "channels": z.shape[2]})
    den = Denoiser(cfg)
    steps = _steps(s, len(quads))
    hist = train_diffusion(den, quads, steps, int(s["batch_size"]), float(s["lr"]), seed=int(s["seed"]))
    formats.save_module(s["out"], den, "denoiser", cfg.to_dict(), {"steps": steps})
    print(f"trained {steps} steps, final loss {hist[-1]['loss']:.4f}; wrote {s['out']}")


def _write_scene(vae, cells, obj_path, voxels_path, resolution):
    grid = SceneLatentGrid(cells, np.ones(cells.shape[:2], dtype=bool))
    t0 = time.perf_counter()
    scene = decode_scene(vae, grid, resolution)
    formats.write_obj(obj_path, scene.mesh)
    if voxels_path:
        formats.write_nuiv(voxels_path, scene.grid)
    return scene, time.perf_counter() - t0


def cmd_generate(s):
    den, _ = _load(s["diffusion"], "denoiser")
    schedule = build_schedule(den.cfg.T, den.cfg.schedule)
    sampler = QuadSampler(den, schedule, int(s["steps"]), s["method"], int(s["resample_r"]))
    workers = int(s["parallel"]) if s["parallel"] else (os.cpu_count() or 1)
    rows, cols, seed = int(s["rows"]), int(s["cols"]), int(s["seed"])
    t0 = time.perf_counter()
    if workers > 1:
        grid, trace = antidiagonal_generate(rows, cols, sampler, seed, workers)
    else:
        grid, trace = raster_generate(rows, cols, sampler, seed)
    gen_time = time.perf_counter() - t0
    formats.write_latent_grid(s["out"], grid.cells)
    trace_path = s["trace"] or str(Path(s["out"]).with_suffix(".trace"))
    Path(trace_path).write_text(trace.dumps())
    decode_time = None
    obj = None
    if s["vae"]:
        vae, _ = _load(s["vae"], "vae")
        obj = s["obj"] or str(Path(s["out"]).with_suffix(".obj"))
        _, decode_time = _write_scene(vae, grid.cells, obj, None, s["resolution"])
    report = nfe_report(trace, s["method"], int(s["steps"]), int(s["resample_r"]), gen_time, decode_time)
    print(json.dumps(report))
    print(f"wrote {s['out']} and {trace_path}" + (f" and {obj}" if obj else ""))


def cmd_decode(s):
    vae, _ = _load(s["vae"], "vae")
    cells = formats.read_latent_grid(s["grid"])
    if cells.shape[2:] != (vae.cfg.latents, vae.cfg.channels):
        raise CliError(f"latent grid cells {cells.shape[2:]} do not match the VAE ({vae.cfg.latents}, "
                       f"{vae.cfg.channels})")
    scene, dt = _write_scene(vae, cells, s["out"], s["voxels"], s["resolution"])
    print(f"wrote {s['out']} ({len(scene.mesh.triangles)} triangles) in {dt:.1f}s")


def cmd_eval(s):
    vae, _ = _load(s["vae"], "vae")
    _, data = _chunk_data(s["data"], _split(s["split"]))
    report = evaluate_vae(vae, data, int(s["seed"]), int(s["n_queries"]), int(s["n_points"]))
    text = report.to_json()
    if s["out"]:
        Path(s["out"]).write_text(text)
    print(json.dumps({"iou": report.iou, "cd": report.cd, "f_score": report.f_score,
                      "height_mae": report.height_mae, "chunks": len(report.per_chunk)}))


def describe(path) -> dict:
    p = Path(path)
    if p.is_dir():
        idx = formats.dataset_index(p)
        return {"type": "dataset", "quads": idx["count"], "chunk": idx["chunk"],
                "train": idx["split"].count("train"), "val": idx["split"].count("val")}
    magic = formats.sniff(p)
    if magic == b"NUIV":
        return {"type": "voxels", "dims": list(formats.nuiv_dims(p))}
    if magic == b"NUIL":
        z = formats.read_latents(p)
        return {"type": "latents", "count": z.shape[0], "V": z.shape[1], "c": z.shape[2]}
    if magic == b"NUIG":
        g = formats.read_latent_grid(p)
        return {"type": "latent-grid", "rows": g.shape[0], "cols": g.shape[1], "V": g.shape[2], "c": g.shape[3]}
    if magic == b"NUIC":
        tensors, meta = formats.decode_checkpoint(p.read_bytes())
        return {"type": "checkpoint", "kind": meta.get("kind"), "config": meta.get("config"),
                "tensors": len(tensors), "parameters": int(sum(t.numel() for t in tensors.values()))}
    text = p.read_text(errors="replace")
    if p.suffix == ".obj":
        return {"type": "obj", "vertices": text.count("\nv ") + text.startswith("v "),
                "faces": text.count("\nf ") + text.startswith("f ")}
    try:
        trace = GenerationTrace.loads(text)
        return {"type": "trace", "quads": len(trace), "configs": {k.value: v for k, v in trace.counts().items()}}
    except (ValueError, KeyError):
        raise CliError(f"unrecognized file {path}")


def cmd_info(s):
    if not s["path"] or not Path(s["path"]).exists():
        raise CliError(f"no such file {s['path']!r}")
    print(json.dumps(describe(s["path"])))


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "sample-chunks": cmd_sample_chunks,
    "train-vae": cmd_train_vae, "encode-latents": cmd_encode_latents, "train-diffusion": cmd_train_diffusion,
    "generate": cmd_generate, "decode": cmd_decode, "eval": cmd_eval, "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args.command, args)
        COMMANDS[args.command](settings)
    except (CliError, formats.FormatError, WatertightError, ValueError, RuntimeError, OSError) as e:
        print(f"scenegen {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
