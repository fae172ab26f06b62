"""Command-line entry point: ``dualerase <command> CONFIG``.

Exit codes: 0 success, 2 configuration error, 3 runtime/module error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import image_sha256, profile_attention, quantize_8bit, run_attack
from .config import RunConfig, bundled_path, dump_config, load_config
from .defenses import DefenseSpec
from .errors import ConfigError, DualEraseError, MissingArtifactError, NonFiniteLossError
from .images import load_image, load_view_grid, save_image, save_view_grid, to_tensor
from .manifest import RunManifest
from .masks import ForegroundMask, extract_foreground_mask, load_mask, save_mask
from .metrics import CHAMFER_DEFINITION, evaluate_views, load_point_cloud
from .toy import build_toy_backend, generate_views, load_weights, make_dataset, save_scenes, save_weights, train_toy

logger = logging.getLogger("dualerase")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


# -- shared plumbing ------------------------------------------------------------

def load_backend(cfg: RunConfig):
    if cfg.backend.weights:
        path = bundled_path(cfg.backend.weights)
        if not path.is_file():
            raise ConfigError("backend.weights", f"weights file {path} does not exist")
        backend = load_weights(path)
        trained = True
    else:
        logger.warning("backend.weights is not set; using untrained seeded toy weights")
        backend = build_toy_backend(cfg.backend.toy)
        trained = False
    info = {
        "kind": cfg.backend.kind,
        "identifier": backend.identifier,
        "weights_hash": backend.weights_hash(),
        "weights_path": cfg.backend.weights,
        "trained": trained,
        "n_v": backend.n_v,
        "n_d": backend.n_d,
        "latent_side": backend.latent_side,
        "flatten_order": backend.flatten_order,
        "noise_schedule": backend.schedule.describe(),
    }
    return backend, info


def _require_file(value: str | None, field: str) -> Path:
    if not value:
        raise ConfigError(field, "is required")
    path = bundled_path(value)
    if not path.is_file():
        raise ConfigError(field, f"file {path} does not exist")
    return path


def load_input(cfg: RunConfig) -> tuple[np.ndarray, ForegroundMask]:
    image = load_image(_require_file(cfg.input.image, "input.image"))
    if cfg.input.mask:
        mask = load_mask(_require_file(cfg.input.mask, "input.mask"))
        if mask.shape != image.shape[:2]:
            raise ConfigError("input.mask", f"mask size {mask.shape} differs from image size {image.shape[:2]}")
    else:
        mask = extract_foreground_mask(image, cfg.input.mask_policy, cfg.input.color_tolerance)
    return image, mask


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# -- commands -------------------------------------------------------------------

def cmd_attack(cfg: RunConfig) -> RunManifest:
    backend, backend_info = load_backend(cfg)
    image, mask = load_input(cfg)
    out = _output_dir(cfg)
    x = to_tensor(image, backend.dtype)
    manifest = RunManifest("attack", cfg.to_dict(), seeds={"attack": cfg.attack.seed}, backend=backend_info)
    manifest.input_image_sha256 = image_sha256(x)

    trace_path = out / "trace.jsonl"
    trace_extra = {"backend": backend_info["identifier"]}
    try:
        x_adv, trace = run_attack(backend, x, mask, cfg.attack)
    except NonFiniteLossError as exc:
        if exc.trace is not None:
            exc.trace.write(trace_path, manifest.input_image_sha256, trace_extra)
        raise

    adv_q = quantize_8bit(x_adv)
    adv_path = save_image(adv_q[0], out / "adversarial.png")
    mask_path = out / "mask.png"
    save_mask(mask, mask_path)
    trace.write(trace_path, manifest.input_image_sha256, trace_extra)

    reloaded = to_tensor(load_image(adv_path), torch.float64)
    # both images sit on the 8-bit grid; compare integer levels
    linf_levels = int(torch.round((reloaded - x.to(torch.float64)) * 255).abs().max())
    for name, path in (("adversarial", adv_path), ("mask", mask_path), ("trace", trace_path)):
        manifest.add_output(name, path, out)
    last = trace.records[-1]
    manifest.results = {
        "final_l_fe": last.l_fe,
        "final_l_ae": last.l_ae,
        "final_l_de": last.l_de,
        "final_t_f_mean": last.t_f_mean,
        "final_t_b_mean": last.t_b_mean,
        "linf_levels_quantized": linf_levels,
        "epochs": len(trace),
    }
    manifest.provenance = {"mask_source": mask.source.value, "reductions": trace.header()["reductions"]}
    manifest.complete()
    manifest.write(out)
    logger.info("attack done: L_inf %d/255, final L_DE %.5f", linf_levels, last.l_de)
    return manifest


def cmd_eval(cfg: RunConfig, defense: str | None = None) -> RunManifest:
    out = _output_dir(cfg)
    spec_text = defense or cfg.eval.defense
    spec = DefenseSpec.parse(spec_text) if spec_text else None
    if not cfg.eval.ground_truth:
        raise ConfigError("eval.ground_truth", "is required")
    gt = load_view_grid(bundled_path(cfg.eval.ground_truth))

    manifest = RunManifest("eval", cfg.to_dict(), seeds={"gen": cfg.gen.seed})
    if cfg.eval.input_image:
        backend, manifest.backend = load_backend(cfg)
        image = load_image(_require_file(cfg.eval.input_image, "eval.input_image"))
        x = to_tensor(image, backend.dtype)
        manifest.input_image_sha256 = image_sha256(x)
        if spec is not None:
            x = spec.apply(x)
        grid = generate_views(backend, x, cfg.gen.n_steps, cfg.gen.seed)
        paths = save_view_grid(grid, out / "generated")
        for p in paths:
            manifest.add_output(f"generated/{p.name}", p, out)
        generated = grid.to(torch.float64).numpy()
    elif cfg.eval.generated:
        if spec is not None:
            raise ConfigError("eval.defense", "defenses preprocess the input image; set eval.input_image")
        generated = load_view_grid(bundled_path(cfg.eval.generated))
        manifest.backend = {"kind": "precomputed", "generated": cfg.eval.generated}
    else:
        raise ConfigError("eval.generated", "either eval.generated or eval.input_image is required")

    clouds = None
    if cfg.eval.cloud_generated or cfg.eval.cloud_ground_truth:
        clouds = (
            load_point_cloud(_require_artifact(cfg.eval.cloud_generated, "eval.cloud_generated")),
            load_point_cloud(_require_artifact(cfg.eval.cloud_ground_truth, "eval.cloud_ground_truth")),
        )
    report = evaluate_views(generated, gt, clouds=clouds, workers=cfg.eval.workers)
    report_path = _write_json(out / "report.json", report.to_dict())
    manifest.add_output("report", report_path, out)
    manifest.results = {"ssim_mean": report.ssim_mean, "perceptual_mean": report.perceptual_mean, "chamfer": report.chamfer}
    manifest.provenance = {
        "defense": spec.to_dict() if spec else None,
        "perceptual_metric": report.perceptual_metric,
        "perceptual_surrogate": report.surrogate,
        "chamfer_definition": CHAMFER_DEFINITION,
    }
    manifest.complete()
    manifest.write(out)
    logger.info("eval: ssim_mean %.4f perceptual_mean %.4f", report.ssim_mean, report.perceptual_mean)
    return manifest


def _require_artifact(value: str | None, field: str) -> Path:
    if not value:
        raise ConfigError(field, "is required when point clouds are evaluated")
    path = Path(value)
    if not path.is_file():
        raise MissingArtifactError(f"{field}: {path} does not exist")
    return path


def cmd_profile_attention(cfg: RunConfig) -> RunManifest:
    backend, backend_info = load_backend(cfg)
    image, mask = load_input(cfg)
    out = _output_dir(cfg)
    x = to_tensor(image, backend.dtype)
    pooled, samples = profile_attention(backend, x, mask, cfg.profile.n_timesteps, cfg.profile.seed)

    rows = ["sample\tt\tlayer_id\tkind\tD\tt_f_mean\tt_b_mean"]
    for i, (t, stats) in enumerate(samples):
        rows += [f"{i}\t{t}\t{rec}" for rec in stats.to_records()]
    rows += [f"pooled\t-\t{rec}" for rec in pooled.to_records()]
    tsv = out / "attention_stats.tsv"
    tsv.write_text("\n".join(rows) + "\n")
    summary = {
        "pooled": {"t_f_mean": pooled.t_f_mean, "t_b_mean": pooled.t_b_mean},
        "per_sample": [{"t": t, "t_f_mean": s.t_f_mean, "t_b_mean": s.t_b_mean} for t, s in samples],
        "per_layer_pooled": [
            {"layer_id": s.layer_id, "kind": s.kind.value, "D": s.D, "t_f_mean": s.t_f_mean, "t_b_mean": s.t_b_mean}
            for s in pooled.per_layer
        ],
    }
    summary_path = _write_json(out / "attention_summary.json", summary)

    manifest = RunManifest("profile-attention", cfg.to_dict(), seeds={"profile": cfg.profile.seed}, backend=backend_info)
    manifest.input_image_sha256 = image_sha256(x)
    manifest.add_output("stats", tsv, out)
    manifest.add_output("summary", summary_path, out)
    manifest.results = summary["pooled"]
    manifest.provenance = {"mask_source": mask.source.value}
    manifest.complete()
    manifest.write(out)
    logger.info("profile: t_f_mean %.6f t_b_mean %.6f", pooled.t_f_mean, pooled.t_b_mean)
    return manifest


def cmd_train_toy(cfg: RunConfig) -> RunManifest:
    tc = cfg.train
    out = _output_dir(cfg)
    backend = build_toy_backend(cfg.backend.toy)
    dataset = make_dataset(tc.n_scenes, tc.dataset_seed, backend.n_v)
    backend, curve = train_toy(backend, dataset, tc.epochs, tc.lr, tc.seed, tc.batch_size)

    manifest = RunManifest(
        "train-toy", cfg.to_dict(), seeds={"train": tc.seed, "dataset": tc.dataset_seed, "init": cfg.backend.toy.seed}
    )
    weights = out / "weights.pt"
    save_weights(backend, weights)
    curve_path = out / "loss_curve.txt"
    curve_path.write_text("".join(f"{i}\t{v:.9g}\n" for i, v in enumerate(curve)))
    manifest.add_output("weights", weights, out)
    manifest.add_output("loss_curve", curve_path, out)
    if tc.save_dataset:
        index = save_scenes(dataset, out / "dataset", backend.config.image_side)
        manifest.add_output("dataset_index", index, out)
        for p in sorted((out / "dataset").glob("*.png")):
            manifest.add_output(f"dataset/{p.name}", p, out)
    manifest.backend = {"kind": "toy", "identifier": backend.identifier, "weights_hash": backend.weights_hash()}
    manifest.results = {
        "initial_loss": curve[0] if curve else None,
        "final_loss": curve[-1] if curve else None,
        "loss_ratio": curve[-1] / curve[0] if curve else None,
    }
    manifest.complete()
    manifest.write(out)
    return manifest


def cmd_gen_views(cfg: RunConfig) -> RunManifest:
    backend, backend_info = load_backend(cfg)
    image = load_image(_require_file(cfg.input.image, "input.image"))
    out = _output_dir(cfg)
    x = to_tensor(image, backend.dtype)
    grid = generate_views(backend, x, cfg.gen.n_steps, cfg.gen.seed)
    manifest = RunManifest("gen-views", cfg.to_dict(), seeds={"gen": cfg.gen.seed}, backend=backend_info)
    manifest.input_image_sha256 = image_sha256(x)
    for p in save_view_grid(grid, out / "generated"):
        manifest.add_output(f"generated/{p.name}", p, out)
    manifest.complete()
    manifest.write(out)
    return manifest


COMMANDS = {
    "attack": cmd_attack,
    "eval": cmd_eval,
    "profile-attention": cmd_profile_attention,
    "train-toy": cmd_train_toy,
    "gen-views": cmd_gen_views,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualerase", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML config file or a run manifest")
        if name == "eval":
            p.add_argument("--defense", help="input preprocessing, e.g. squeeze:bits=4 or smooth:kernel=3")
    show = sub.add_parser("show-config", help="print the fully resolved config")
    show.add_argument("config", nargs="?")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "show-config":
            cfg = load_config(args.config) if args.config else RunConfig()
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "eval":
            cmd_eval(cfg, args.defense)
        else:
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DualEraseError, OSError, RuntimeError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
