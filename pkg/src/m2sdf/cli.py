"""Experiment command line: synth, train-denoiser, fuse-train, fuse-apply,
evaluate, report.

Each command resolves its settings from an optional JSON config file plus
flag overrides (flags win), rejects unknown keys, and writes a run
manifest next to its outputs: resolved config, input hashes, output
list, wall-clock, and a host-independent determinism token (hash of the
seed-bearing config). Exit codes: 0 success, 2 usage/config error,
1 runtime failure. Errors go to stderr only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

import m2sdf
from m2sdf import denoisers, evalkit, fusion, imagecore, nnmodel, noisegen

__all__ = ["main", "UsageError"]

MANIFEST_NAME = "run_manifest.json"

# Path-valued keys stay out of the determinism token so it is the same
# on any host for the same experiment.
_PATH_KEYS = {"out", "corpus", "models", "input", "checkpoint", "fixtures", "fusion", "config"}


class UsageError(Exception):
    """Bad flags or config; maps to exit code 2."""


# ----------------------------------------------------------------------
# Config plumbing
# ----------------------------------------------------------------------

def _load_config_file(path: str | None, known: dict) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {p} must hold a JSON object")
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; known: {sorted(known)}")
    return data


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicitly passed flags."""
    config = dict(defaults)
    config.update(_load_config_file(getattr(args, "config", None), defaults))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def _token(command: str, config: dict) -> str:
    core = {k: v for k, v in config.items() if k not in _PATH_KEYS}
    blob = json.dumps({"command": command, "config": core}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path], outputs: list[str], t0: float) -> None:
    manifest = {
        "tool_version": m2sdf.__version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in sorted(inputs)},
        "outputs": sorted(outputs),
        "determinism_token": _token(command, config),
        "wall_clock_s": round(time.monotonic() - t0, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / MANIFEST_NAME
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _require(config: dict, key: str) -> object:
    if config.get(key) in (None, ""):
        raise UsageError(f"missing required setting --{key.replace('_', '-')}")
    return config[key]


def _noise_from_label(label: str, seed: int, allowed=None) -> noisegen.NoiseSpec:
    allowed = allowed or sorted(noisegen.GRID_LABELS) + ["speckle"]
    if label not in allowed:
        raise UsageError(f"invalid noise label {label!r}; choose one of {allowed}")
    return noisegen.parse_noise_label(label, seed)


def _resolve_handle(name: str, models_dir: str | None) -> denoisers.DenoiserHandle:
    """Build a handle from its name: classical by pattern, trained from sidecar."""
    if name.startswith("log:"):
        return denoisers.log_domain_wrap(_resolve_handle(name[4:], models_dir))
    if name == "identity":
        return denoisers.identity_handle()
    if name.startswith("median"):
        window = int(name[len("median"):])
        if window < 3 or window % 2 == 0:
            raise UsageError(f"median window must be odd and >= 3, got {name!r}")
        return denoisers.median_handle(radius=(window - 1) // 2)
    if name.startswith("gauss"):
        return denoisers.gaussian_handle(sigma=float(name[len("gauss"):]))
    if models_dir:
        sidecar = Path(models_dir) / f"{name}.json"
        if sidecar.exists():
            return denoisers.load_handle(sidecar)
    raise UsageError(f"cannot resolve denoiser {name!r} (no pattern match, no sidecar in {models_dir or '--models'})")


def _load_clean_corpus(config: dict) -> tuple[list[np.ndarray], Path]:
    corpus_dir = Path(str(_require(config, "corpus")))
    if not (corpus_dir / "manifest.json").exists():
        raise UsageError(f"corpus not found (no manifest.json in {corpus_dir})")
    images, _ = noisegen.load_corpus(corpus_dir)
    return images, corpus_dir / "manifest.json"


def _noisy_views(images: list[np.ndarray], noise: noisegen.NoiseSpec) -> list[np.ndarray]:
    return [noisegen.apply_noise(img, noise.with_seed(noise.seed + i)) for i, img in enumerate(images)]


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    defaults = {
        "count": None, "size": None, "height": 128, "width": 128, "objects": 3,
        "shadow": True, "background": 0.35, "seed": 0, "out": None,
    }
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    count = int(_require(config, "count"))
    if count < 1:
        raise UsageError(f"--count must be >= 1, got {count}")
    if config["size"] is not None:
        config["height"] = config["width"] = int(config["size"])
    out_dir = Path(str(_require(config, "out")))
    spec = noisegen.PhantomSpec(
        height=int(config["height"]), width=int(config["width"]),
        object_count=int(config["objects"]), shadow=bool(config["shadow"]),
        background_level=float(config["background"]), seed=int(config["seed"]),
    )
    manifest = noisegen.make_corpus(count, spec, out_dir)
    outputs = [e["file"] for e in manifest["images"]] + ["manifest.json"]
    _write_manifest(out_dir, "synth", config, [], outputs, t0)
    print(f"wrote {count} phantoms to {out_dir}")
    return 0


def cmd_train_denoiser(args: argparse.Namespace) -> int:
    defaults = {
        "method": None, "noise": None, "corpus": None, "out": None, "seed": 0,
        "steps": 2000, "batch_size": 8, "learning_rate": 1e-3,
        "gamma": 2.0, "lambda_vis": 1.0, "patch": 64,
    }
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    method = str(_require(config, "method"))
    if method not in ("n2n", "b2u"):
        raise UsageError(f"--method must be n2n or b2u, got {method!r}")
    label = str(_require(config, "noise"))
    noise = _noise_from_label(label, int(config["seed"]), allowed=sorted(noisegen.GRID_LABELS))
    clean, corpus_manifest = _load_clean_corpus(config)
    noisy = _noisy_views(clean, noise)
    opt = nnmodel.OptimizerConfig(
        learning_rate=float(config["learning_rate"]), kind="adam",
        batch_size=int(config["batch_size"]), steps=int(config["steps"]),
    )
    if method == "n2n":
        handle = denoisers.train_n2n(noisy, noise, gamma=float(config["gamma"]), opt=opt,
                                     seed=int(config["seed"]), patch_size=int(config["patch"]))
    else:
        handle = denoisers.train_b2u(noisy, noise, lambda_vis=float(config["lambda_vis"]), opt=opt,
                                     seed=int(config["seed"]), patch_size=int(config["patch"]))
    out_dir = Path(str(_require(config, "out")))
    denoisers.save_handle(handle, out_dir)
    _write_manifest(out_dir, "train-denoiser", config, [corpus_manifest],
                    [f"{handle.name}.ckpt", f"{handle.name}.json"], t0)
    print(f"trained {handle.name} -> {out_dir}")
    return 0


def _parse_denoiser_list(config: dict) -> list[str]:
    raw = str(_require(config, "denoisers"))
    names = [n.strip() for n in raw.split(",") if n.strip()]
    if not names:
        raise UsageError("--denoisers list is empty")
    return names


def cmd_fuse_train(args: argparse.Namespace) -> int:
    defaults = {
        "corpus": None, "denoisers": None, "models": None, "include_noisy": False,
        "noise": "g25", "out": None, "seed": 0, "steps": 3000, "batch_size": 8,
        "learning_rate": 1e-3, "k_target": 1, "patch": 64,
    }
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    names = _parse_denoiser_list(config)
    include_noisy = bool(config["include_noisy"])
    m = len(names) + (1 if include_noisy else 0)
    if m < 2:
        raise UsageError(f"need at least 2 frames to train (got {m}); add denoisers or --include-noisy")
    handles = [_resolve_handle(n, config["models"]) for n in names]
    noise = _noise_from_label(str(config["noise"]), int(config["seed"]))
    clean, corpus_manifest = _load_clean_corpus(config)
    noisy = _noisy_views(clean, noise)
    sequences = [
        fusion.build_sequence(noisy[i], handles, include_noisy=include_noisy, source_id=i)
        for i in range(len(noisy))
    ]
    fcfg = fusion.FusionConfig(
        m=m, k_target=int(config["k_target"]),
        opt=nnmodel.OptimizerConfig(learning_rate=float(config["learning_rate"]), kind="adam",
                                    batch_size=int(config["batch_size"]), steps=int(config["steps"])),
        shuffle_seed=int(config["seed"]), patch_size=int(config["patch"]),
    )
    model = fusion.train_m2sdf(sequences, fcfg)
    out_dir = Path(str(_require(config, "out")))
    out_dir.mkdir(parents=True, exist_ok=True)
    nnmodel.save_checkpoint(model, None, out_dir / "fusion.ckpt", step=fcfg.opt.steps)
    sidecar = {
        "frame_names": sequences[0].frame_names,
        "include_noisy": include_noisy,
        "m": m,
        "k_target": fcfg.k_target,
        "noise": str(config["noise"]),
        "seed": int(config["seed"]),
        "checkpoint": "fusion.ckpt",
    }
    (out_dir / "fusion.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "fuse-train", config, [corpus_manifest], ["fusion.ckpt", "fusion.json"], t0)
    print(f"trained M={m} fusion -> {out_dir}")
    return 0


def cmd_fuse_apply(args: argparse.Namespace) -> int:
    defaults = {"fusion": None, "models": None, "input": None, "out": None}
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    fusion_dir = Path(str(_require(config, "fusion")))
    sidecar_path = fusion_dir / "fusion.json" if fusion_dir.is_dir() else fusion_dir
    if not sidecar_path.exists():
        raise UsageError(f"no fusion sidecar at {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    model, _ = nnmodel.load_checkpoint(sidecar_path.parent / sidecar["checkpoint"])
    names = [n for n in sidecar["frame_names"] if n != "noisy"]
    handles = [_resolve_handle(n, config["models"]) for n in names]

    in_path = Path(str(_require(config, "input")))
    if not in_path.exists():
        raise UsageError(f"input not found: {in_path}")
    files = sorted(in_path.glob("*.png")) if in_path.is_dir() else [in_path]
    if not files:
        raise UsageError(f"no PNG inputs under {in_path}")
    out_dir = Path(str(_require(config, "out")))
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for f in files:
        noisy = imagecore.load_image(f)
        seq = fusion.build_sequence(noisy, handles, include_noisy=bool(sidecar["include_noisy"]))
        fused = fusion.fuse(model, seq, k_target=int(sidecar["k_target"]))
        name = f"fused_{f.stem}.png"
        imagecore.save_image(fused, out_dir / name)
        outputs.append(name)
    _write_manifest(out_dir, "fuse-apply", config, [sidecar_path] + files, outputs, t0)
    print(f"fused {len(files)} image(s) -> {out_dir}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    defaults = {
        "fixtures": None, "select": None, "denoisers": None, "models": None,
        "corpus": None, "noise": "g25", "seed": 0, "out": None, "format": "csv",
    }
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    fmt = str(config["format"])
    if fmt not in ("csv", "json"):
        raise UsageError(f"--format must be csv or json, got {fmt!r}")
    inputs: list[Path] = []

    if config["fixtures"]:
        fixture = Path(str(config["fixtures"]))
        if not fixture.exists():
            try:
                fixture = evalkit.fixture_path(str(config["fixtures"]))
            except FileNotFoundError as exc:
                raise UsageError(str(exc)) from exc
        rows = evalkit.load_fixture(fixture)
        inputs.append(fixture)
    elif config["denoisers"]:
        names = _parse_denoiser_list(config)
        handles = [_resolve_handle(n, config["models"]) for n in names]
        clean, corpus_manifest = _load_clean_corpus(config)
        inputs.append(corpus_manifest)
        noise = _noise_from_label(str(config["noise"]), int(config["seed"]))
        rows = evalkit.evaluate_table(handles, clean, noise)
    else:
        raise UsageError("evaluate needs --fixtures or --denoisers")

    if config["select"] is not None:
        try:
            selected = evalkit.select_denoisers(rows, evalkit.SelectionRule(min_improved=int(config["select"])))
        except ValueError as exc:
            raise UsageError(f"selection failed: {exc}") from exc
        for name in selected:
            print(name)

    out_dir = Path(str(_require(config, "out")))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_name = f"report.{fmt}"
    evalkit.emit_report(rows, out_dir / report_name, format=fmt)
    _write_manifest(out_dir, "evaluate", config, inputs, [report_name], t0)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    defaults = {"input": None, "out": None, "format": "csv"}
    config = _resolve(args, defaults)
    t0 = time.monotonic()
    in_path = Path(str(_require(config, "input")))
    if not in_path.exists():
        raise UsageError(f"report input not found: {in_path}")
    rows = evalkit.load_report(in_path)
    fmt = str(config["format"])
    if fmt not in ("csv", "json"):
        raise UsageError(f"--format must be csv or json, got {fmt!r}")
    out_dir = Path(str(_require(config, "out")))
    out_dir.mkdir(parents=True, exist_ok=True)
    report_name = f"report.{fmt}"
    evalkit.emit_report(rows, out_dir / report_name, format=fmt)
    _write_manifest(out_dir, "report", config, [in_path], [report_name], t0)
    print(f"wrote {out_dir / report_name}")
    return 0


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2sdf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"m2sdf {m2sdf.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a clean phantom corpus")
    _add_common(p)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="square canvas; sets height and width")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--shadow", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--background", type=float, default=None)
    p.set_defaults(run=cmd_synth)

    p = sub.add_parser("train-denoiser", help="train a self-supervised single-frame denoiser")
    _add_common(p)
    p.add_argument("--method", choices=["n2n", "b2u"], default=None)
    p.add_argument("--noise", default=None, help="noise label: g25, g5-50, p30, p5-50")
    p.add_argument("--corpus", default=None, help="clean corpus directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None, help="n2n regularizer weight")
    p.add_argument("--lambda-vis", dest="lambda_vis", type=float, default=None, help="b2u visible weight")
    p.add_argument("--patch", type=int, default=None)
    p.set_defaults(run=cmd_train_denoiser)

    p = sub.add_parser("fuse-train", help="train the multi-source fusion model")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--denoisers", default=None, help="comma list, e.g. median3,gauss1,log:gauss1")
    p.add_argument("--models", default=None, help="directory of trained denoiser sidecars")
    p.add_argument("--include-noisy", dest="include_noisy", action="store_true", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--k-target", dest="k_target", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.set_defaults(run=cmd_fuse_train)

    p = sub.add_parser("fuse-apply", help="denoise images with a trained fusion model")
    _add_common(p)
    p.add_argument("--fusion", default=None, help="fusion output directory or sidecar path")
    p.add_argument("--models", default=None)
    p.add_argument("--input", default=None, help="noisy PNG file or directory")
    p.set_defaults(run=cmd_fuse_apply)

    p = sub.add_parser("evaluate", help="score denoisers or run the selection policy on fixtures")
    _add_common(p)
    p.add_argument("--fixtures", default=None, help="fixture file or packaged name (e.g. sctd_yolox)")
    p.add_argument("--select", type=int, default=None, help="min improved metrics for selection")
    p.add_argument("--denoisers", default=None)
    p.add_argument("--models", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--noise", default=None)
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.set_defaults(run=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit a JSON report as csv or json")
    _add_common(p)
    p.add_argument("--input", default=None, help="JSON report file")
    p.add_argument("--format", choices=["csv", "json"], default=None)
    p.set_defaults(run=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (noisegen.PhantomError, nnmodel.TrainingError, nnmodel.CheckpointFormatError,
            nnmodel.CheckpointVersionError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
