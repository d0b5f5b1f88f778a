"""Command-line pipeline and the bit-exact container file format.

Every array is stored as a pair of files: ``<path>.json`` (manifest) and
``<path>.bin`` (raw little-endian blob, row-major).  Complex data is
interleaved (real, imag) float32 pairs.  Every subcommand writes a
deterministic provenance JSON next to its outputs so reruns are
byte-identical and replayable.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DivergenceError, FormatError, MriSdeError
from .grid import Rng
from .measurement import (
    MultiCoilKspace,
    SamplingMask,
    SensitivityMaps,
    adjoint,
    forward,
    make_mask,
    normalize_sensitivities,
    shepp_logan,
    simulate_sensitivities,
    zero_filled_ssos,
)
from .metrics import psnr, ssim
from .sampler import (
    SamplerConfig,
    ensemble,
    recon_ccdf,
    recon_complex,
    recon_hybrid,
    recon_real,
    recon_ssos,
)
from .schedule import NoiseSchedule
from .score import (
    AnalyticGaussianScore,
    AnalyticGmmScore,
    ConvDenoiser,
    LearnedScore,
    TrainConfig,
    train_dsm,
)

_DTYPES = {"c64": np.complex64, "f32": np.float32, "u8": np.uint8}
_DTYPE_SIZE = {"c64": 8, "f32": 4, "u8": 1}


# ---------------------------------------------------------------------------
# container format


def save_array(path, data, dtype: str, role: str, extra: dict | None = None):
    """Write ``<path>.json`` + ``<path>.bin`` for an array of the given dtype."""
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}", field="dtype")
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(data).astype(_DTYPES[dtype]))
    blob = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    manifest = {
        "dtype": dtype,
        "shape": list(arr.shape),
        "layout": "row-major",
        "byte_order": "little",
        "role": role,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(path.suffix + ".bin").write_bytes(blob)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def load_array(path):
    """Read a manifest/blob pair; returns (array, manifest)."""
    path = Path(path)
    man_path = path.with_suffix(path.suffix + ".json")
    bin_path = path.with_suffix(path.suffix + ".bin")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed manifest {man_path}: {e}", field="json") from e
    for key in ("dtype", "shape", "layout", "byte_order"):
        if key not in manifest:
            raise FormatError(f"manifest missing {key!r}", field=key)
    dtype = manifest["dtype"]
    if dtype not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}", field="dtype")
    shape = tuple(int(s) for s in manifest["shape"])
    expected = int(np.prod(shape)) * _DTYPE_SIZE[dtype]
    blob = bin_path.read_bytes()
    if len(blob) != expected:
        raise FormatError(
            f"{bin_path}: expected {expected} bytes for shape {shape}, got {len(blob)}",
            field="shape",
        )
    arr = np.frombuffer(blob, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    return arr.reshape(shape).copy(), manifest


def save_image(path, image, role: str = "image", extra: dict | None = None):
    """Persist a complex (H, W) image as interleaved float32 pairs."""
    save_array(path, np.asarray(image, dtype=np.complex64), "c64", role, extra)


def load_image(path):
    arr, manifest = load_array(path)
    if manifest["dtype"] != "c64":
        raise FormatError(f"expected c64 image, got {manifest['dtype']}", field="dtype")
    return arr.astype(np.complex128), manifest


def save_mask(path, mask: SamplingMask, extra: dict | None = None):
    info = {
        "kind": mask.kind,
        "requested_accel": mask.requested_accel,
        "acs_fraction": mask.acs_fraction,
    }
    info.update(extra or {})
    save_array(path, mask.keep.astype(np.uint8), "u8", "sampling_mask", info)


def load_mask(path) -> SamplingMask:
    arr, manifest = load_array(path)
    extra = manifest.get("extra", {})
    return SamplingMask(
        arr.astype(bool),
        extra.get("kind", "full"),
        float(extra.get("requested_accel", 1.0)),
        float(extra.get("acs_fraction", 0.0)),
    )


def save_maps(path, maps: SensitivityMaps, extra: dict | None = None):
    info = {"coils": maps.coils}
    info.update(extra or {})
    save_array(path, maps.maps.astype(np.complex64), "c64", "sensitivity_maps", info)


def load_maps(path) -> SensitivityMaps:
    arr, _manifest = load_array(path)
    if arr.ndim != 3:
        raise FormatError("sensitivity maps must be a (c, H, W) stack", field="shape")
    return normalize_sensitivities(SensitivityMaps(arr.astype(np.complex128)))


def save_kspace(path, ksp: MultiCoilKspace, extra: dict | None = None):
    info = {"coils": ksp.coils}
    info.update(extra or {})
    save_array(path, ksp.data.astype(np.complex64), "c64", "kspace", info)


def load_kspace(path, mask: SamplingMask) -> MultiCoilKspace:
    arr, _manifest = load_array(path)
    if arr.ndim == 2:
        arr = arr[None]
    return MultiCoilKspace(arr.astype(np.complex128) * mask.keep, mask)


def save_model(path, model: LearnedScore, cfg: TrainConfig):
    """Model container: JSON manifest of layer shapes + one float32 blob."""
    net = model.net
    order = sorted(net.params)
    blob = np.concatenate([net.params[k].ravel() for k in order]).astype(np.float32)
    extra = {
        "layers": [{"name": k, "shape": list(net.params[k].shape)} for k in order],
        "sigma_min": net.sigma_min,
        "sigma_max": net.sigma_max,
        "train_config": asdict(cfg),
    }
    save_array(path, blob, "f32", "score_model", extra)


def load_model(path) -> LearnedScore:
    blob, manifest = load_array(path)
    extra = manifest.get("extra", {})
    try:
        layers = extra["layers"]
        sigma_min = extra["sigma_min"]
        sigma_max = extra["sigma_max"]
    except KeyError as e:
        raise FormatError(f"model manifest missing {e}", field=str(e)) from e
    params = {}
    offset = 0
    for layer in layers:
        shape = tuple(layer["shape"])
        size = int(np.prod(shape))
        params[layer["name"]] = blob[offset:offset + size].astype(float).reshape(shape)
        offset += size
    if offset != blob.size:
        raise FormatError("parameter blob length mismatch", field="layers")
    return LearnedScore(ConvDenoiser(params, sigma_min, sigma_max))


# ---------------------------------------------------------------------------
# run configuration and provenance


def run_config_dict(args, sched: NoiseSchedule, cfg: SamplerConfig,
                    train_cfg: TrainConfig | None = None) -> dict:
    """Every configuration key spelled out explicitly for provenance."""
    doc = {
        "schedule": asdict(sched),
        "sampler": asdict(cfg),
        "paths": {
            k: getattr(args, k, None)
            for k in ("out", "image", "mask", "sens", "kspace", "model", "data", "ref", "test")
            if getattr(args, k, None) is not None
        },
    }
    if train_cfg is not None:
        doc["train"] = asdict(train_cfg)
    return doc


def write_provenance(out_path, args, config: dict):
    doc = {
        "argv": list(args.argv),
        "config": config,
        "seed": getattr(args, "seed", None),
        "versions": {
            "mrisde": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    p = Path(str(out_path) + ".provenance.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _parse_shape(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"shape must be HxW, got {text!r}") from e


def _schedule_from_args(args) -> NoiseSchedule:
    return NoiseSchedule(
        kind="VE",
        sigma_min=args.sigma_min,
        sigma_max=args.sigma_max,
        N=args.N,
        t_eps=args.t_eps,
    )


def _sampler_from_args(args) -> SamplerConfig:
    return SamplerConfig(
        N=args.N, M=args.M, r=args.r,
        lambda_start=args.lambda_start, lambda_end=args.lambda_end,
        m=args.m, n_prime_fraction=args.nprime, seed=args.seed,
    )


def _score_model(args, sched: NoiseSchedule):
    if args.model is not None:
        return load_model(args.model)
    if args.analytic == "gaussian":
        return AnalyticGaussianScore(0.0, 1.0)
    if args.analytic == "gmm":
        return AnalyticGmmScore(
            [0.5, 0.5],
            np.array([[[-0.5]], [[0.5]]]) * np.ones((2, 1, 1)),
            [0.25, 0.25],
        )
    raise MriSdeError("either --model or --analytic is required")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _add_sampler_flags(p):
    p.add_argument("--N", type=int, default=2000)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--r", type=float, default=0.16)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--lambda-start", dest="lambda_start", type=float, default=1.0)
    p.add_argument("--lambda-end", dest="lambda_end", type=float, default=0.2)
    p.add_argument("--nprime", type=float, default=1.0)
    p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.01)
    p.add_argument("--sigma-max", dest="sigma_max", type=float, default=378.0)
    p.add_argument("--t-eps", dest="t_eps", type=float, default=1e-5)
    p.add_argument("--model", default=None)
    p.add_argument("--analytic", choices=("gaussian", "gmm"), default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mrisde",
        description="Diffusion-prior reconstruction pipeline for undersampled k-space",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the ellipse phantom")
    p.add_argument("--shape", type=_parse_shape, required=True)
    p.add_argument("--phase", choices=("none", "smooth"), default="none")
    _add_common(p)

    p = sub.add_parser("mask", help="generate a sampling mask")
    p.add_argument("--shape", type=_parse_shape, required=True)
    p.add_argument("--kind", choices=("uniform1d", "gaussian1d", "gaussian2d", "poisson_vd", "full"), required=True)
    p.add_argument("--accel", type=float, default=1.0)
    p.add_argument("--acs", type=float, default=0.0)
    _add_common(p)

    p = sub.add_parser("sens", help="simulate coil sensitivity maps")
    p.add_argument("--shape", type=_parse_shape, required=True)
    p.add_argument("--coils", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("sim", help="apply the forward model to an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--sens", default=None)
    _add_common(p)

    p = sub.add_parser("train", help="train the denoiser with score matching")
    p.add_argument("--data", required=True, help="f32 stack (n, H, W)")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--lr-peak", dest="lr_peak", type=float, default=2e-4)
    p.add_argument("--warmup", type=int, default=5000)
    p.add_argument("--sigma-min", dest="sigma_min", type=float, default=0.01)
    p.add_argument("--sigma-max", dest="sigma_max", type=float, default=378.0)
    p.add_argument("--t-eps", dest="t_eps", type=float, default=1e-5)
    _add_common(p)

    p = sub.add_parser("recon", help="reconstruct an image from k-space")
    p.add_argument("--kspace", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--sens", default=None)
    p.add_argument("--algo", choices=("real", "sense", "ssos", "hybrid", "ccdf"), required=True)
    _add_sampler_flags(p)
    _add_common(p)

    p = sub.add_parser("ensemble", help="repeat a reconstruction over chains")
    p.add_argument("--kspace", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--sens", default=None)
    p.add_argument("--algo", choices=("real", "sense", "ssos", "hybrid", "ccdf"), required=True)
    p.add_argument("--count", type=int, default=8)
    _add_sampler_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="compare a reconstruction to a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("replay", help="re-run a recorded provenance file")
    p.add_argument("provenance")

    return parser


def _run_recon(args, rng: Rng):
    mask = load_mask(args.mask)
    y = load_kspace(args.kspace, mask)
    maps = load_maps(args.sens) if args.sens else None
    sched = _schedule_from_args(args)
    cfg = _sampler_from_args(args)
    model = _score_model(args, sched)

    if args.algo == "hybrid" and maps is None:
        raise UsageError("--algo hybrid requires --sens")
    if args.algo in ("real", "ccdf") and y.coils != 1:
        raise UsageError(f"--algo {args.algo} expects single-coil k-space")

    def run(chain_rng):
        if args.algo == "real":
            return recon_real(y, mask, model, sched, cfg, chain_rng)
        if args.algo == "sense":
            return recon_complex(y, mask, maps, model, sched, cfg, chain_rng)
        if args.algo == "ssos":
            return recon_ssos(y, model, sched, cfg, chain_rng)
        if args.algo == "hybrid":
            return recon_hybrid(y, maps, model, sched, cfg, chain_rng)
        return recon_ccdf(y, mask, maps, None, model, sched, cfg, chain_rng, mode="complex")

    return run, sched, cfg


class UsageError(MriSdeError):
    pass


def _cmd_phantom(args):
    h, w = args.shape
    img = shepp_logan(h, w, args.phase)
    save_image(args.out, img, role="phantom", extra={"phase": args.phase})
    sched, cfg = NoiseSchedule(), SamplerConfig(seed=args.seed)
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_mask(args):
    h, w = args.shape
    mask = make_mask(args.kind, h, w, args.accel, args.acs, Rng(args.seed))
    save_mask(args.out, mask, extra={"seed": args.seed})
    sched, cfg = NoiseSchedule(), SamplerConfig(seed=args.seed)
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_sens(args):
    h, w = args.shape
    maps = simulate_sensitivities(args.coils, h, w, Rng(args.seed))
    save_maps(args.out, maps, extra={"seed": args.seed})
    sched, cfg = NoiseSchedule(), SamplerConfig(seed=args.seed)
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_sim(args):
    img, _ = load_image(args.image)
    mask = load_mask(args.mask)
    maps = load_maps(args.sens) if args.sens else None
    y = forward(img, mask, maps)
    save_kspace(args.out, y, extra={"mask": str(args.mask)})
    sched, cfg = NoiseSchedule(), SamplerConfig(seed=args.seed)
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_train(args):
    stack, _ = load_array(args.data)
    if stack.ndim != 3:
        raise UsageError("--data must point to an (n, H, W) stack")
    sched = NoiseSchedule(kind="VE", sigma_min=args.sigma_min, sigma_max=args.sigma_max)
    cfg = TrainConfig(
        learning_rate_peak=args.lr_peak, warmup_steps=args.warmup,
        batch_size=args.batch, epochs=args.epochs, t_eps=args.t_eps,
        init_seed=args.seed,
    )
    model = train_dsm(stack.astype(float), sched, cfg, Rng(args.seed))
    save_model(args.out, model, cfg)
    write_provenance(args.out, args, run_config_dict(args, sched, SamplerConfig(seed=args.seed), cfg))
    return 0


def _cmd_recon(args):
    run, sched, cfg = _run_recon(args, Rng(args.seed))
    result = run(Rng(args.seed))
    save_image(
        args.out, np.asarray(result.image, dtype=complex), role=f"recon_{args.algo}",
        extra={"kspace_residual": result.kspace_residual, "steps_used": result.steps_used},
    )
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_ensemble(args):
    run, sched, cfg = _run_recon(args, Rng(args.seed))
    res = ensemble(run, args.count, args.seed)
    save_array(args.out + ".mean", res.mean_image, "f32", "ensemble_mean",
               extra={"count": args.count})
    save_array(args.out + ".std", res.std_image, "f32", "ensemble_std",
               extra={"count": args.count})
    write_provenance(args.out, args, run_config_dict(args, sched, cfg))
    return 0


def _cmd_eval(args):
    ref, _ = load_image(args.ref)
    test, _ = load_image(args.test)
    doc = {
        "psnr_db": psnr(np.abs(ref), np.abs(test)),
        "ssim": ssim(np.abs(ref), np.abs(test)),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    width = max(len(k) for k in doc)
    for k in sorted(doc):
        print(f"{k:<{width}}  {doc[k]:12.6f}")
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_replay(args):
    doc = json.loads(Path(args.provenance).read_text())
    return run_command(doc["argv"])


_COMMANDS = {
    "phantom": _cmd_phantom,
    "mask": _cmd_mask,
    "sens": _cmd_sens,
    "sim": _cmd_sim,
    "train": _cmd_train,
    "recon": _cmd_recon,
    "ensemble": _cmd_ensemble,
    "eval": _cmd_eval,
    "replay": _cmd_replay,
}


def run_command(argv) -> int:
    """Entry point shared by the console script and tests.

    Exit codes: 0 success, 1 usage/configuration error, 2 numerical
    divergence."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    args.argv = list(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (MriSdeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
