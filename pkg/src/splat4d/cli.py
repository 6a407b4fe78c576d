"""Command-line entry point: ``splat4d <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import set_threads

log = logging.getLogger("splat4d")

SUBCOMMANDS = ("synth-gen", "train", "refine", "render", "eval", "attn-demo", "repro-fig")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of flag values (keys are flag names); explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="splat4d", formatter_class=fmt,
                                     description="Dynamic Gaussian splatting pipeline on synthetic data.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth-gen", formatter_class=fmt, help="generate a synthetic multi-view dataset")
    p.add_argument("--script", type=Path, default=None, help="scene script JSON (default: built-in scene)")
    p.add_argument("--static", action="store_true", help="freeze all motion in the built-in scene")
    p.add_argument("--views", type=int, default=21, help="azimuths on the orbit")
    p.add_argument("--frames", type=int, default=25, help="timestamps in [0, 1]")
    p.add_argument("--size", type=int, default=128, help="image width and height in pixels")
    p.add_argument("--radius", type=float, default=2.0, help="orbit radius")
    p.add_argument("--elevation", type=float, default=0.0, help="orbit elevation in degrees")
    p.add_argument("--gain", type=float, default=0.15, help="colour jitter gain amplitude g")
    p.add_argument("--bias", type=float, default=0.05, help="colour jitter bias amplitude b")
    p.add_argument("--noise-sigma", type=float, default=0.05, help="pixel noise sigma on noisy views")
    p.add_argument("--noise-views", type=_int_list, default=None,
                   help="comma-separated noisy view indices (default: views with index %% 3 == 1)")
    p.add_argument("--defect-prob", type=float, default=0.1, help="per-image blotch probability")
    p.add_argument("--defect-radius", type=_int_list, default=[4, 8], help="min,max blotch radius in pixels")
    p.add_argument("--no-corruption", action="store_true", help="write corrupted frames equal to clean ones")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_common(p)

    p = sub.add_parser("train", formatter_class=fmt, help="coarse training on a dataset")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("--iters", type=int, default=3000, help="training iterations")
    p.add_argument("--static-iters", type=int, default=0, help="initial iterations without deformation")
    p.add_argument("--no-multiscale", action="store_true", help="train at full resolution only")
    p.add_argument("--no-colorhead", action="store_true", help="disable the time-dependent colour transform")
    p.add_argument("--no-densify", action="store_true", help="disable clone/split/prune")
    p.add_argument("--r-min", type=float, default=0.25, help="smallest multiscale ratio")
    p.add_argument("--r-max", type=float, default=1.0, help="largest multiscale ratio")
    p.add_argument("--color-reg", type=float, default=0.5, help="weight of the colour-head identity prior")
    p.add_argument("--eval-every", type=int, default=250, help="iterations between metric log rows")
    p.add_argument("--runs-root", type=Path, default=Path("runs"), help="parent of timestamped run directories")
    _add_common(p)

    p = sub.add_parser("refine", formatter_class=fmt, help="one-pass refinement of a trained checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--ckpt", type=Path, required=True, help="input checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    p.add_argument("--refiner", choices=("identity", "oracle", "blursharpen"), default="blursharpen",
                   help="image-to-image refiner")
    p.add_argument("--strength", type=float, default=0.167, help="refiner strength")
    p.add_argument("--iters", type=int, default=5000, help="refinement iterations")
    p.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    p.add_argument("--lambda-perceptual", type=float, default=0.5, help="perceptual loss weight")
    p.add_argument("--freeze-colorhead", action="store_true", help="keep the colour head fixed")
    p.add_argument("--half-period", action="store_true", help="use sin(pi d / 2) view weights")
    p.add_argument("--eval-every", type=int, default=500, help="iterations between metric log rows")
    p.add_argument("--runs-root", type=Path, default=Path("runs"), help="parent of timestamped run directories")
    _add_common(p)

    p = sub.add_parser("render", formatter_class=fmt, help="render one view of a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint")
    p.add_argument("--time", type=float, default=0.0, help="timestamp in [0, 1]")
    p.add_argument("--view", type=int, default=0, help="orbit view index")
    p.add_argument("--color-time", type=float, default=None, help="pin colour features to this time")
    p.add_argument("--data", type=Path, default=None, help="dataset for cameras (default: stored in checkpoint)")
    p.add_argument("--out", type=Path, required=True, help="output PNG")
    _add_common(p)

    p = sub.add_parser("eval", formatter_class=fmt, help="per-held-out-view PSNR/SSIM CSV")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--ref-time", type=float, default=None,
                   help="pin colour features to this time (colour-head models)")
    p.add_argument("--reference", choices=("clean", "frames"), default="clean", help="ground truth images")
    p.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")
    _add_common(p)

    p = sub.add_parser("attn-demo", formatter_class=fmt, help="attention-injection consistency sweep")
    p.add_argument("--alphas", type=_float_list, default=[0.0, 0.25, 0.5, 0.75, 1.0], help="EMA weights")
    p.add_argument("--variant", choices=("s_ema", "s_linear", "s_res", "t_ema", "none"), default="s_ema",
                   help="injection variant")
    p.add_argument("--steps", type=int, default=8, help="timestamps in the toy sequence")
    p.add_argument("--tokens", type=int, default=32, help="tokens per latent")
    p.add_argument("--channels", type=int, default=16, help="latent channels")
    p.add_argument("--noise", type=float, default=0.1, help="per-timestamp latent noise")
    p.add_argument("--out", type=Path, default=None, help="output directory (CSV also printed)")
    _add_common(p)

    p = sub.add_parser("repro-fig", formatter_class=fmt, help="run an ablation end to end")
    p.add_argument("figure", choices=("colorhead", "attention", "multiscale"), help="which ablation")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--iters", type=int, default=3000, help="training iterations per run")
    p.add_argument("--frames", type=int, default=25, help="timestamps of the generated dataset")
    p.add_argument("--views", type=int, default=21, help="views of the generated dataset")
    p.add_argument("--size", type=int, default=128, help="image size of the generated dataset")
    _add_common(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sp = _subparser(parser, args.command)
    try:
        values = json.loads(args.config.read_text(encoding="utf-8"))
    except FileNotFoundError:
        sp.error(f"--config: file not found: {args.config}")
    except json.JSONDecodeError as exc:
        sp.error(f"--config: {args.config} is not valid JSON ({exc})")
    if not isinstance(values, dict):
        sp.error(f"--config: {args.config} must hold a JSON object")
    dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    clean = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            sp.error(f"--config: unknown key {key!r} in {args.config}")
        action = dests[dest]
        if isinstance(value, str) and action.type is not None and action.type not in (str,):
            try:
                value = action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                sp.error(f"--config: bad value for {key!r}: {exc}")
        clean[dest] = value
    sp.set_defaults(**clean)
    for a in sp._actions:
        if a.dest in clean:
            a.required = False
    return parser.parse_args(argv)


def _effective_config(args) -> dict:
    out = {}
    for k, v in vars(args).items():
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def make_run_dir(root: Path, command: str, args) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(root) / f"{stamp}-{command}"
    n = 1
    while run.exists():
        run = Path(root) / f"{stamp}-{command}-{n}"
        n += 1
    run.mkdir(parents=True)
    (run / "config.json").write_text(json.dumps(_effective_config(args), indent=1, sort_keys=True) + "\n")
    return run


def _camera_meta(dataset) -> dict:
    return {"intrinsics": dataset.intrinsics.to_dict(), "rig": dataset.rig.to_dict(),
            "held_out_views": list(dataset.held_out), "timestamps": dataset.n_frames}


def cmd_synth_gen(args) -> int:
    from .camera import OrbitRig
    from .synth import CorruptionSpec, SceneScript, default_noise_views, default_script, generate

    if args.views < 1 or args.frames < 1 or args.size < 8:
        raise UsageError("--views and --frames must be >= 1 and --size >= 8")
    if args.script is not None:
        if not args.script.exists():
            raise FileNotFoundError(f"--script: file not found: {args.script}")
        script = SceneScript.load(args.script)
    else:
        script = default_script(args.seed, static=args.static)
    if args.no_corruption:
        spec = CorruptionSpec.none()
    else:
        if len(args.defect_radius) != 2:
            raise UsageError("--defect-radius takes two integers: min,max")
        noise_views = default_noise_views(args.views) if args.noise_views is None else args.noise_views
        try:
            spec = CorruptionSpec(args.gain, args.bias, args.noise_sigma, tuple(noise_views), args.defect_prob,
                                  tuple(args.defect_radius))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    rig = OrbitRig(n_azimuths=args.views, elevation_deg=args.elevation, radius=args.radius)
    m = generate(script, rig, args.frames, spec, args.out, size=args.size, seed=args.seed)
    print(f"wrote {len(m['images'])} images to {args.out}")
    return 0


def _train_config(args, **over):
    from .trainer import TrainConfig
    kw = dict(seed=args.seed)
    kw.update(over)
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    from .synth import load
    from .trainer import coarse_train

    cfg = _train_config(args, coarse_iters=args.iters, static_iters=args.static_iters,
                        multiscale=not args.no_multiscale, color_head=not args.no_colorhead,
                        densify=not args.no_densify, r_min=args.r_min, r_max=args.r_max,
                        color_reg=args.color_reg, eval_every=args.eval_every)
    dataset = load(args.data)
    run = make_run_dir(args.runs_root, "train", args)
    (run / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    model, tlog = coarse_train(dataset, config=cfg, log_path=run / "metrics.csv", dump_dir=run)
    model.meta.update(_camera_meta(dataset))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    model.save(run / "model.ckpt")
    if tlog.last:
        it, tr, te, n = tlog.last
        print(f"iteration {it}: train_psnr {tr:.3f} test_psnr {te:.3f} n_gaussians {n}")
    print(f"checkpoint {args.out}; run directory {run}")
    return 0


def cmd_refine(args) -> int:
    from .model import DynamicModel
    from .synth import load
    from .trainer import make_refiner, refine_train

    cfg = _train_config(args, refine_iters=args.iters, refine_lr=args.lr,
                        lambda_perceptual=args.lambda_perceptual,
                        refine_color_head=not args.freeze_colorhead, half_period_weight=args.half_period,
                        eval_every=args.eval_every)
    dataset = load(args.data)
    model = DynamicModel.load(args.ckpt)
    refiner = make_refiner(args.refiner, dataset)
    run = make_run_dir(args.runs_root, "refine", args)
    model, tlog, cache = refine_train(dataset, model, refiner, cfg, strength=args.strength,
                                      log_path=run / "metrics.csv")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    model.save(run / "model.ckpt")
    if tlog.last:
        print(f"iteration {tlog.last[0]}: test_psnr {tlog.last[2]:.3f}; {len(cache)} cached targets")
    print(f"checkpoint {args.out}; run directory {run}")
    return 0


def _cameras(args, model):
    from .camera import CameraIntrinsics, OrbitRig, orbit_poses
    if args.data is not None:
        from .synth import load
        ds = load(args.data)
        return ds.intrinsics, ds.poses, ds.background
    if "intrinsics" not in model.meta:
        raise UsageError("checkpoint stores no cameras; pass --data")
    intr = CameraIntrinsics.from_dict(model.meta["intrinsics"])
    return intr, orbit_poses(OrbitRig.from_dict(model.meta["rig"])), None


def cmd_render(args) -> int:
    from .model import DynamicModel
    from .rasterizer.io import write_png

    if not 0.0 <= args.time <= 1.0:
        raise UsageError("--time must lie in [0, 1]")
    model = DynamicModel.load(args.ckpt)
    intr, poses, _ = _cameras(args, model)
    if not 0 <= args.view < len(poses):
        raise UsageError(f"--view must be in [0, {len(poses) - 1}]")
    ctime = args.color_time if model.color_head is not None else None
    img = model.render(args.time, poses[args.view], intr, color_time=ctime).image
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    import csv
    from .model import DynamicModel
    from .synth import load
    from .trainer import per_view_metrics, write_eval_csv

    model = DynamicModel.load(args.ckpt)
    dataset = load(args.data)
    rows = per_view_metrics(model, dataset, ref_time=args.ref_time, reference=args.reference)
    if args.out is not None:
        write_eval_csv(rows, args.out)
        print(f"wrote {args.out}")
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
    return 0


def attention_rows(alphas, variant, steps, tokens, channels, noise, seed):
    from .attninject import consistency_score, make_stack, run_sequence, static_noisy_sequence
    rng = np.random.default_rng(seed)
    layers = make_stack(2, channels, channels, rng)
    seq = static_noisy_sequence(steps, tokens, channels, noise, rng)
    rows, outputs = [], {}
    for a in alphas:
        outs = run_sequence(layers, seq, float(a), variant)
        rows.append((float(a), variant, consistency_score(outs)))
        outputs[float(a)] = np.stack(outs)
    return rows, outputs


def cmd_attn_demo(args) -> int:
    if not args.alphas or any(not 0.0 <= a <= 1.0 for a in args.alphas):
        raise UsageError("--alphas must be non-empty values in [0, 1]")
    if args.variant == "t_ema":
        raise UsageError("t_ema needs multi-view latents; use repro-fig attention")
    rows, outputs = attention_rows(args.alphas, args.variant, args.steps, args.tokens, args.channels,
                                   args.noise, args.seed)
    text = "alpha,variant,consistency_score\n" + "".join(f"{a:.6f},{v},{s:.6f}\n" for a, v, s in rows)
    sys.stdout.write(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "consistency.csv").write_text(text)
        for a, arr in outputs.items():
            arr.astype("<f4").tofile(args.out / f"outputs_alpha{a:.3f}.f32")
        (args.out / "outputs_shape.txt").write_text(" ".join(str(s) for s in next(iter(outputs.values())).shape) + "\n")
    return 0


def _side_by_side(images, path) -> None:
    from .rasterizer.io import write_png
    write_png(path, np.concatenate([np.asarray(i, dtype=np.float32) for i in images], axis=1))


def _repro_dataset(args, out: Path, name: str, spec):
    from .camera import OrbitRig
    from .synth import default_script, generate, load
    d = out / name
    generate(default_script(args.seed), OrbitRig(n_azimuths=args.views), args.frames, spec, d,
             size=args.size, seed=args.seed)
    return load(d)


def cmd_repro_fig(args) -> int:
    from .synth import CorruptionSpec, default_noise_views
    from .trainer import coarse_train, per_view_metrics, train_psnr_full

    out = make_run_dir(args.out, f"repro-{args.figure}", args)
    if args.figure == "attention":
        from .attninject import VARIANTS
        lines = ["alpha,variant,consistency_score"]
        tiles = []
        for variant in VARIANTS:
            if variant == "t_ema":
                continue
            rows, outputs = attention_rows([0.0, 0.25, 0.5, 0.75, 1.0], variant, 8, 32, 16, 0.1, args.seed)
            lines += [f"{a:.6f},{v},{s:.6f}" for a, v, s in rows]
            if variant == "s_ema":
                for a, arr in outputs.items():
                    dev = np.abs(arr - arr.mean(axis=0, keepdims=True))
                    tiles.append(np.concatenate(list(dev), axis=1))
        (out / "consistency.csv").write_text("\n".join(lines) + "\n")
        grid = np.concatenate(tiles, axis=0)
        grid = 1.0 - grid / max(grid.max(), 1e-12)
        _side_by_side([np.repeat(grid[..., None], 3, axis=2)], out / "attention_deviation.png")
        print("\n".join(lines))
        return 0

    if args.figure == "colorhead":
        ds = _repro_dataset(args, out, "data", CorruptionSpec(noise_sigma=0.0, defect_prob=0.0))
        summary = ["model,test_psnr_ref_time0"]
        renders = []
        v = ds.held_out[0]
        t_last = ds.n_frames - 1
        for head in (True, False):
            tag = "colorhead" if head else "no_colorhead"
            cfg = _train_config(args, coarse_iters=args.iters, color_head=head)
            model, _ = coarse_train(ds, config=cfg, log_path=out / f"metrics_{tag}.csv")
            rows = per_view_metrics(model, ds, ref_time=0.0)
            summary.append(f"{tag},{np.mean([r['psnr'] for r in rows]):.6f}")
            ct = 0.0 if head else None
            renders.append(model.render(ds.times[t_last], ds.poses[v], ds.intrinsics, color_time=ct).image)
        _side_by_side([ds.clean(t_last, v), ds.image(t_last, v)] + renders, out / "colorhead.png")
    else:
        spec = CorruptionSpec(gain=0.0, bias=0.0, noise_views=default_noise_views(args.views), defect_prob=0.0)
        ds = _repro_dataset(args, out, "data", spec)
        summary = ["model,train_psnr,test_psnr,n_gaussians"]
        renders = []
        v = ds.held_out[0]
        for ms in (True, False):
            tag = "multiscale" if ms else "full_res"
            cfg = _train_config(args, coarse_iters=args.iters, multiscale=ms)
            model, tlog = coarse_train(ds, config=cfg, log_path=out / f"metrics_{tag}.csv")
            test = np.mean([r["psnr"] for r in per_view_metrics(model, ds)])
            summary.append(f"{tag},{train_psnr_full(model, ds):.6f},{test:.6f},{len(model.cloud)}")
            renders.append(model.render(ds.times[0], ds.poses[v], ds.intrinsics).image)
        _side_by_side([ds.clean(0, v)] + renders, out / "multiscale.png")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    print(f"outputs in {out}")
    return 0


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "train": cmd_train,
    "refine": cmd_refine,
    "render": cmd_render,
    "eval": cmd_eval,
    "attn-demo": cmd_attn_demo,
    "repro-fig": cmd_repro_fig,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        set_threads()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"splat4d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        print(f"splat4d {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
