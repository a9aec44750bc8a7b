"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime or domain error. All
diagnostics go to stderr; results go to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import __version__, color, config, geometry, gradcheck, image_core, losses, optimizer, pipeline, rigsim
from .errors import StitchError


def _load_config(args):
    cfg = config.Config.defaults()
    if getattr(args, "config", None):
        cfg = config.Config.load(args.config)
    return cfg


def _load_source(spec, erp_size):
    """Source panorama: a PNG path, or ``synth:SEED`` for a generated one."""
    if spec.startswith("synth:"):
        seed = int(spec.split(":", 1)[1])
        return rigsim.synthetic_panorama(erp_size, seed=seed)
    img = image_core.read_png(spec)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return img


def cmd_render(args):
    cfg = _load_config(args)
    rig = config.rig_from_config(cfg)
    source = _load_source(args.source, rig.erp_size)
    if source.shape[:2] != (rig.erp_height, rig.erp_width):
        print(
            f"note: resizing source {source.shape[1]}x{source.shape[0]} to "
            f"{rig.erp_width}x{rig.erp_height}",
            file=sys.stderr,
        )
        source = image_core.bilinear_resize(source, (rig.erp_height, rig.erp_width))
    perturb = None
    if args.perturb:
        perturb = rigsim.load_perturbation_file(args.perturb)
    bundle = rigsim.make_scene(
        source,
        rig,
        perturb,
        reference_yaw=cfg.get("color.reference_yaw"),
        patch_radius=cfg.get("color.patch_radius"),
        grid_step=cfg.get("color.grid_step"),
    )
    rigsim.save_scene(bundle, args.out)
    print(f"scene written to {args.out}")
    return 0


def cmd_fit_color(args):
    query = image_core.read_png(args.query)
    reference = image_core.read_png(args.reference)
    if query.shape != reference.shape:
        raise StitchError("query and reference images must share dims")
    if args.mask:
        mask = image_core.read_wssf(args.mask)
        sel = mask > 0
    else:
        sel = np.ones(query.shape[:2], dtype=bool)
    q = query[sel].reshape(-1, query.shape[-1]) if query.ndim == 3 else query[sel].reshape(-1)
    r = reference[sel].reshape(-1, reference.shape[-1]) if reference.ndim == 3 else reference[sel].reshape(-1)
    poly = color.fit_color_polynomial(q, r)
    for ch in range(poly.n_channels):
        a, b, c = (float(v) for v in poly.coeffs[ch])
        print(f"{a!r} {b!r} {c!r} {float(poly.residual[ch])!r}")
    return 0


def _stitch(args, cfg):
    bundle = rigsim.load_scene(args.scene)
    loss_cfg = config.loss_config_from_config(cfg)
    optim_cfg = config.optim_config_from_config(cfg)
    if args.iters is not None:
        optim_cfg = optimizer.OptimConfig(
            learning_rate=optim_cfg.learning_rate,
            beta1=optim_cfg.beta1,
            beta2=optim_cfg.beta2,
            epsilon=optim_cfg.epsilon,
            iterations=args.iters,
            log_every=optim_cfg.log_every,
            seed=optim_cfg.seed,
        )
    if args.lr is not None:
        optim_cfg = optimizer.OptimConfig(
            learning_rate=args.lr,
            beta1=optim_cfg.beta1,
            beta2=optim_cfg.beta2,
            epsilon=optim_cfg.epsilon,
            iterations=optim_cfg.iterations,
            log_every=optim_cfg.log_every,
            seed=optim_cfg.seed,
        )
    alpha = args.alpha if args.alpha is not None else cfg.get("loss.alpha")
    if args.lam is not None:
        loss_cfg = losses.LossConfig(
            lam=args.lam,
            training_levels=loss_cfg.training_levels,
            metric_levels=loss_cfg.metric_levels,
            ssim_window=loss_cfg.ssim_window,
            ssim_sigma=loss_cfg.ssim_sigma,
            ssim_k1=loss_cfg.ssim_k1,
            ssim_k2=loss_cfg.ssim_k2,
        )
    dtype = np.float32
    inputs = [im.astype(dtype) for im in bundle.inputs]
    fields = [f.astype(dtype) for f in bundle.base_fields]
    targets = [t.astype(dtype) for t in bundle.supervision_erp]
    masks = [m.astype(dtype) for m in bundle.masks]
    m_hat = bundle.m_hat.astype(dtype)

    def _log(it, total, comps):
        print(
            f"iter {it}: total {total:.6f} perceptual {comps['perceptual']:.6f} "
            f"ssim {comps['ssim']:.6f}",
            file=sys.stderr,
        )

    params, report = optimizer.optimize_scene(
        inputs, fields, targets, masks, m_hat, loss_cfg, optim_cfg,
        alpha=alpha,
        control_scale=cfg.get("optim.control_scale"),
        frozen=tuple(args.freeze or ()),
        log_fn=_log if args.verbose else None,
    )
    pano, inter = pipeline.forward(inputs, fields, params, alpha)
    return bundle, params, report, pano, inter


def cmd_stitch(args):
    cfg = _load_config(args)
    bundle, params, report, pano, inter = _stitch(args, cfg)
    image_core.write_png(args.out, pano)
    print(
        f"stitched {args.scene}: loss {report.total_history[0]:.6f} -> "
        f"{report.best_loss:.6f} (best at iter {report.best_iteration}, "
        f"{report.wall_time_s:.1f}s)"
    )
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "total", "perceptual", "ssim"])
            for i, (t, p, s) in enumerate(
                zip(report.total_history, report.perceptual_history, report.ssim_history)
            ):
                writer.writerow([i, repr(t), repr(p), repr(s)])
    if args.dump_intermediates:
        _dump_intermediates(args.dump_intermediates, inter)
    return 0


def _dump_intermediates(out_dir, inter):
    os.makedirs(out_dir, exist_ok=True)
    for k, img in enumerate(inter["i_hat"]):
        image_core.write_png(os.path.join(out_dir, f"i_hat_{k:02d}.png"), img)
    for k, u in enumerate(inter["u"]):
        image_core.write_wssf(os.path.join(out_dir, f"u_{k:02d}.wssf"), u)
    for k, img in enumerate(inter["i_bar"]):
        image_core.write_png(os.path.join(out_dir, f"i_bar_{k:02d}.png"), img)
    for k in range(inter["weights"].shape[0]):
        image_core.write_wssf(os.path.join(out_dir, f"w_{k:02d}.wssf"), inter["weights"][k])
    image_core.write_png(os.path.join(out_dir, "p.png"), inter["p"])
    image_core.write_png(os.path.join(out_dir, "o.png"), inter["o"])


def eval_metrics(pano, bundle, loss_cfg):
    """Perceptual distance vs the supervision views, plus PSNR/SSIM vs the
    held-out truth when present."""
    metrics = {}
    metrics["P_d"] = losses.perceptual_distance(
        pano, bundle.supervision_erp, bundle.masks, loss_cfg
    )
    if bundle.truth_panorama is not None:
        coverage = np.zeros(pano.shape[:2], dtype=bool)
        for cam_field in bundle.base_fields:
            coverage |= cam_field[..., 0] > geometry.OUT_OF_FOOTPRINT + 1.0
        truth = bundle.truth_panorama
        metrics["PSNR"] = losses.psnr(pano, truth, coverage.astype(np.float32))
        smap = losses.ssim_map(pano, truth, loss_cfg)
        metrics["SSIM"] = float(smap[coverage].mean())
    return metrics


def cmd_eval(args):
    cfg = _load_config(args)
    bundle = rigsim.load_scene(args.scene)
    pano = image_core.read_png(args.pano)
    loss_cfg = config.loss_config_from_config(cfg)
    metrics = eval_metrics(pano, bundle, loss_cfg)
    lines = [f"{name}\t{value!r}" for name, value in metrics.items()]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            for name, value in metrics.items():
                f.write(f"{name} = {value!r}\n")
    return 0


def cmd_gradcheck(args):
    errors = gradcheck.run_chain_check(args.seed, coords_per_group=args.coords, full=args.full)
    worst = 0.0
    for name in pipeline.PARAM_GROUPS:
        err = errors[name]
        worst = max(worst, err)
        print(f"{name}\t{err:.3e}")
    ok = worst <= gradcheck.REL_TOL
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {worst:.3e} "
          f"(tolerance {gradcheck.REL_TOL:.0e})")
    return 0 if ok else 2


def cmd_version(args):
    print(f"panostitch {__version__}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="panostitch",
        description="Differentiable 360-degree fisheye panorama stitching.",
        epilog="Config defaults:\n" + config.describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a synthetic scene from a panorama")
    p.add_argument("--source", required=True, help="ERP PNG path or synth:SEED")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--perturb", help="perturbation spec file")
    p.add_argument("--config", help="config file")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("fit-color", help="fit the quadratic color mapping between two images")
    p.add_argument("--query", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask", help="optional WSSF mask of usable pixels")
    p.set_defaults(fn=cmd_fit_color)

    p = sub.add_parser("stitch", help="optimize and stitch a rendered scene")
    p.add_argument("--scene", required=True, help="scene directory from render")
    p.add_argument("--out", required=True, help="output panorama PNG")
    p.add_argument("--config", help="config file")
    p.add_argument("--iters", type=int, help="override optim.iters")
    p.add_argument("--lr", type=float, help="override optim.lr")
    p.add_argument("--alpha", type=float, help="override loss.alpha")
    p.add_argument("--lambda", dest="lam", type=float, help="override loss.lambda")
    p.add_argument("--freeze", action="append", choices=pipeline.PARAM_GROUPS,
                   help="freeze a parameter group (repeatable)")
    p.add_argument("--report", help="write per-iteration loss history CSV")
    p.add_argument("--dump-intermediates", help="directory for stage-by-stage outputs")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    p.set_defaults(fn=cmd_stitch)

    p = sub.add_parser("eval", help="evaluate a panorama against a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--pano", required=True)
    p.add_argument("--config", help="config file")
    p.add_argument("--out", help="also write metrics as key = value lines")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=8, help="sampled coordinates per group")
    p.add_argument("--full", action="store_true", help="sweep every coordinate")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(fn=cmd_version)
    return parser


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except StitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
