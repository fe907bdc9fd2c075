"""Command-line entry point: simulate | reconstruct | train | evaluate | gradcheck.

Artifacts are directories of .stp tensors plus JSON metadata sidecars, so
every subcommand's output feeds the next one directly. Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures. --threads (or
STPD_THREADS) caps the BLAS thread pools; 1 guarantees bitwise
reproducibility of seeded runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import config as cfgmod
from . import metrics, network, precision, projector, recon, simulate, tensorio, training

META_NAME = "meta.json"


# ---------------------------------------------------------------------------
# helpers

def _write_meta(path, payload) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def _read_meta(scan_dir):
    with open(os.path.join(scan_dir, META_NAME)) as f:
        return json.load(f)


def _schedule_from_meta(meta) -> simulate.FrameSchedule:
    sch = meta["schedule"]
    return simulate.FrameSchedule(tuple(sch["starts"]), tuple(sch["durations"]))


def _geometry_from_meta(meta) -> projector.ProjectorGeometry:
    g = meta["geometry"]
    return projector.ProjectorGeometry(
        n_views=g["n_views"], n_bins=g["n_bins"], image_size=g["image_size"],
        pixel_size=g["pixel_size"], bin_spacing=g["bin_spacing"],
        fov_radius=g["fov_radius"])


def _geometry_to_dict(g: projector.ProjectorGeometry) -> dict:
    return {"n_views": g.n_views, "n_bins": g.n_bins, "image_size": g.image_size,
            "pixel_size": g.pixel_size, "bin_spacing": g.bin_spacing,
            "fov_radius": g.fov_radius}


def _load_scan(scan_dir):
    meta = _read_meta(scan_dir)
    counts = tensorio.read_tensor(os.path.join(scan_dir, "counts.stp"))
    background = tensorio.read_tensor(os.path.join(scan_dir, "background.stp"))
    truth = tensorio.read_tensor(os.path.join(scan_dir, "truth.stp"))
    return meta, counts, background, truth


def _count_consistent_label(truth, meta):
    scales = np.asarray(meta["count_scales"])
    return truth * scales[:, None, None]


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    g = cfg.geometry
    sched = cfg.schedule
    spec = cfg.phantom_spec(args.seed)
    truth, region_map = simulate.make_phantom(spec, sched)
    scan = cfg.scan_model()
    result = simulate.simulate_scan(truth, g, scan, args.seed)

    os.makedirs(args.out, exist_ok=True)
    truth64 = truth.astype(np.float64)
    tensorio.write_tensor(truth64, os.path.join(args.out, "truth.stp"))
    tensorio.write_tensor(result.counts, os.path.join(args.out, "counts.stp"))
    tensorio.write_tensor(result.background, os.path.join(args.out, "background.stp"))
    tensorio.write_tensor(region_map.astype(np.float64),
                          os.path.join(args.out, "region_map.stp"))
    region_names = [r.name for r in spec.regions]
    if "tumor" in region_names:
        roi = (region_map == region_names.index("tumor")).astype(np.float64)
        tensorio.write_tensor(roi, os.path.join(args.out, "tumor_roi.stp"))

    label = truth64 * result.count_scales[:, None, None]
    _write_meta(os.path.join(args.out, META_NAME), {
        "seed": args.seed,
        "schedule": {"starts": list(sched.starts), "durations": list(sched.durations)},
        "geometry": _geometry_to_dict(g),
        "frame_targets": list(scan.frame_targets),
        "background_fraction": scan.background_fraction,
        "count_scales": [float(v) for v in result.count_scales],
        "label_scale": float(label.max()),
        "regions": region_names,
    })
    print(f"simulated {sched.n_frames} frames "
          f"({int(result.counts.sum())} total counts) -> {args.out}")
    return 0


def _kernel_from_config(kcfg, counts, background, g, sched):
    comp = recon.composite_recon(counts, background, g, sched,
                                 n_groups=kcfg.composites,
                                 n_iter=kcfg.composite_iters)
    return recon.build_st_kernel(comp, sched.n_frames,
                                 k_neighbors=kcfg.k_neighbors,
                                 window=kcfg.window,
                                 neighborhood=kcfg.neighborhood)


def cmd_reconstruct(args) -> int:
    cfg = cfgmod.load_config(args.geom_config)
    meta, counts, background, _truth = _load_scan(args.input)
    g = _geometry_from_meta(meta)
    sched = _schedule_from_meta(meta)
    scales = np.asarray(meta["count_scales"])[:, None, None]

    if args.method == "mlem":
        iters = args.iters or 20
        out = recon.mlem(counts, g, background, n_iter=iters) / scales
    elif args.method == "kemst":
        iters = args.iters or cfg.kemst.iters
        kernel = _kernel_from_config(cfg.kemst, counts, background, g, sched)
        out = recon.kem_st(counts, g, kernel, n_iter=iters) / scales
    elif args.method in ("stpdnet", "lpd"):
        if not args.model:
            raise ValueError(f"--model is required for method {args.method}")
        params = network.load_params(args.model)
        want = 3 if args.method == "stpdnet" else 1
        if params.config.temporal_extent != want:
            raise ValueError(
                f"checkpoint temporal extent {params.config.temporal_extent} "
                f"does not match method {args.method}")
        y = counts / counts.max()
        img = network.reconstruct(params, y.astype(precision.dtype()), g)
        out = img.astype(np.float64) * meta["label_scale"] / scales
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(f"unknown method {args.method}")

    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    tensorio.write_tensor(np.asarray(out, dtype=np.float64), args.out)
    print(f"{args.method} reconstruction -> {args.out}")
    return 0


def _scan_dirs(root):
    subs = sorted(d for d in os.listdir(root)
                  if os.path.isfile(os.path.join(root, d, META_NAME)))
    return [os.path.join(root, d) for d in subs]


def _load_training_pairs(dirs):
    pairs, geoms, scheds = [], [], []
    for d in dirs:
        meta, counts, _bg, truth = _load_scan(d)
        label = _count_consistent_label(truth, meta)
        norm = simulate.normalize_pair(counts, label)
        pairs.append((norm.sinos.astype(precision.dtype()),
                      norm.labels.astype(precision.dtype())))
        geoms.append(_geometry_from_meta(meta))
        scheds.append(_schedule_from_meta(meta))
    return pairs, geoms, scheds


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    train_root = os.path.join(args.data, "train")
    val_root = os.path.join(args.data, "val")
    if os.path.isdir(train_root):
        train_dirs = _scan_dirs(train_root)
        val_dirs = _scan_dirs(val_root) if os.path.isdir(val_root) else []
    else:
        train_dirs = _scan_dirs(args.data)
        val_dirs = []
    if not train_dirs:
        raise ValueError(f"no scan directories under {args.data}")

    pairs, geoms, _ = _load_training_pairs(train_dirs)
    val_pairs = _load_training_pairs(val_dirs)[0] if val_dirs else None
    g = geoms[0]

    params = None
    start_epoch = 0
    if args.resume:
        params = network.load_params(os.path.join(args.resume, "final"))
        state_path = os.path.join(args.resume, "state.json")
        if os.path.isfile(state_path):
            with open(state_path) as f:
                start_epoch = json.load(f).get("epochs_completed", 0)

    os.makedirs(args.out, exist_ok=True)
    result = training.train(cfg.train, pairs, g, out_dir=args.out,
                            val_data=val_pairs, params=params,
                            start_epoch=start_epoch,
                            log=lambda msg: print(msg, flush=True))
    network.save_params(result.params, os.path.join(args.out, "final"))
    training.write_history_csv(result.history,
                               os.path.join(args.out, "loss_history.csv"))
    _write_meta(os.path.join(args.out, "state.json"),
                {"epochs_completed": cfg.train.epochs})
    print(f"trained {cfg.train.epochs} epochs "
          f"({len(result.history)} steps) -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    truth = tensorio.read_tensor(args.truth)
    labels = args.labels.split(",")
    paths = args.recon.split(",")
    if len(labels) != len(paths):
        raise ValueError("--labels must name each --recon path")
    recons = {lab: tensorio.read_tensor(p) for lab, p in zip(labels, paths)}

    meta_path = os.path.join(os.path.dirname(os.path.abspath(args.truth)), META_NAME)
    mask = None
    if os.path.isfile(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        sched = _schedule_from_meta(meta)
        mask = np.asarray(projector.fov_mask(_geometry_from_meta(meta)))
    elif truth.shape[0] == 18:
        sched = simulate.FrameSchedule.default()
    else:
        sched = simulate.FrameSchedule.from_durations([60.0] * truth.shape[0])

    roi = None
    if args.roi:
        roi = tensorio.read_tensor(args.roi) > 0.5

    report = metrics.evaluate(recons, truth, sched, mask=mask, roi=roi)
    metrics.write_report_csvs(report, args.report)
    for name, m in report.methods.items():
        print(f"{name}: mean PSNR {m.mean_psnr:.3f} dB, mean SSIM {m.mean_ssim:.4f}")
    print(f"report -> {args.report}")
    return 0


GRADCHECK_TOL = 1e-4


def _gradcheck_network(scale: str):
    if scale == "tiny":
        g = projector.build_geometry(4, 8, 8)
        cfg = network.NetworkConfig(n_blocks=2, n_primal=3, n_dual=3,
                                    hidden_channels=4)
        T = 3
    else:
        g = projector.build_geometry(8, 16, 16)
        cfg = network.NetworkConfig(n_blocks=2, n_primal=3, n_dual=3,
                                    hidden_channels=6)
        T = 4
    params = network.init_network(cfg, seed=1)
    network.randomize_parameters(params, seed=2, scale=0.1)
    rng = np.random.default_rng(3)
    y = rng.random((1, T) + g.sinogram_shape)
    target = rng.random((1, 1, T) + g.image_shape)

    def build():
        return ad.mse_loss(network.forward(params, y, g, training=True), target)

    # Channel-wide BN shifts cross ReLU kinks at coarser steps, so the
    # composed network uses a finer central-difference step.
    return ad.grad_check(build, params.parameters(), eps=1e-6,
                         max_points=1500, seed=0)


def cmd_gradcheck(args) -> int:
    results = {}
    with precision.double_precision():
        rng = np.random.default_rng(0)
        x = ad.parameter(rng.standard_normal((2, 2, 3, 5, 5)))
        w = ad.parameter(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
        b = ad.parameter(rng.standard_normal(3) * 0.1)
        tgt = rng.standard_normal((2, 3, 3, 5, 5))
        results["conv3d"] = ad.grad_check(
            lambda: ad.mse_loss(ad.conv3d(x, w, b), tgt), [x, w, b])

        st = ad.BatchNormState.create(3, np.float64)
        results["batch_norm"] = ad.grad_check(
            lambda: ad.mse_loss(ad.batch_norm(ad.conv3d(x, w, b), st, True), tgt),
            [x, w, b, st.gamma, st.beta])

        results["relu_add_concat"] = ad.grad_check(
            lambda: ad.mse_loss(
                ad.relu(ad.add(ad.concat_channels([x, x]),
                               ad.concat_channels([x, x]))),
                np.concatenate([tgt[:, :2], tgt[:, :2]], axis=1)), [x])

        g2 = projector.build_geometry(4, 8, 8)
        xs = ad.parameter(rng.standard_normal((1, 1, 2, 8, 8)))
        ts = rng.standard_normal((1, 1, 2, 4, 8))
        results["linear_operator"] = ad.grad_check(
            lambda: ad.mse_loss(ad.linear_operator(xs, g2, "forward"), ts), [xs])

        results[f"network_{args.scale}"] = _gradcheck_network(args.scale)

    worst = max(results.values())
    for name, err in results.items():
        print(f"{name}: max rel err {err:.3e}")
    print(f"overall max rel err {worst:.3e} "
          f"({'PASS' if worst < GRADCHECK_TOL else 'FAIL'} at {GRADCHECK_TOL})")
    return 0 if worst < GRADCHECK_TOL else 2


# ---------------------------------------------------------------------------
# parser / dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stpd", description="dynamic PET reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread cap (default: STPD_THREADS or 1)")

    p = sub.add_parser("simulate", help="render a phantom and simulate a scan")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a simulated scan")
    p.add_argument("--method", required=True,
                   choices=["mlem", "kemst", "stpdnet", "lpd"])
    p.add_argument("--input", required=True, help="scan directory")
    p.add_argument("--geom-config", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--model", default=None, help="checkpoint directory")
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("train", help="train the unrolled network")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/TAC report")
    p.add_argument("--truth", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--roi", default=None)
    p.add_argument("--report", required=True)
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--scale", choices=["tiny", "small"], default="tiny")
    add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    n_threads = args.threads
    if n_threads is None:
        n_threads = int(os.environ.get("STPD_THREADS", "1"))
    if n_threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1

    try:
        with threadpool_limits(limits=n_threads):
            return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
