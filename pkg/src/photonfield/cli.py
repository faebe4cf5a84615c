"""``photonfield`` command-line tool.

Commands read one YAML config and write artifacts into the output directory::

    synth    volume.raw + volume.meta
    trace    photons.pfm + trace.json
    train    field.ckpt + train_log.csv + train.json
    render   render_<backend>.ppm (+ .f32 sidecar) + render.json
    compare  compare.json (metrics between two images)
    bench    bench.json + a console table

Reports keep deterministic results under ``metrics`` and wall-clock data
under ``timing``/``meta`` so repeated runs can be diffed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

COMMANDS = ("synth", "trace", "train", "render", "compare", "bench")


def _set_threads(n):
    # must run before numba spins up its pool; BLAS stays single-threaded so
    # numpy reductions do not depend on the worker count
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")
    if n is not None:
        if n < 1:
            raise SystemExit("photonfield: error: --threads must be >= 1")
        if "numba" not in sys.modules:
            cur = int(os.environ.get("NUMBA_NUM_THREADS", "0") or 0)
            os.environ["NUMBA_NUM_THREADS"] = str(max(cur, n))
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _meta(args):
    import numba

    return {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "threads": numba.get_num_threads(),
            "command": args.command}


def _table(rows):
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"  {k:<{width}}  {v}" for k, v in rows)


# commands ---------------------------------------------------------------------------


def cmd_synth(cfg, out, args):
    from . import synth
    from .volume import save_raw

    s = cfg.scene.synthetic
    kind = args.kind or s.kind
    dims = tuple(args.dims) if args.dims else tuple(s.dims)
    params = dict(s.params)
    if kind in ("turbulence", "vortices"):
        params.setdefault("seed", cfg.seed)
    grid = synth.generate(kind, dims, **params)
    path = out / "volume.raw"
    save_raw(grid, path)
    occ = float((grid.data > 0.5).mean())
    print(f"wrote {path} ({kind}, dims {dims}, occupied fraction {occ:.4f})")
    return {"metrics": {"kind": kind, "dims": list(dims), "occupied_fraction": occ}}


def _photons_path(out):
    return out / "photons.pfm"


def cmd_trace(cfg, out, args):
    from .config import sub_seed
    from .photons import save_photons, trace_photons

    scene = cfg.build_scene()
    tcfg = cfg.trace_config(seed=sub_seed(cfg.seed, "trace"))
    t0 = time.perf_counter()
    photons = trace_photons(scene.medium, scene.lights, tcfg)
    dt = time.perf_counter() - t0
    save_photons(photons, _photons_path(out))
    st = photons.stats
    emitted = st["emitted_counts"].sum(axis=0).tolist()
    rep = {"metrics": {"n_emitted": tcfg.n_total, "n_deposited": len(photons), "emitted_per_phase": emitted,
                       "phase_set": list(tcfg.phase_set)},
           "timing": {"trace": dt}}
    print(f"traced {tcfg.n_total} photons, {len(photons)} deposits in {dt:.2f} s -> {_photons_path(out)}")
    print(_table([(f"g={g:+.2f}", f"{n} emitted") for g, n in zip(tcfg.phase_set, emitted)]))
    return rep


def _load_map(out):
    from .photon_map import PhotonMap
    from .photons import load_photons

    p = _photons_path(out)
    if not p.exists():
        raise FileNotFoundError(f"photon map not found: {p} (run 'photonfield trace' first)")
    return PhotonMap(load_photons(p))


def cmd_train(cfg, out, args):
    from .config import sub_seed
    from .neural_field import PhotonField, save_checkpoint
    from .trainer import train

    pmap = _load_map(out)
    pos, dirc, mlp = cfg.grid_configs()
    seed = sub_seed(cfg.seed, "train")
    tcfg = cfg.train_config(seed=seed)
    field = PhotonField.create(pos, dirc, mlp, seed=seed, psi=tcfg.psi, phase_set=tcfg.phase_set)
    res = train(field, pmap, tcfg, log_path=out / "train_log.csv")
    save_checkpoint(field, out / "field.ckpt", res.adam)
    final = float(res.loss_history[-1])
    print(f"trained {tcfg.total_steps} steps, final loss {final:.6g} -> {out / 'field.ckpt'}")
    print(_table([(k, f"{v:.3f} s") for k, v in res.timing.items()]))
    return {"metrics": {"final_loss": final, "clamp_rate": res.clamp_rate, "n_params": field.n_params},
            "timing": res.timing}


def _render_backends(cfg, out, backends, want_timing=False):
    from .config import sub_seed
    from .estimator import EncodingConfig
    from .imaging import write_image
    from .neural_field import load_checkpoint
    from .render import render_neural, render_path_traced, render_photon_map, render_ray_march

    scene = cfg.build_scene()
    cam = cfg.camera()
    r = cfg.render
    seed = sub_seed(cfg.seed, "render")
    images, timing = {}, {}
    for b in backends:
        t0 = time.perf_counter()
        if b == "neural":
            ck = out / "field.ckpt"
            if not ck.exists():
                raise FileNotFoundError(f"checkpoint not found: {ck} (run 'photonfield train' first)")
            field, _ = load_checkpoint(ck)
            fb = render_neural(scene, field, EncodingConfig(field.psi), cam, r.spp, seed, r.g, r.n_trials)
        elif b == "photon_map":
            fb = render_photon_map(scene, _load_map(out), cam, r.spp, r.K, r.r_max, r.g, seed, r.n_trials)
        elif b == "path":
            fb = render_path_traced(scene, cam, r.spp, r.max_bounces, seed, r.g, r.n_trials)
        else:
            fb = render_ray_march(scene, cam, r.step_size)
        timing[b] = time.perf_counter() - t0
        path = out / f"render_{b}.ppm"
        write_image(fb.image, path, gamma=r.gamma)
        images[b] = fb.image.astype("float32")
        print(f"rendered {b} in {timing[b]:.2f} s -> {path}")
    return images, timing


def cmd_render(cfg, out, args):
    import hashlib

    from .imaging import mse, ssim

    backends = args.backend or list(cfg.render.backends)
    images, timing = _render_backends(cfg, out, backends)
    metrics = {f"{b}_sha256": hashlib.sha256(img.astype("<f4").tobytes()).hexdigest() for b, img in images.items()}
    metrics.update({f"{b}_mean": float(img.mean()) for b, img in images.items()})
    if "neural" in images and "photon_map" in images:
        metrics["ssim_neural_vs_photon_map"] = ssim(images["neural"], images["photon_map"])
        metrics["mse_neural_vs_photon_map"] = mse(images["neural"], images["photon_map"])
    return {"metrics": metrics, "timing": timing}


def cmd_compare(cfg, out, args):
    from .imaging import mse, read_image, rse, ssim

    if args.images:
        if len(args.images) != 2:
            raise ValueError("compare takes exactly two image paths")
        pa, pb = args.images
    else:
        pa, pb = out / "render_neural.ppm", out / "render_photon_map.ppm"
    a, b = read_image(pa), read_image(pb)
    m = {"a": str(pa), "b": str(pb), "mse": mse(a, b), "ssim": ssim(a, b), "mean_rse": float(rse(a, b).mean())}
    print(_table([(k, f"{v:.6g}") for k, v in m.items() if isinstance(v, float)]))
    return {"metrics": m}


def cmd_bench(cfg, out, args):
    rep_t = cmd_trace(cfg, out, args)
    rep_tr = cmd_train(cfg, out, args)
    backends = ["neural", "photon_map", "path", "ray_march"]
    _, timing = _render_backends(cfg, out, backends)
    rows = [("trace", rep_t["timing"]["trace"]), ("train (knn)", rep_tr["timing"]["knn_time"]),
            ("train (optimizer)", rep_tr["timing"]["step_time"])]
    rows += [(f"render {b}", t) for b, t in timing.items()]
    print(_table([(k, f"{v:9.3f} s") for k, v in rows]))
    return {"metrics": {"final_loss": rep_tr["metrics"]["final_loss"]},
            "timing": {"trace": rep_t["timing"]["trace"], "train": rep_tr["timing"],
                       "render": timing}}


HANDLERS = {"synth": cmd_synth, "trace": cmd_trace, "train": cmd_train, "render": cmd_render,
            "compare": cmd_compare, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="photonfield", description="Neural photon field pipeline.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("images", nargs="*", help="compare: two image paths (default: neural vs photon map)")
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="cap on worker threads")
    p.add_argument("--out", help="output directory (default: config 'output')")
    p.add_argument("--kind", help="synth: generator kind override")
    p.add_argument("--dims", type=int, nargs=3, help="synth: grid dims override")
    p.add_argument("--backend", action="append", help="render: backend(s) override")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    from pathlib import Path

    from .photons import InvalidConfigError
    from .trainer import TrainingDivergedError
    from .volume import InvalidInputError
    from .config import ExperimentConfig

    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out) if args.out else cfg.resolve(cfg.output, Path(args.config).parent)
        out.mkdir(parents=True, exist_ok=True)
        report = HANDLERS[args.command](cfg, out, args)
        report["meta"] = _meta(args)
        report["seed"] = cfg.seed
        _write_json(out / f"{args.command}.json", report)
    except (InvalidConfigError, InvalidInputError, TrainingDivergedError, FileNotFoundError, OSError,
            ValueError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"photonfield: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
