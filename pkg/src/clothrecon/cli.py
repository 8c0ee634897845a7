"""Command-line entry points: generate, reconstruct, evaluate, replay, gradcheck, render-depth."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("clothrecon")


def _set_threads(n: int):
    # must run before the first JAX computation; numpy's BLAS picks these up only if not yet loaded
    flags = os.environ.get("XLA_FLAGS", "")
    if "intra_op_parallelism_threads" not in flags:
        flags += f" --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
    os.environ["XLA_FLAGS"] = flags.strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(path) -> dict:
    from .io import load_yaml

    return load_yaml(path) if path else {}


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise SystemExit(f"config section {name!r} must be a mapping")
    return sec


def _optim_config(cfg: dict, ablation: str | None):
    from .io import _build
    from .optimizer import OptimConfig

    d = dict(_section(cfg, "optim"))
    base = _build(OptimConfig, d, "<config optim>")
    if ablation:
        d = {k: v for k, v in d.items()
             if k not in ("no_correctives", "no_adaptive", "no_silhouette", "only_correctives")}
        return OptimConfig.for_ablation(ablation, **d)
    return base


def _override(obj, **kw):
    """Copy of a dataclass with the non-None keyword values replaced."""
    kw = {k: v for k, v in kw.items() if v is not None}
    return dataclasses.replace(obj, **kw) if kw else obj


def _texture(bundle, source: str):
    from .softrender import acquire_texture

    if source == "bundle":
        return bundle.texture
    if source == "frame1":
        first = bundle.observations[0]
        return acquire_texture(first.image, bundle.template, bundle.camera, size=bundle.texture.image.shape[:2])
    raise SystemExit(f"unknown texture_source {source!r}; use 'bundle' or 'frame1'")


def cmd_generate(args, cfg, manifest):
    from .io import background_plate, generate_synthetic, procedural_texture, render_config_from_dict
    from .io import scene_from_config
    from .softrender import RenderConfig

    scene = dict(_section(cfg, "scene"))
    template, params, sim, camera = scene_from_config(scene)
    tex_seed = scene.get("texture_seed", args.seed)
    texture = procedural_texture(seed=tex_seed)
    bg = background_plate(camera.height, camera.width, seed=args.seed + 1) if scene.get("background") else None
    render = render_config_from_dict(_section(cfg, "render")) if "render" in cfg else RenderConfig()
    bundle = generate_synthetic(template, params, sim, camera, params.n_frames, args.out, texture, bg, render)
    manifest.finish(n_frames=bundle.n_frames)
    manifest.write(args.out)
    print(f"wrote {bundle.n_frames} frames to {args.out}")
    return 0


def cmd_reconstruct(args, cfg, manifest):
    from .io import load_scene, save_params, sim_config_from_dict, sim_config_to_dict, write_png, write_states
    from .optimizer import reconstruct
    from .softrender import rasterize, render_depth

    bundle = load_scene(args.scene)
    sim = bundle.sim_config
    if "sim" in cfg:
        sim = sim_config_from_dict({**sim_config_to_dict(sim), **_section(cfg, "sim")})
    optim = _override(_optim_config(cfg, args.ablation), sigma=args.sigma, global_max_iters=args.max_iters)
    render = _override(bundle.render_config, sigma=args.render_sigma, gamma=args.gamma)
    texture = _texture(bundle, cfg.get("texture_source", "bundle"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = reconstruct(bundle.template, bundle.observation_dict(), bundle.camera, sim, optim, texture=texture,
                      render_config=render, log_path=out / "energy.jsonl")
    save_params(out, res.params)
    write_states(out / "meshes", res.states, bundle.template)
    (out / "depth").mkdir(exist_ok=True)
    for s in res.states:
        r = rasterize(s, bundle.template, texture, bundle.camera, render)
        write_png(out / "renders" / f"render_{s.time_index:04d}.png", r.color * r.alpha[..., None])
        depth = render_depth(s, bundle.template, bundle.camera)
        np.save(out / "depth" / f"depth_{s.time_index:04d}.npy", depth)
    manifest.finish(iterations=len(res.history), status=res.status, final_energy=res.history[-1].energy,
                    events=[list(e) for e in res.adaptive.events], threshold=res.adaptive.b)
    manifest.write(out)
    print(f"{len(res.history)} iterations, status {res.status}, wind {np.round(res.params.wind, 4).tolist()}")
    return 0


def cmd_evaluate(args, cfg, manifest):
    from .evaluation import evaluate_sequence, sample_surface
    from .io import load_scene, read_states

    bundle = load_scene(args.scene)
    if bundle.ground_truth is None:
        raise SystemExit(f"{args.scene} has no ground_truth/ directory")
    ev = _section(cfg, "evaluation")
    samples = int(ev.get("samples", args.samples))
    rng = np.random.default_rng(args.seed)
    refs = [sample_surface(x, bundle.template.faces, samples, rng) for x in bundle.ground_truth]
    states = read_states(Path(args.recon) / "meshes", bundle.template)
    result = evaluate_sequence(states, bundle.template, refs, samples, seed=args.seed)
    baseline = evaluate_sequence([bundle.template.vertices] * len(refs), bundle.template, refs, samples,
                                 seed=args.seed)
    out = Path(args.out or args.recon)
    result.write_csv(out / "chamfer.csv")
    manifest.finish(mean_chamfer=result.mean, baseline=baseline.mean)
    manifest.write(out)
    print(f"mean chamfer x1e4: {result.mean_scaled:.4f}  static baseline x1e4: {baseline.mean_scaled:.4f}  "
          f"ratio {result.mean / baseline.mean:.4f}")
    return 0


def _parse_edit(text: str):
    key, sep, val = text.partition("=")
    if not sep:
        raise SystemExit(f"edit {text!r} must look like key=value")
    vals = [float(v) for v in val.split(",")]
    return key.strip(), vals[0] if len(vals) == 1 else vals


def cmd_replay(args, cfg, manifest):
    from .io import load_params, load_scene, replay_with_edits, write_png, write_states

    bundle = load_scene(args.scene)
    params = load_params(args.recon)
    edits = dict(_parse_edit(e) for e in args.edit)
    edits.update(_section(cfg, "edits"))
    states, renders = replay_with_edits(params, edits, bundle.template, bundle.sim_config, bundle.n_frames,
                                        bundle.camera, bundle.texture, bundle.render_config)
    out = Path(args.out)
    write_states(out / "meshes", states, bundle.template)
    for s, r in zip(states, renders):
        write_png(out / "renders" / f"render_{s.time_index:04d}.png", r.color * r.alpha[..., None])
    manifest.finish(edits={k: v for k, v in edits.items()})
    manifest.write(out)
    print(f"replayed {len(states)} frames with edits {sorted(edits)}")
    return 0


def cmd_gradcheck(args, cfg, manifest):
    from .adjoint import gradcheck_scene, gradient_check

    template, params, sim, start, loss = gradcheck_scene(args.seed, args.grid, args.frames)
    rep = gradient_check(template, params, sim, args.frames, loss, start=start)
    print(f"{int(rep.passed.sum())}/{len(rep.passed)} components within tolerance "
          f"({100 * rep.fraction:.1f}%), worst rel. err {rep.rel_err.max():.3g}, {rep.seconds:.1f} s")
    return 0 if rep.fraction >= 0.95 else 1


def cmd_render_depth(args, cfg, manifest):
    from .io import load_scene, read_states, write_png
    from .softrender import render_depth

    bundle = load_scene(args.scene)
    if args.meshes:
        states = read_states(args.meshes, bundle.template)
    elif bundle.ground_truth is not None:
        from .geometry import SurfaceState

        states = [SurfaceState(x, np.zeros_like(x), t) for t, x in enumerate(bundle.ground_truth, start=1)]
    else:
        raise SystemExit("give --meshes or a scene with ground truth")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in states:
        d = render_depth(s, bundle.template, bundle.camera)
        np.save(out / f"depth_{s.time_index:04d}.npy", d)
        fin = np.isfinite(d)
        vis = np.zeros_like(d)
        if fin.any():
            lo, hi = d[fin].min(), d[fin].max()
            vis[fin] = 1.0 - (d[fin] - lo) / max(hi - lo, 1e-12)
        write_png(out / f"depth_{s.time_index:04d}.png", vis)
    manifest.finish(frames=len(states))
    manifest.write(out)
    print(f"wrote {len(states)} depth maps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clothrecon", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, "write a synthetic scene bundle")
    p.add_argument("--out", required=True)
    p = add("reconstruct", cmd_reconstruct, "recover physical parameters from a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=("full", "no_F", "no_adaptive", "no_Es", "only_F"))
    p.add_argument("--sigma", type=float, help="silhouette blur in pixels")
    p.add_argument("--render-sigma", type=float, help="soft-rasteriser sharpness (px^2)")
    p.add_argument("--gamma", type=float, help="depth-softmax temperature")
    p.add_argument("--max-iters", type=int, help="global iteration limit")
    p = add("evaluate", cmd_evaluate, "Chamfer distance of a reconstruction against ground truth")
    p.add_argument("--scene", "--ref", dest="scene", required=True, help="scene bundle with ground_truth/")
    p.add_argument("--recon", required=True)
    p.add_argument("--out")
    p.add_argument("--samples", type=int, default=10_000)
    p = add("replay", cmd_replay, "re-simulate recovered parameters with edits")
    p.add_argument("--scene", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--edit", action="append", default=[], help="e.g. wind=1,0,0 or bend_scale=2")
    p = add("gradcheck", cmd_gradcheck, "compare adjoint gradients with finite differences")
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--frames", type=int, default=3)
    p = add("render-depth", cmd_render_depth, "render depth maps of meshes")
    p.add_argument("--scene", required=True)
    p.add_argument("--meshes")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .errors import ClothReconError
    from .io import RunManifest

    try:
        cfg = _load_config(args.config)
        manifest = RunManifest(args.command, {**cfg, "argv": list(argv if argv is not None else sys.argv[1:])},
                               args.seed, args.threads)
        return args.func(args, cfg, manifest)
    except ClothReconError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
