"""Command line entry point: ``ablate-eval <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .aes import AESParams, evaluate_case
from .deformable import DeformConfig
from .differencing import RenderConfig, difference, render_slices, write_slices
from .errors import AblateEvalError, NumericalError
from .io import load_field, load_mask, load_volume, save_field, save_mask, save_volume, write_json
from .lungseg import LungSegConfig, segment_lung
from .metrics import compare, reports_json
from .rigid import RigidRegConfig, RigidTransform

log = logging.getLogger("ablate_eval")


def _json_arg(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _print(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _lung(vol, path, cfg=None):
    return load_mask(path) if path else segment_lung(vol, cfg or LungSegConfig())


# ----------------------------------------------------------------------------
# subcommands


def cmd_phantom(a):
    from .phantom import PhantomConfig, make_case

    cfg = PhantomConfig(seed=a.seed, dims=(a.dims,) * 3, spacing=(a.spacing,) * 3)
    case = make_case(cfg, peak_mm=a.peak_mm, rigid_pose=a.rigid_pose, zone_radius=a.zone_radius,
                     zone_offset_mm=a.zone_offset, ablation=not a.no_ablation)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(case.pre, out / "pre.nii")
    save_volume(case.post, out / "post.nii")
    for name in ("pre_lung", "post_lung", "pre_tumor", "post_tumor", "treatment"):
        save_mask(getattr(case, name), out / f"{name}.nii")
    save_field(case.field_truth, out / "field_truth.raw")
    case.rigid_truth.save(out / "rigid_truth.json")
    write_json({"config": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()},
                "peak_mm": a.peak_mm, "rigid_pose": list(a.rigid_pose), "zone_radius": a.zone_radius,
                "zone_offset_mm": list(a.zone_offset), "ablation": not a.no_ablation,
                "files": sorted(p.name for p in out.iterdir())}, out / "manifest.json")
    return 0


def cmd_segment_lung(a):
    cfg = LungSegConfig(air_threshold=a.threshold, min_component_volume=a.min_volume,
                        closing_radius=a.closing_radius, fill_holes=not a.no_fill_holes)
    m = segment_lung(load_volume(a.input), cfg)
    save_mask(m, a.out)
    return 0


def cmd_register_rigid(a):
    cfg = RigidRegConfig(**_json_arg(a.config))
    moving, fixed = load_volume(a.moving), load_volume(a.fixed)
    T = pl.rigid_stage(moving, fixed, _lung(moving, a.moving_lung), _lung(fixed, a.fixed_lung), cfg)
    T.save(a.out)
    _print({"ncc": T.meta.get("ncc"), "ncc_identity": T.meta.get("ncc_identity"), "transform": T.to_json()})
    return 0


def cmd_register_deform(a):
    cfg = DeformConfig.from_json(_json_arg(a.config))
    if a.alpha is not None:
        cfg.alpha = a.alpha
    moving, fixed = load_volume(a.moving), load_volume(a.fixed)
    T1 = RigidTransform.load(a.rigid) if a.rigid else RigidTransform.identity(fixed.grid.center)
    excl_m = load_mask(a.exclude_moving) if a.exclude_moving else None
    excl_f = load_mask(a.exclude_fixed) if a.exclude_fixed else None
    field, report = pl.deform_stage(moving, fixed, _lung(moving, a.moving_lung), _lung(fixed, a.fixed_lung),
                                    T1, excl_m, excl_f, cfg)
    save_field(field, a.out)
    if a.report:
        write_json(report, a.report)
    _print(report)
    return 0


def cmd_warp(a):
    T1 = RigidTransform.load(a.rigid) if a.rigid else None
    if a.mask:
        item = load_mask(a.input)
    else:
        item = load_volume(a.input)
    field = load_field(a.field)
    if T1 is None:
        T1 = RigidTransform.identity(field.grid.center)
    out = pl.warp_stage(item, T1, field)
    (save_mask if a.mask else save_volume)(out, a.out)
    return 0


def cmd_diff(a):
    post = load_volume(a.post)
    d = difference(post, load_volume(a.registered))
    save_volume(d, a.out)
    if a.render_dir:
        cfg = RenderConfig(diff_window=a.diff_window, slice_axis=a.axis, case=a.case)
        tumor = load_mask(a.tumor) if a.tumor else None
        treat = load_mask(a.treatment) if a.treatment else None
        write_slices(render_slices(d, post, tumor, treat, cfg), a.render_dir, cfg)
    return 0


def cmd_aes(a):
    params = AESParams(margin_mm=a.margin)
    report = evaluate_case(load_mask(a.tumor), load_mask(a.treatment), params,
                           {"tumor": a.tumor, "treatment": a.treatment})
    js = report.to_json()
    if a.out:
        write_json(js, a.out)
    _print(js)
    return 0


def cmd_metrics(a):
    va, vb = load_volume(a.a), load_volume(a.b)
    la = load_mask(a.a_lung) if a.a_lung else None
    lb = load_mask(a.b_lung) if a.b_lung else None
    _print(reports_json(compare(va, vb, la, lb)))
    return 0


def cmd_pipeline(a):
    cfg = pl.PipelineConfig.load(a.config)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    res = pl.run_pipeline(cfg)
    if res.error:
        sys.stderr.write(res.error + "\n")
    else:
        _print({"aes": res.aes, "out_dir": cfg.out_dir})
    return res.exit_code


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ablate-eval", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a synthetic pre/post case")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", type=int, default=96)
    s.add_argument("--spacing", type=float, default=1.25)
    s.add_argument("--peak-mm", type=float, default=8.0)
    s.add_argument("--rigid-pose", type=float, nargs=6, default=[0.0] * 6,
                   metavar=("RX", "RY", "RZ", "TX", "TY", "TZ"), help="radians and mm")
    s.add_argument("--zone-radius", type=float, default=None)
    s.add_argument("--zone-offset", type=float, nargs=3, default=[0.0] * 3)
    s.add_argument("--no-ablation", action="store_true")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("segment-lung", help="threshold/morphology lung mask")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=-320.0)
    s.add_argument("--min-volume", type=float, default=50_000.0)
    s.add_argument("--closing-radius", type=float, default=3.0)
    s.add_argument("--no-fill-holes", action="store_true")
    s.set_defaults(func=cmd_segment_lung)

    s = sub.add_parser("register-rigid", help="NCC rigid alignment of masked lungs")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--moving-lung")
    s.add_argument("--fixed-lung")
    s.add_argument("--config", help="JSON with rigid registration settings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_register_rigid)

    s = sub.add_parser("register-deform", help="discrete deformable registration")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--rigid")
    s.add_argument("--moving-lung")
    s.add_argument("--fixed-lung")
    s.add_argument("--exclude-moving", help="tumor mask in the moving frame")
    s.add_argument("--exclude-fixed", help="treatment mask in the fixed frame")
    s.add_argument("--config", help="JSON with deformable registration settings")
    s.add_argument("--alpha", type=float)
    s.add_argument("--report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_register_deform)

    s = sub.add_parser("warp", help="apply rigid + field in one resampling pass")
    s.add_argument("--input", required=True)
    s.add_argument("--rigid")
    s.add_argument("--field", required=True)
    s.add_argument("--mask", action="store_true", help="input is a binary mask (nearest neighbour)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("diff", help="post minus registered pre, optional HSV rendering")
    s.add_argument("--post", required=True)
    s.add_argument("--registered", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--render-dir")
    s.add_argument("--tumor")
    s.add_argument("--treatment")
    s.add_argument("--diff-window", type=float, default=400.0)
    s.add_argument("--axis", default="axial", choices=["axial", "coronal", "sagittal"])
    s.add_argument("--case", default="case")
    s.set_defaults(func=cmd_diff)

    s = sub.add_parser("aes", help="ablation effectiveness score")
    s.add_argument("--tumor", required=True, help="registered tumor mask")
    s.add_argument("--treatment", required=True)
    s.add_argument("--margin", type=float, default=5.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_aes)

    s = sub.add_parser("metrics", help="NCC / SSIM / RMSE / Dice")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--a-lung")
    s.add_argument("--b-lung")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("pipeline", help="run every stage from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return pl.EXIT_NUMERIC
    except (AblateEvalError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return pl.EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
