"""End-to-end evaluation of one pre/post case.

load -> preprocess -> lung masks -> rigid -> exclusion -> deformable -> warp
-> difference -> render -> AES -> metrics

Each stage is a plain function so the CLI subcommands can run them one at a
time and reproduce the pipeline's artifacts exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .aes import AESParams, evaluate_case, hu_region_stats
from .deformable import DeformConfig, register_deformable
from .differencing import RenderConfig, difference, render_slices, write_slices
from .errors import AblateEvalError, NumericalError, ValidationError
from .io import file_sha256, load_volume, save_field, save_mask, save_volume, write_json
from .lungseg import LungSegConfig, apply_lung_mask, ingest_mask, segment_lung
from .metrics import compare, reports_json
from .rigid import RigidRegConfig, RigidTransform, apply_rigid, register_rigid
from .volume import DEFAULT_WINDOW, DisplacementField, GridMeta, Mask, Volume, crop_or_pad, normalize, resample
from .warp import CompositeTransform, apply_composite, warp_mask

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


@dataclass
class PipelineConfig:
    pre: str = ""
    post: str = ""
    pre_tumor: Optional[str] = None  # M_pre, preoperative frame
    treatment: Optional[str] = None  # B, postoperative frame
    pre_lung: Optional[str] = None  # segmented when absent
    post_lung: Optional[str] = None
    out_dir: str = "out"
    target_spacing: Optional[tuple] = (1.25, 1.25, 1.25)
    target_dims: Optional[tuple] = (256, 256, 256)
    window: tuple = DEFAULT_WINDOW
    mask_fill: float = -1000.0
    deformable: bool = True
    lungseg: LungSegConfig = field(default_factory=LungSegConfig)
    rigid: RigidRegConfig = field(default_factory=RigidRegConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    aes: AESParams = field(default_factory=AESParams)
    render: RenderConfig = field(default_factory=RenderConfig)

    def to_json(self) -> dict:
        return {
            "pre": self.pre, "post": self.post, "pre_tumor": self.pre_tumor, "treatment": self.treatment,
            "pre_lung": self.pre_lung, "post_lung": self.post_lung, "out_dir": self.out_dir,
            "target_spacing": None if self.target_spacing is None else list(self.target_spacing),
            "target_dims": None if self.target_dims is None else list(self.target_dims),
            "window": list(self.window), "mask_fill": self.mask_fill, "deformable": self.deformable,
            "lungseg": self.lungseg.to_json(), "rigid": self.rigid.to_json(),
            "deform": self.deform.to_json(), "aes": self.aes.to_json(), "render": self.render.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "lungseg" in d:
            d["lungseg"] = LungSegConfig(**d["lungseg"])
        if "rigid" in d:
            d["rigid"] = RigidRegConfig(**d["rigid"])
        if "deform" in d:
            d["deform"] = DeformConfig.from_json(d["deform"])
        if "aes" in d:
            d["aes"] = AESParams.from_json(d["aes"])
        if "render" in d:
            r = dict(d["render"])
            for k in ("gray_window", "tumor_color", "treatment_color"):
                if k in r:
                    r[k] = tuple(r[k])
            d["render"] = RenderConfig(**r)
        for k in ("target_spacing", "target_dims", "window"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ValidationError(f"cannot read pipeline config {path}: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


# ----------------------------------------------------------------------------
# Stages shared with the CLI


def preprocess(vol, spacing=None, dims=None, fill: float = -1000.0):
    """Resample to ``spacing`` then centre-crop/pad to ``dims``; masks use nearest neighbour."""
    is_mask = isinstance(vol, Mask)
    if spacing is not None:
        vol = resample(vol, spacing, mode="nearest" if is_mask else "trilinear")
    if dims is not None:
        vol = crop_or_pad(vol, dims, fill=0 if is_mask else fill)
    return vol


def on_grid(item, grid: GridMeta):
    """Relabel an array that already has ``grid``'s dims and spacing onto ``grid``."""
    if item is None or item.grid == grid:
        return item
    if item.grid.dims != grid.dims or not np.allclose(item.grid.spacing, grid.spacing):
        raise ValidationError(f"grid {item.grid.dims}@{item.grid.spacing} cannot be matched to "
                              f"{grid.dims}@{grid.spacing}; set target_dims/target_spacing")
    if isinstance(item, Mask):
        return Mask(item.data, grid)
    return Volume(item.data, grid, item.unit)


def masked_normalized(vol: Volume, lung: Mask, window=DEFAULT_WINDOW, fill: float = -1000.0) -> Volume:
    return normalize(apply_lung_mask(vol, lung, fill), window)


def rigid_stage(pre: Volume, post: Volume, pre_lung: Mask, post_lung: Mask,
                cfg: RigidRegConfig, window=DEFAULT_WINDOW, fill: float = -1000.0) -> RigidTransform:
    region = Mask(pre_lung.data | post_lung.data, post.grid)
    return register_rigid(masked_normalized(pre, pre_lung, window, fill),
                          masked_normalized(post, post_lung, window, fill), cfg, region)


def deform_stage(pre: Volume, post: Volume, pre_lung: Mask, post_lung: Mask, rigid: RigidTransform,
                 pre_tumor: Optional[Mask], treatment: Optional[Mask], cfg: DeformConfig,
                 window=DEFAULT_WINDOW, fill: float = -1000.0):
    """Deformable refinement of the rigidly aligned, lung-masked images.

    Tumor (moving side) and treatment zone (fixed side) are excluded from the
    similarity term. Returns ``(field, report)``.
    """
    # resample first and mask afterwards so both images carry a sharp lung edge
    moving = masked_normalized(apply_rigid(pre, rigid, oob=fill), apply_rigid(pre_lung, rigid), window, fill)
    fixed = masked_normalized(post, post_lung, window, fill)
    excl_m = None if pre_tumor is None else apply_rigid(pre_tumor, rigid)
    res = register_deformable(moving, fixed, excl_m, treatment, cfg, return_result=True)
    return res.field, res.report


def warp_stage(vol, rigid: RigidTransform, field):
    T = CompositeTransform(rigid, field)
    if isinstance(vol, Mask):
        return warp_mask(vol, T)
    return apply_composite(vol, T, oob=-1000.0 if vol.unit == "HU" else None)


# ----------------------------------------------------------------------------
# Driver


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.exc = exc


def versions() -> dict:
    import nibabel
    import numba
    import scipy
    return {"ablate_eval": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "nibabel": nibabel.__version__, "numba": numba.__version__}


@dataclass
class PipelineResult:
    exit_code: int
    manifest: dict
    aes: Optional[dict] = None
    metrics: Optional[dict] = None
    error: Optional[str] = None


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run every stage, writing artifacts to ``cfg.out_dir`` as they are produced.

    Exit codes: 0 success, 2 validation error (bad inputs/config, missing masks,
    no lung found), 3 numerical failure. Artifacts written before a failure are
    kept and listed in the manifest.
    """
    out = Path(cfg.out_dir)
    timings: dict = {}
    artifacts: dict = {}
    manifest = {"config": cfg.to_json(), "config_sha256": cfg.digest(), "versions": versions(),
                "timings_s": timings, "artifacts": artifacts, "inputs": {}, "warnings": []}
    result = PipelineResult(EXIT_OK, manifest)

    @contextmanager
    def stage(name):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (AblateEvalError, ValueError, OSError, ArithmeticError) as exc:
            raise StageError(name, exc) from exc
        finally:
            timings[name] = round(time.perf_counter() - t0, 3)

    def emit(key, rel, writer, *args):
        p = out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        writer(*args, p)
        artifacts[key] = rel

    try:
        with stage("validate"):
            out.mkdir(parents=True, exist_ok=True)
            missing = [k for k in ("pre_tumor", "treatment") if not getattr(cfg, k)]
            if missing:
                raise ValidationError("tumor (pre_tumor) and treatment masks are required for AES: "
                                      f"missing {', '.join(missing)}")
            for k in ("pre", "post", "pre_tumor", "treatment", "pre_lung", "post_lung"):
                p = getattr(cfg, k)
                if p:
                    if not Path(p).exists():
                        raise ValidationError(f"{k}: {p} does not exist")
                    manifest["inputs"][k] = {"path": str(p), "sha256": file_sha256(p)}

        with stage("load"):
            pre_raw = load_volume(cfg.pre)
            post_raw = load_volume(cfg.post)
        with stage("preprocess"):
            post = preprocess(post_raw, cfg.target_spacing, cfg.target_dims, cfg.mask_fill)
            pre = on_grid(preprocess(pre_raw, cfg.target_spacing, cfg.target_dims, cfg.mask_fill), post.grid)
            if pre_raw.grid != pre.grid:
                manifest["warnings"].append("preoperative volume relabelled onto the postoperative grid")

        def ingest(path, raw_grid):
            m = ingest_mask(path, raw_grid, manifest)
            return on_grid(preprocess(m, cfg.target_spacing, cfg.target_dims), post.grid)

        with stage("masks"):
            pre_lung = ingest(cfg.pre_lung, pre_raw.grid) if cfg.pre_lung else segment_lung(pre, cfg.lungseg)
            post_lung = ingest(cfg.post_lung, post_raw.grid) if cfg.post_lung else segment_lung(post, cfg.lungseg)
            tumor = ingest(cfg.pre_tumor, pre_raw.grid)
            treatment = ingest(cfg.treatment, post_raw.grid)
            if tumor.count == 0:
                raise ValidationError("tumor mask is empty")
            emit("pre_lung", "masks/pre_lung.nii", save_mask, pre_lung)
            emit("post_lung", "masks/post_lung.nii", save_mask, post_lung)

        with stage("rigid"):
            T1 = rigid_stage(pre, post, pre_lung, post_lung, cfg.rigid, cfg.window, cfg.mask_fill)
            emit("rigid", "rigid.json", lambda t, p: t.save(p), T1)
        with stage("deformable"):
            if cfg.deformable:
                field, dreport = deform_stage(pre, post, pre_lung, post_lung, T1, tumor,
                                              treatment, cfg.deform, cfg.window, cfg.mask_fill)
            else:
                field, dreport = DisplacementField.zeros(post.grid), {"levels": []}
            emit("field", "field.raw", save_field, field)
            manifest["deformable"] = dreport
        with stage("warp"):
            registered = warp_stage(pre, T1, field)
            tumor_reg = warp_stage(tumor, T1, field)
            lung_reg = warp_stage(pre_lung, T1, field)
            emit("registered_pre", "registered_pre.nii", save_volume, registered)
            emit("tumor_registered", "masks/tumor_registered.nii", save_mask, tumor_reg)
        with stage("difference"):
            diff = difference(post, registered)
            emit("difference", "difference.nii", save_volume, diff)
        with stage("render"):
            images = render_slices(diff, post, tumor_reg, treatment, cfg.render)
            index = write_slices(images, out / "png", cfg.render)
            artifacts["png_index"] = "png/index.json"
            artifacts["png"] = [f"png/{s['file']}" for s in index["slices"]]
        with stage("aes"):
            inputs = {k: v for k, v in manifest["inputs"].items()}
            inputs["rigid"] = {"path": "rigid.json", "sha256": file_sha256(out / "rigid.json")}
            inputs["field"] = {"path": "field.raw", "sha256": file_sha256(out / "field.raw")}
            inputs["config_sha256"] = manifest["config_sha256"]
            report = evaluate_case(tumor_reg, treatment, cfg.aes, inputs)
            if tumor_reg.count == 0:
                raise NumericalError("registered tumor mask vanished")
            aes_json = report.to_json()
            if treatment.count and (treatment.data & ~tumor_reg.data).any():
                aes_json["hu_stats"] = hu_region_stats(registered, post, tumor_reg, treatment).to_json()
            emit("aes", "aes_report.json", write_json, aes_json)
            result.aes = aes_json
        with stage("metrics"):
            rigid_only = apply_rigid(pre, T1, oob=-1000.0)
            stages = {
                "no_registration": compare(pre, post, pre_lung, post_lung),
                "rigid": compare(rigid_only, post, apply_rigid(pre_lung, T1), post_lung),
                "rigid_deformable": compare(registered, post, lung_reg, post_lung),
            }
            metrics_json = {k: reports_json(v) for k, v in stages.items()}
            emit("metrics", "metrics.json", write_json, metrics_json)
            result.metrics = metrics_json
    except StageError as err:
        exc = err.exc
        if isinstance(exc, NumericalError) or (isinstance(exc, ArithmeticError) and not isinstance(exc, ValueError)):
            result.exit_code = EXIT_NUMERIC
        else:
            result.exit_code = EXIT_VALIDATION
        result.error = str(err)
        manifest["error"] = {"stage": err.stage, "message": str(exc), "type": type(exc).__name__}
        log.error("%s", err)

    manifest["exit_code"] = result.exit_code
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_json(manifest, out / "manifest.json")
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
    return result
