"""Staged experiment orchestration.

Each stage writes its artifacts under `<out>/<stage>/` and records a
manifest entry (config hash, effective seed, input hashes, artifact
list, metrics). Re-running a completed stage with the same config and
inputs is a no-op; a config or input change against existing artifacts
raises StaleArtifactError unless forced. The global seed determines
every stage seed through a stage-name-keyed derivation, so two runs with
the same config produce bit-identical reports.
"""

import dataclasses
import hashlib
import json
import shutil
import time
from pathlib import Path

from . import intensity as intensity_mod
from . import registration as registration_mod
from . import segmentation as segmentation_mod
from . import vae as vae_mod
from .checkpoint import write_trace_csv
from .config import STAGES, ExperimentConfig
from .errors import ConfigError, DependencyError, StaleArtifactError
from .grids import LabelMap
from .metrics import DiceReport, evaluate, format_table_row
from .phantom import generate_population
from .seeding import derive_seed
from .storage import (
    load_displacement_field,
    load_intensity_field,
    load_label_map,
    load_volume,
    save_displacement_field,
    save_intensity_field,
    save_label_map,
    save_volume,
)
from .synthesis import AugmentationMode, sample_stream
from .warp import warp_nearest, warp_trilinear

ABLATION_VARIANTS = (
    "label-transfer",
    AugmentationMode.REG_SHAPE_ONLY.value,
    AugmentationMode.VAE_SHAPE_ONLY.value,
    AugmentationMode.REG_SHAPE_INTENSITY.value,
    AugmentationMode.VAE_SHAPE_INTENSITY.value,
)

_RELEVANT_SECTIONS = {
    "gen-data": ("data",),
    "register": ("registration",),
    "align-intensity": ("intensity",),
    "train-shape-vae": ("shape_vae",),
    "train-intensity-vae": ("intensity_vae",),
    "synthesize": ("synthesis",),
    "train-seg": ("segmentation", "synthesis"),
    "evaluate": ("segmentation",),
    "ablate": ("registration", "intensity", "shape_vae", "intensity_vae",
               "segmentation", "synthesis"),
}


def _hash_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()[:16]


def _hash_file(path: Path) -> str:
    return _hash_bytes(Path(path).read_bytes())


class Workspace:
    """Output directory plus the manifest that indexes it."""

    def __init__(self, out_root):
        self.root = Path(out_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def read_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"version": 1, "stages": {}}

    def write_record(self, record: dict):
        manifest = self.read_manifest()
        manifest["stages"][record["stage"]] = record
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def record(self, stage: str):
        return self.read_manifest()["stages"].get(stage)

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def artifacts_exist(self, record: dict) -> bool:
        return all((self.root / p).exists() for p in record["artifacts"])


def stage_seed(cfg: ExperimentConfig, stage: str, *extra) -> int:
    return derive_seed(cfg.seed, stage, *extra)


def config_hash(cfg: ExperimentConfig, stage: str) -> str:
    full = cfg.to_dict()
    subset = {name: full[name] for name in _RELEVANT_SECTIONS[stage] if name in full}
    subset["__seed"] = cfg.seed
    return _hash_bytes(json.dumps(subset, sort_keys=True).encode())


def _require(ws: Workspace, stage: str, dependency: str):
    record = ws.record(dependency)
    if record is None or not ws.artifacts_exist(record):
        raise DependencyError(
            f"stage '{stage}' needs artifacts from '{dependency}'; run it first",
            required_stage=dependency,
        )


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# --- population I/O ----------------------------------------------------


def _population_paths(pop_dir: Path, meta: dict):
    n = meta["split"]["unlabeled"]
    t = meta["split"]["test"]
    paths = {
        "atlas_volume": pop_dir / "atlas" / "volume.v3d",
        "atlas_labels": pop_dir / "atlas" / "labels.v3d",
        "unlabeled": [pop_dir / "unlabeled" / f"vol_{i:03d}.v3d" for i in range(n)],
        "test_volumes": [pop_dir / "test" / f"vol_{i:03d}.v3d" for i in range(t)],
        "test_labels": [pop_dir / "test" / f"lab_{i:03d}.v3d" for i in range(t)],
    }
    return paths


def load_population(ws: Workspace):
    """Load the gen-data artifacts: atlas pair, unlabeled volumes, test pairs."""
    pop_dir = ws.stage_dir("gen-data")
    meta = json.loads((pop_dir / "population.json").read_text())
    paths = _population_paths(pop_dir, meta)
    k = meta["num_regions"]
    atlas = load_volume(paths["atlas_volume"])
    atlas_labels = load_label_map(paths["atlas_labels"], k)
    unlabeled = [load_volume(p) for p in paths["unlabeled"]]
    test = [
        (load_volume(v), load_label_map(l, k))
        for v, l in zip(paths["test_volumes"], paths["test_labels"])
    ]
    return atlas, atlas_labels, unlabeled, test, meta


# --- stage implementations ---------------------------------------------


def _run_gen_data(cfg: ExperimentConfig, ws: Workspace):
    out = _fresh_dir(ws.stage_dir("gen-data"))
    data = cfg.data

    if data.population_dir is not None:
        src = Path(data.population_dir)
        meta_path = src / "population.json"
        if not meta_path.exists():
            raise ConfigError(f"population_dir {src} has no population.json")
        meta = json.loads(meta_path.read_text())
        src_paths = _population_paths(src, meta)
        written = []
        for key in ("atlas_volume", "atlas_labels"):
            dst = out / src_paths[key].relative_to(src)
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src_paths[key], dst)
            written.append(dst)
        for key in ("unlabeled", "test_volumes", "test_labels"):
            for p in src_paths[key]:
                dst = out / p.relative_to(src)
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(p, dst)
                written.append(dst)
        dst_meta = out / "population.json"
        shutil.copyfile(meta_path, dst_meta)
        written.append(dst_meta)
        return written, {"num_regions": meta["num_regions"], "copied_from": str(src)}

    spec = dataclasses.replace(
        data.phantom, seed=derive_seed(cfg.seed, "gen-data", data.phantom.seed)
    )
    count = 1 + data.num_unlabeled + data.num_test
    members = generate_population(spec, count)
    atlas_vol, atlas_lab = members[0]
    unlabeled = members[1 : 1 + data.num_unlabeled]
    test = members[1 + data.num_unlabeled :]

    (out / "atlas").mkdir()
    (out / "unlabeled").mkdir()
    (out / "test").mkdir()
    written = []

    def _emit(path, saver, obj):
        saver(obj, path)
        written.append(path)

    _emit(out / "atlas" / "volume.v3d", save_volume, atlas_vol)
    _emit(out / "atlas" / "labels.v3d", save_label_map, atlas_lab)
    for i, (vol, _lab) in enumerate(unlabeled):
        _emit(out / "unlabeled" / f"vol_{i:03d}.v3d", save_volume, vol)
    for i, (vol, lab) in enumerate(test):
        _emit(out / "test" / f"vol_{i:03d}.v3d", save_volume, vol)
        _emit(out / "test" / f"lab_{i:03d}.v3d", save_label_map, lab)

    meta = {
        "spec": dataclasses.asdict(spec),
        "num_regions": spec.num_regions,
        "split": {"atlas": 1, "unlabeled": data.num_unlabeled, "test": data.num_test},
        "config_seed": cfg.seed,
    }
    meta_path = out / "population.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written, {"num_regions": spec.num_regions, "members": count}


def _run_register(cfg: ExperimentConfig, ws: Workspace):
    _require(ws, "register", "gen-data")
    atlas, _labels, unlabeled, _test, _meta = load_population(ws)
    out = _fresh_dir(ws.stage_dir("register"))
    (out / "fields").mkdir()
    written = []

    fwd_cfg = dataclasses.replace(cfg.registration,
                                  seed=stage_seed(cfg, "register", "forward"))
    fwd_model, fwd_trace = registration_mod.train_registration(
        atlas, unlabeled, fwd_cfg, direction="forward")
    rev_cfg = dataclasses.replace(cfg.registration,
                                  seed=stage_seed(cfg, "register", "reverse"))
    rev_model, rev_trace = registration_mod.train_registration(
        atlas, unlabeled, rev_cfg, direction="reverse")

    registration_mod.save_model(fwd_model, out / "model_forward.ckpt")
    registration_mod.save_model(rev_model, out / "model_reverse.ckpt")
    written += [out / "model_forward.ckpt", out / "model_reverse.ckpt"]
    write_trace_csv(out / "trace_forward.csv", fwd_trace)
    write_trace_csv(out / "trace_reverse.csv", rev_trace)
    written += [out / "trace_forward.csv", out / "trace_reverse.csv"]

    for i, target in enumerate(unlabeled):
        s = registration_mod.predict_forward_field(fwd_model, atlas, target)
        r = registration_mod.predict_reverse_field(rev_model, target, atlas)
        save_displacement_field(s, out / "fields" / f"S_{i:03d}.v3d")
        save_displacement_field(r, out / "fields" / f"R_{i:03d}.v3d")
        written += [out / "fields" / f"S_{i:03d}.v3d", out / "fields" / f"R_{i:03d}.v3d"]

    metrics = {}
    if fwd_trace:
        metrics["final_forward_loss"] = fwd_trace[-1]
        metrics["final_reverse_loss"] = rev_trace[-1]
    return written, metrics


def _load_fields(ws: Workspace, prefix: str, count: int, loader, stage="register",
                 subdir="fields"):
    return [
        loader(ws.stage_dir(stage) / subdir / f"{prefix}_{i:03d}.v3d")
        for i in range(count)
    ]


def _run_align_intensity(cfg: ExperimentConfig, ws: Workspace):
    _require(ws, "align-intensity", "gen-data")
    _require(ws, "align-intensity", "register")
    atlas, atlas_labels, unlabeled, _test, meta = load_population(ws)
    n = meta["split"]["unlabeled"]
    forward_fields = _load_fields(ws, "S", n, load_displacement_field)
    reverse_fields = _load_fields(ws, "R", n, load_displacement_field)

    inverse_warped = [warp_trilinear(vol, rev)
                      for vol, rev in zip(unlabeled, reverse_fields)]
    contour = intensity_mod.contour_mask(atlas_labels, cfg.intensity.contour_dilation)

    out = _fresh_dir(ws.stage_dir("align-intensity"))
    (out / "fields").mkdir()
    written = []

    int_cfg = dataclasses.replace(cfg.intensity, seed=stage_seed(cfg, "align-intensity"))
    model, trace = intensity_mod.train_intensity(
        atlas, inverse_warped, forward_fields, unlabeled, contour, int_cfg)

    intensity_mod.save_model(model, out / "model.ckpt")
    written.append(out / "model.ckpt")
    write_trace_csv(out / "trace.csv", trace)
    written.append(out / "trace.csv")
    save_label_map(LabelMap(contour.mask.astype("int32"), 2), out / "contour.v3d")
    written.append(out / "contour.v3d")

    for i, inv in enumerate(inverse_warped):
        field = intensity_mod.predict_intensity_field(model, atlas, inv)
        save_intensity_field(field, out / "fields" / f"I_{i:03d}.v3d")
        written.append(out / "fields" / f"I_{i:03d}.v3d")

    metrics = {"final_loss": trace[-1]} if trace else {}
    return written, metrics


def _run_train_shape_vae(cfg: ExperimentConfig, ws: Workspace):
    _require(ws, "train-shape-vae", "gen-data")
    _require(ws, "train-shape-vae", "register")
    atlas, _labels, _unlabeled, _test, meta = load_population(ws)
    fields = _load_fields(ws, "S", meta["split"]["unlabeled"], load_displacement_field)

    out = _fresh_dir(ws.stage_dir("train-shape-vae"))
    vcfg = dataclasses.replace(cfg.shape_vae, seed=stage_seed(cfg, "train-shape-vae"))
    vae, trace = vae_mod.train_vae(fields, vcfg, atlas=atlas)
    vae_mod.save_vae(vae, out / "model.ckpt")
    write_trace_csv(out / "trace.csv", trace)
    metrics = {"final_loss": trace[-1]} if trace else {}
    return [out / "model.ckpt", out / "trace.csv"], metrics


def _run_train_intensity_vae(cfg: ExperimentConfig, ws: Workspace):
    _require(ws, "train-intensity-vae", "gen-data")
    _require(ws, "train-intensity-vae", "align-intensity")
    _atlas, _labels, _unlabeled, _test, meta = load_population(ws)
    fields = _load_fields(ws, "I", meta["split"]["unlabeled"], load_intensity_field,
                          stage="align-intensity")

    out = _fresh_dir(ws.stage_dir("train-intensity-vae"))
    vcfg = dataclasses.replace(cfg.intensity_vae,
                               seed=stage_seed(cfg, "train-intensity-vae"))
    vae, trace = vae_mod.train_vae(fields, vcfg)
    vae_mod.save_vae(vae, out / "model.ckpt")
    write_trace_csv(out / "trace.csv", trace)
    metrics = {"final_loss": trace[-1]} if trace else {}
    return [out / "model.ckpt", out / "trace.csv"], metrics


def _stream_dependencies(mode: AugmentationMode):
    deps = ["gen-data"]
    if mode.uses_vae:
        deps.append("train-shape-vae")
        if mode.uses_intensity:
            deps.append("train-intensity-vae")
    else:
        deps.append("register")
        if mode.uses_intensity:
            deps.append("align-intensity")
    return deps


def build_stream(cfg: ExperimentConfig, ws: Workspace, mode: AugmentationMode,
                 seed: int):
    """Construct the synthesis stream for a mode from stage artifacts."""
    atlas, atlas_labels, _unlabeled, _test, meta = load_population(ws)
    n = meta["split"]["unlabeled"]
    kwargs = dict(sigma=cfg.synthesis_sigma, seed=seed, num_sources=n)
    if mode.uses_vae:
        kwargs["shape_vae"] = vae_mod.load_vae(ws.stage_dir("train-shape-vae") / "model.ckpt")
        if mode.uses_intensity:
            kwargs["intensity_vae"] = vae_mod.load_vae(
                ws.stage_dir("train-intensity-vae") / "model.ckpt")
    else:
        kwargs["shape_fields"] = _load_fields(ws, "S", n, load_displacement_field)
        if mode.uses_intensity:
            kwargs["intensity_fields"] = _load_fields(
                ws, "I", n, load_intensity_field, stage="align-intensity")
    return sample_stream(mode, atlas, atlas_labels, **kwargs)


def _run_synthesize(cfg: ExperimentConfig, ws: Workspace):
    mode = cfg.synthesis_mode
    for dep in _stream_dependencies(mode):
        _require(ws, "synthesize", dep)
    stream = build_stream(cfg, ws, mode, seed=stage_seed(cfg, "synthesize"))

    out = _fresh_dir(ws.stage_dir("synthesize"))
    written = []
    records = []
    for i in range(cfg.synthesis_count):
        sample = next(stream)
        img_path = out / f"sample_{i:03d}_image.v3d"
        lab_path = out / f"sample_{i:03d}_labels.v3d"
        save_volume(sample.image, img_path)
        save_label_map(sample.labels, lab_path)
        written += [img_path, lab_path]
        records.append({
            "image": ws.rel(img_path),
            "labels": ws.rel(lab_path),
            "provenance": [list(sample.provenance[0]), list(sample.provenance[1]),
                           sample.provenance[2]],
        })
    meta_path = out / "samples.json"
    meta_path.write_text(json.dumps(
        {"mode": mode.value, "sigma": cfg.synthesis_sigma, "samples": records},
        indent=2, sort_keys=True) + "\n")
    written.append(meta_path)
    return written, {"count": cfg.synthesis_count, "mode": mode.value}


def _seg_config_for(cfg: ExperimentConfig, ws: Workspace, seed: int):
    meta = json.loads((ws.stage_dir("gen-data") / "population.json").read_text())
    k = meta["num_regions"]
    if cfg.segmentation.num_classes != k:
        raise ConfigError(
            f"segmentation num_classes={cfg.segmentation.num_classes} but the "
            f"population has {k} regions")
    return dataclasses.replace(cfg.segmentation, seed=seed)


def _run_train_seg(cfg: ExperimentConfig, ws: Workspace):
    mode = cfg.synthesis_mode
    for dep in _stream_dependencies(mode):
        _require(ws, "train-seg", dep)
    seg_cfg = _seg_config_for(cfg, ws, stage_seed(cfg, "train-seg"))
    stream = build_stream(cfg, ws, mode, seed=stage_seed(cfg, "train-seg", "stream"))
    model, trace = segmentation_mod.train_segmentation(stream, seg_cfg)

    out = _fresh_dir(ws.stage_dir("train-seg"))
    segmentation_mod.save_model(model, out / "model.ckpt")
    write_trace_csv(out / "trace.csv", trace)
    metrics = {"final_loss": trace[-1]} if trace else {}
    return [out / "model.ckpt", out / "trace.csv"], metrics


def _evaluate_model(model, test_pairs, num_regions: int) -> DiceReport:
    preds = [segmentation_mod.segment_volume(model, vol) for vol, _lab in test_pairs]
    truths = [lab for _vol, lab in test_pairs]
    return evaluate(preds, truths, regions=range(1, num_regions))


def _write_report(report: DiceReport, out: Path, stem: str):
    json_path = out / f"{stem}.json"
    json_path.write_text(report.to_json() + "\n")
    csv_path = out / f"{stem}_per_region.csv"
    report.write_csv(csv_path)
    txt_path = out / f"{stem}.txt"
    txt_path.write_text(report.summary_text() + "\n")
    return [json_path, csv_path, txt_path]


def _run_evaluate(cfg: ExperimentConfig, ws: Workspace):
    _require(ws, "evaluate", "gen-data")
    _require(ws, "evaluate", "train-seg")
    _atlas, _labels, _unlabeled, test, meta = load_population(ws)
    model = segmentation_mod.load_model(ws.stage_dir("train-seg") / "model.ckpt")

    report = _evaluate_model(model, test, meta["num_regions"])
    out = _fresh_dir(ws.stage_dir("evaluate"))
    written = _write_report(report, out, "report")
    metrics = {"mean": report.mean, "std": report.std,
               "min": report.min, "max": report.max}
    return written, metrics


def label_transfer_report(cfg: ExperimentConfig, ws: Workspace) -> DiceReport:
    """Registration-only baseline: warp the atlas labels onto each test volume."""
    atlas, atlas_labels, _unlabeled, test, meta = load_population(ws)
    model = registration_mod.load_model(ws.stage_dir("register") / "model_forward.ckpt")
    preds = []
    for vol, _lab in test:
        field = registration_mod.predict_forward_field(model, atlas, vol)
        preds.append(warp_nearest(atlas_labels, field))
    truths = [lab for _vol, lab in test]
    return evaluate(preds, truths, regions=range(1, meta["num_regions"]))


def run_ablation(cfg: ExperimentConfig, ws: Workspace, variants=None):
    """Evaluate the requested augmentation variants; returns {variant: DiceReport}."""
    variants = list(variants) if variants is not None else list(ABLATION_VARIANTS)
    _atlas, _labels, _unlabeled, test, meta = load_population(ws)
    reports = {}
    for variant in variants:
        if variant == "label-transfer":
            reports[variant] = label_transfer_report(cfg, ws)
            continue
        mode = AugmentationMode(variant)
        seg_cfg = _seg_config_for(cfg, ws, stage_seed(cfg, "ablate", variant))
        stream = build_stream(cfg, ws, mode,
                              seed=stage_seed(cfg, "ablate", variant, "stream"))
        model, _trace = segmentation_mod.train_segmentation(stream, seg_cfg)
        reports[variant] = _evaluate_model(model, test, meta["num_regions"])
    return reports


def ablation_table(reports: dict) -> str:
    lines = ["variant & mean(std) & min & max"]
    for variant in ABLATION_VARIANTS:
        if variant in reports:
            r = reports[variant]
            lines.append(f"{variant} & {r.format_row()}")
    for variant, r in reports.items():
        if variant not in ABLATION_VARIANTS:
            lines.append(f"{variant} & {r.format_row()}")
    return "\n".join(lines)


def _run_ablate(cfg: ExperimentConfig, ws: Workspace):
    for dep in ("gen-data", "register", "align-intensity",
                "train-shape-vae", "train-intensity-vae"):
        _require(ws, "ablate", dep)
    reports = run_ablation(cfg, ws)

    out = _fresh_dir(ws.stage_dir("ablate"))
    (out / "reports").mkdir()
    written = []
    for variant, report in reports.items():
        written += _write_report(report, out / "reports", variant)
    table_txt = out / "table.txt"
    table_txt.write_text(ablation_table(reports) + "\n")
    written.append(table_txt)
    table_csv = out / "table.csv"
    rows = ["variant,mean,std,min,max"]
    for variant in ABLATION_VARIANTS:
        if variant in reports:
            r = reports[variant]
            rows.append(f"{variant},{r.mean:.6f},{r.std:.6f},{r.min:.6f},{r.max:.6f}")
    table_csv.write_text("\n".join(rows) + "\n")
    written.append(table_csv)

    metrics = {variant: reports[variant].mean for variant in reports}
    return written, metrics


_STAGE_IMPLS = {
    "gen-data": _run_gen_data,
    "register": _run_register,
    "align-intensity": _run_align_intensity,
    "train-shape-vae": _run_train_shape_vae,
    "train-intensity-vae": _run_train_intensity_vae,
    "synthesize": _run_synthesize,
    "train-seg": _run_train_seg,
    "evaluate": _run_evaluate,
    "ablate": _run_ablate,
}

_STAGE_INPUT_STAGES = {
    "gen-data": (),
    "register": ("gen-data",),
    "align-intensity": ("gen-data", "register"),
    "train-shape-vae": ("gen-data", "register"),
    "train-intensity-vae": ("gen-data", "align-intensity"),
    "synthesize": None,  # mode-dependent
    "train-seg": None,
    "evaluate": ("gen-data", "train-seg"),
    "ablate": ("gen-data", "register", "align-intensity",
               "train-shape-vae", "train-intensity-vae"),
}


def _input_hashes(cfg: ExperimentConfig, ws: Workspace, stage: str) -> dict:
    deps = _STAGE_INPUT_STAGES[stage]
    if deps is None:
        deps = tuple(_stream_dependencies(cfg.synthesis_mode))
    hashes = {}
    for dep in deps:
        record = ws.record(dep)
        if record is None:
            continue  # the stage impl raises the proper DependencyError
        for rel in record["artifacts"]:
            path = ws.root / rel
            if path.exists():
                hashes[rel] = _hash_file(path)
    if stage == "gen-data" and cfg.data.population_dir:
        src = Path(cfg.data.population_dir)
        if src.exists():
            for p in sorted(src.rglob("*")):
                if p.is_file():
                    hashes[f"source:{p.relative_to(src).as_posix()}"] = _hash_file(p)
    return hashes


def stage_run(stage: str, cfg: ExperimentConfig, out_root, force: bool = False) -> dict:
    """Run one pipeline stage; returns its manifest record.

    No-op when the stage already completed with the same config hash and
    input hashes and its artifacts still exist.
    """
    if stage not in _STAGE_IMPLS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    ws = Workspace(out_root)
    chash = config_hash(cfg, stage)
    inputs = _input_hashes(cfg, ws, stage)
    existing = ws.record(stage)
    if existing is not None and ws.artifacts_exist(existing):
        if existing["config_hash"] == chash and existing["inputs"] == inputs:
            if not force:
                return existing
        elif not force:
            raise StaleArtifactError(
                f"stage '{stage}' has artifacts from a different config/inputs; "
                f"re-run with --force to overwrite")

    written, metrics = _STAGE_IMPLS[stage](cfg, ws)
    record = {
        "stage": stage,
        "config_hash": chash,
        "seed": stage_seed(cfg, stage),
        "inputs": inputs,
        "artifacts": sorted(ws.rel(p) for p in written),
        "metrics": metrics,
        "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    ws.write_record(record)
    return record


def run_all(cfg: ExperimentConfig, out_root, force: bool = False,
            stages=None) -> dict:
    """Run a sequence of stages in order; returns {stage: record}."""
    stages = list(stages) if stages is not None else [
        "gen-data", "register", "align-intensity", "train-shape-vae",
        "train-intensity-vae", "train-seg", "evaluate",
    ]
    return {stage: stage_run(stage, cfg, out_root, force=force) for stage in stages}
