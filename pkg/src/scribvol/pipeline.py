"""End-to-end pipeline: ingest, budget, expand, supervoxels, pseudo labels.

A pipeline run is driven by a JSON config with a versioned schema, writes
every intermediate artifact into its output directory, and records a
manifest holding the full resolved configuration and the per-stage seeds
fanned out from the master seed.  Reports contain no absolute paths or
timestamps, so re-running from a manifest reproduces them byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScribvolError, StageError, ValidationError
from .metrics import evaluate_classes
from .propagate import expand_random_walker, expand_watershed, pseudo_labels, rank_slices
from .supervoxels import slic3d
from .synth import make_phantom, simulate_scribbles
from .volume import (
    LabelVolume,
    ScalarVolume,
    ScribbleSet,
    load_labels,
    load_scribbles,
    load_volume,
    save_labels,
    save_scribbles,
    save_volume,
)

SCHEMA_VERSION = 1
RANKINGS = ("ssim", "equal")
METHODS = ("watershed", "rw")


def stage_seed(master: int, label: str) -> int:
    """Deterministic per-stage seed derived from the master seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class PhantomSpec:
    kind: str = "multi_organ"
    dims: tuple = (64, 64, 16)
    spacing: tuple = (1.0, 1.0, 4.0)
    noise_sigma: float = 0.02


@dataclass
class ExpansionSpec:
    method: str = "rw"
    beta: float = 100.0
    threshold: float = 0.9
    erosion_radius: int = 1


@dataclass
class SupervoxelSpec:
    k: int = 600
    compactness: float = 0.1
    max_iters: int = 10


@dataclass
class WeightSpec:
    lambda1: float = 1.0
    lambda2: float = 0.1
    beta1: float = 0.3
    beta2: float = 0.3
    beta3: float = 0.3


@dataclass
class PipelineConfig:
    """Validated pipeline parameters; see README for the JSON schema."""

    seed: int = 0
    output_dir: str = "out"
    phantom: PhantomSpec | None = field(default_factory=PhantomSpec)
    volume_path: str | None = None
    ground_truth_path: str | None = None
    scribbles_path: str | None = None
    budget_fraction: float = 1.0
    ranking: str = "ssim"
    expansion: ExpansionSpec = field(default_factory=ExpansionSpec)
    supervoxel: SupervoxelSpec = field(default_factory=SupervoxelSpec)
    loss_weights: WeightSpec = field(default_factory=WeightSpec)
    prototypes: dict | None = None

    def validate(self) -> None:
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValidationError(
                f"budget_fraction must be in (0, 1], got {self.budget_fraction}")
        if self.ranking not in RANKINGS:
            raise ValidationError(f"ranking must be one of {RANKINGS}")
        if self.expansion.method not in METHODS:
            raise ValidationError(f"expansion method must be one of {METHODS}")
        if self.phantom is None and (self.volume_path is None
                                     or self.ground_truth_path is None):
            raise ValidationError(
                "either a phantom spec or volume_path + ground_truth_path is required")
        if self.phantom is not None and self.phantom.kind not in (
                "sphere", "two_region", "multi_organ"):
            raise ValidationError(f"unknown phantom kind {self.phantom.kind!r}")
        for path in (self.volume_path, self.ground_truth_path, self.scribbles_path):
            if path is not None and not Path(path).is_file():
                raise ValidationError(f"referenced path does not exist: {path}")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported config schema_version {version}")
        def sub(key, klass):
            if key in doc and doc[key] is not None:
                doc[key] = klass(**doc[key])
        sub("phantom", PhantomSpec)
        sub("expansion", ExpansionSpec)
        sub("supervoxel", SupervoxelSpec)
        sub("loss_weights", WeightSpec)
        unknown = set(doc) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["schema_version"] = SCHEMA_VERSION
        if doc["phantom"] is not None:
            doc["phantom"]["dims"] = list(doc["phantom"]["dims"])
            doc["phantom"]["spacing"] = list(doc["phantom"]["spacing"])
        return doc

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config is not valid JSON: {e}") from e
        doc.pop("stage_seeds", None)  # manifests carry derived values; ignore
        return cls.from_dict(doc)


def _dump_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _pick_budget_slices(volume: ScalarVolume, eligible: list[int], n_keep: int,
                        ranking: str) -> list[int]:
    """Choose which eligible slices keep their annotations."""
    if n_keep >= len(eligible):
        return list(eligible)
    if ranking == "equal":
        idx = np.round(np.linspace(0, len(eligible) - 1, n_keep)).astype(int)
        return [eligible[i] for i in np.unique(idx)]
    # ssim: start at the central eligible slice, then greedy similarity
    sub = ScalarVolume(volume.data[:, :, eligible].copy(), volume.spacing)
    center_local = int(np.argmin(np.abs(np.asarray(eligible)
                                        - (volume.dims[2] - 1) / 2.0)))
    picked_local = rank_slices(sub, {center_local}, n_keep - 1)
    return sorted(eligible[i] for i in [center_local] + picked_local)


def _restrict_to_slices(scribbles: ScribbleSet, keep: set[int]) -> ScribbleSet:
    e = scribbles.entries
    sel = np.isin(e[:, 2], sorted(keep))
    return ScribbleSet(e[sel], scribbles.dims, scribbles.spacing)


def run_pipeline(config: PipelineConfig, output_dir: str | None = None) -> dict:
    """Execute all stages, persist artifacts, and return the report dict.

    Any stage failure raises ``StageError`` naming the stage; artifacts
    produced before the failure stay on disk.
    """
    config.validate()
    out = Path(output_dir if output_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    seeds = {label: stage_seed(config.seed, label)
             for label in ("phantom", "scribble", "expand", "supervoxel")}
    manifest = {"schema_version": SCHEMA_VERSION, "config": config.to_dict(),
                "stage_seeds": seeds}
    _dump_json(manifest, out / "manifest.json")

    report: dict = {"schema_version": SCHEMA_VERSION, "stages": {}, "notes": []}

    def run_stage(name, fn):
        try:
            return fn()
        except ScribvolError as e:
            raise StageError(name, str(e)) from e
        except (OSError, ValueError) as e:
            raise StageError(name, str(e)) from e

    def ingest():
        if config.phantom is not None:
            vol, gt = make_phantom(config.phantom.kind, config.phantom.dims,
                                   config.phantom.spacing,
                                   config.phantom.noise_sigma, seeds["phantom"])
        else:
            vol = load_volume(config.volume_path)
            gt = load_labels(config.ground_truth_path)
        save_volume(vol, out / "volume.svol")
        save_labels(gt, out / "ground_truth.svol")
        return vol, gt

    volume, gt = run_stage("ingest", ingest)
    report["stages"]["ingest"] = {
        "dims": list(volume.dims), "spacing": list(volume.spacing),
        "source": "phantom" if config.phantom is not None else "files"}

    def scribble():
        if config.scribbles_path is not None:
            s = load_scribbles(config.scribbles_path)
        else:
            s = simulate_scribbles(gt, seed=seeds["scribble"])
        save_scribbles(s, out / "scribbles_full.scrib")
        return s

    full = run_stage("scribble", scribble)
    report["stages"]["scribble"] = {"entries": len(full),
                                    "classes": [int(c) for c in full.labels_present()]}

    def budget():
        eligible = [int(z) for z in full.annotated_slices()]
        n_keep = max(1, int(np.ceil(config.budget_fraction * len(eligible))))
        keep = _pick_budget_slices(volume, eligible, n_keep, config.ranking)
        s = _restrict_to_slices(full, set(keep))
        save_scribbles(s, out / "scribbles_budget.scrib")
        return s, keep, eligible

    budgeted, kept_slices, eligible = run_stage("budget", budget)
    full_annotation = len(kept_slices) == len(eligible)
    if full_annotation:
        report["notes"].append("full annotation")
    report["stages"]["budget"] = {
        "fraction": config.budget_fraction, "ranking": config.ranking,
        "eligible_slices": eligible, "kept_slices": kept_slices}

    def expand():
        if full_annotation:
            save_scribbles(budgeted, out / "scribbles_expanded.scrib")
            return budgeted, "no-op (full annotation)"
        ex = config.expansion
        if ex.method == "rw":
            s = expand_random_walker(volume, budgeted, beta=ex.beta,
                                     threshold=ex.threshold)
        else:
            s = expand_watershed(volume, budgeted,
                                 erosion_radius=ex.erosion_radius)
        save_scribbles(s, out / "scribbles_expanded.scrib")
        return s, ex.method

    expanded, method_note = run_stage("expand", expand)
    report["stages"]["expand"] = {"method": method_note,
                                  "entries": len(expanded)}

    def supervoxel():
        sv = slic3d(volume, k=config.supervoxel.k,
                    compactness=config.supervoxel.compactness,
                    max_iters=config.supervoxel.max_iters)
        save_labels(sv.labels, out / "supervoxels.svol")
        return sv

    sv = run_stage("supervoxel", supervoxel)
    report["stages"]["supervoxel"] = {"count": sv.num_supervoxels}

    def pseudo():
        pl = pseudo_labels(sv, expanded)
        save_labels(pl.pseudo, out / "pseudo.svol")
        save_labels(pl.confidence, out / "confidence.svol")
        return pl

    pl = run_stage("pseudo", pseudo)
    supervised = float(pl.confidence.data.mean())
    report["stages"]["pseudo"] = {"supervised_fraction": supervised,
                                  "unknown_label": pl.unknown_label}

    def metrics():
        classes = list(range(1, gt.num_labels))
        return evaluate_classes(pl.pseudo, gt, classes)

    report["metrics"] = run_stage("metrics", metrics)
    _dump_json(report, out / "report.json")
    return report
