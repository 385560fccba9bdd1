"""Slice-ensemble inference, ablation variants and the evaluation suite."""

from __future__ import annotations

import hashlib
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .adapt import AdaptPlan, adapt, adapted_with_frozen_ipu, is_adapted, train_self_supervised
from .data import EvalVolume
from .errors import ContractViolation
from .metrics import EvalReport, psnr, volume_metrics
from .models import ModelBundle, NetConfig
from .volume import (
    SliceStack,
    Volume,
    bicubic_upsample_axis,
    combine_average,
    extract_slices,
    make_triplets,
    reformat_volume,
    subsample_axis,
)

VARIANTS = ("davsr", "davsr_na", "davsr_nofro", "saint_mode", "smore_mode", "bicubic")


@contextmanager
def _inference_mode(deterministic: bool):
    # oneDNN picks batch-size dependent kernels; the reference path does not.
    with torch.no_grad(), torch.backends.mkldnn.flags(enabled=not deterministic):
        yield


def _run_slices(fn, triplets: np.ndarray, batch_size: int) -> np.ndarray:
    outs = []
    for i in range(0, len(triplets), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(triplets[i:i + batch_size]))
        outs.append(fn(x)[:, 0].numpy())
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def sr_through_plane(bundle: ModelBundle, v_lr: Volume, batch_size: int = 16,
                     deterministic: bool = True, head: str = "tpu") -> tuple[Volume, Volume]:
    """Super-resolve every sagittal and coronal slice along z.

    ``head='ipu'`` routes the slices through the in-plane head instead, which
    is how the test-data-only ablation is applied.
    """
    net = bundle.net
    fn = {"tpu": net.through_plane, "ipu": net.in_plane}[head]
    r = bundle.config.upscale
    spacing = (v_lr.spacing[0], v_lr.spacing[1], v_lr.spacing[2] / r)
    outs = []
    with _inference_mode(deterministic):
        for axis in ("x", "y"):
            stack = extract_slices(v_lr, axis)
            sr = _run_slices(fn, make_triplets(stack), batch_size)
            outs.append(reformat_volume(SliceStack(sr, axis, 0, spacing)))
    return outs[0], outs[1]


def refine_axial(bundle: ModelBundle, comb: Volume, batch_size: int = 16, deterministic: bool = True) -> Volume:
    with _inference_mode(deterministic):
        sr = _run_slices(bundle.net.refine, make_triplets(extract_slices(comb, "z")), batch_size)
    return reformat_volume(SliceStack(sr, "z", 0, comb.spacing))


def crop_dense(v: Volume, r: int) -> Volume:
    """Trim z to a multiple of ``r`` so decimation and upsampling round-trip."""
    n = (v.shape[2] // r) * r
    return v if n == v.shape[2] else v.with_data(v.data[:, :, :n])


def through_plane_psnr(bundle: ModelBundle, v_hr: Volume, deterministic: bool = True) -> float:
    r = bundle.config.upscale
    dense = crop_dense(v_hr, r)
    vx, vy = sr_through_plane(bundle, subsample_axis(dense, "z", r), deterministic=deterministic)
    return psnr(combine_average(vx, vy), dense)


@dataclass
class MethodVariant:
    name: str
    bundle: ModelBundle | None = None
    adapt_plan: AdaptPlan | None = None
    scale: int = 4
    config: NetConfig | None = None

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.name!r}; expected one of {VARIANTS}")


@dataclass
class SRResult:
    volume: Volume
    intermediates: dict | None = None
    timing: dict = field(default_factory=dict)
    bundle: ModelBundle | None = None


def _main_trained_with_ipu(bundle: ModelBundle) -> bool:
    for p in bundle.provenance:
        if p.get("stage") == "main":
            return bool(p.get("ipu_trained", True))
    return False


def _check_variant(variant: MethodVariant) -> None:
    name, b = variant.name, variant.bundle
    if name == "bicubic":
        return
    if name == "smore_mode":
        if b is not None:
            raise ContractViolation("smore_mode trains from scratch and must not be given a bundle")
        return
    if b is None:
        raise ContractViolation(f"variant {name} needs a model bundle")
    if not any(p.get("stage") == "main" for p in b.provenance):
        raise ContractViolation(f"variant {name} needs a supervised-trained bundle")
    if name == "saint_mode":
        if _main_trained_with_ipu(b) or is_adapted(b):
            raise ContractViolation("saint_mode needs a bundle trained without the in-plane loss and never adapted")
    elif name == "davsr_na":
        if is_adapted(b):
            raise ContractViolation("davsr_na needs a non-adapted bundle")
    elif name in ("davsr", "davsr_nofro"):
        want_frozen = name == "davsr"
        if is_adapted(b):
            if adapted_with_frozen_ipu(b) != want_frozen:
                raise ContractViolation(f"{name} bundle was adapted with freeze_ipu={not want_frozen}")
        elif variant.adapt_plan is None:
            raise ContractViolation(f"{name} needs an adapted bundle or an adaptation plan")
        elif variant.adapt_plan.freeze_ipu != want_frozen:
            raise ContractViolation(f"{name} adaptation plan must have freeze_ipu={want_frozen}")


def sr_full(variant: MethodVariant, v_lr: Volume, keep_intermediates: bool = False,
            batch_size: int = 16, deterministic: bool = True) -> SRResult:
    """Super-resolve a sparse volume with one method variant."""
    _check_variant(variant)
    timing = {}
    t0 = time.perf_counter()
    if variant.name == "bicubic":
        out = bicubic_upsample_axis(v_lr, "z", variant.scale)
        timing["bicubic"] = time.perf_counter() - t0
        return SRResult(out, None, timing)

    if variant.name == "smore_mode":
        plan = variant.adapt_plan or AdaptPlan(epochs=20, lr=1e-3, freeze_ipu=False)
        config = variant.config or NetConfig.profile("desk", variant.scale)
        bundle = train_self_supervised(v_lr, config, plan)
        timing["train"] = time.perf_counter() - t0
        t1 = time.perf_counter()
        vx, vy = sr_through_plane(bundle, v_lr, batch_size, deterministic, head="ipu")
        comb = combine_average(vx, vy)
        timing["through_plane"] = time.perf_counter() - t1
        inter = {"vol_x": vx, "vol_y": vy, "comb": comb} if keep_intermediates else None
        return SRResult(comb, inter, timing, bundle)

    bundle = variant.bundle
    if variant.name in ("davsr", "davsr_nofro") and not is_adapted(bundle):
        bundle = adapt(bundle, v_lr, variant.adapt_plan)
        timing["adapt"] = time.perf_counter() - t0
    if bundle.config.upscale != variant.scale:
        raise ContractViolation(f"bundle upscale {bundle.config.upscale} != requested scale {variant.scale}")
    t1 = time.perf_counter()
    vx, vy = sr_through_plane(bundle, v_lr, batch_size, deterministic)
    comb = combine_average(vx, vy)
    timing["through_plane"] = time.perf_counter() - t1
    t2 = time.perf_counter()
    ref = refine_axial(bundle, comb, batch_size, deterministic)
    timing["refine"] = time.perf_counter() - t2
    inter = {"vol_x": vx, "vol_y": vy, "comb": comb} if keep_intermediates else None
    return SRResult(ref, inter, timing, bundle)


def volume_hash(v: Volume) -> str:
    return hashlib.sha256(np.ascontiguousarray(v.data, dtype="<f4").tobytes()).hexdigest()


def evaluate_variant(report: EvalReport, dataset: str, scale: int, seed: int, variant: MethodVariant,
                     cases: Sequence[EvalVolume], adapted: dict | None = None, sink=None) -> None:
    """Score one variant over a test set and append to the report row.

    ``adapted`` maps case ident to a pre-adapted bundle (dataset-level
    adaptation); otherwise davsr variants adapt per volume. ``sink``, if
    given, is called as ``sink(dataset, case, variant_name, output, gt)``.
    """
    row = report.row(dataset, scale, variant.name)
    if seed not in row.seed_set:
        row.seed_set.append(seed)
    for case in cases:
        v = variant
        if adapted is not None and variant.name in ("davsr", "davsr_nofro"):
            v = MethodVariant(variant.name, adapted[case.ident], None, scale)
        res = sr_full(v, case.lr, keep_intermediates=True)
        gt = crop_dense(case.hr, scale)
        out = res.volume.with_data(res.volume.data[:, :, :gt.shape[2]])
        p, s = volume_metrics(out, gt, "axial")
        sag = res.intermediates["vol_x"] if res.intermediates else out
        ps, ss = volume_metrics(sag.with_data(sag.data[:, :, :gt.shape[2]]), gt, "sagittal")
        row.psnr_per_volume.append(p)
        row.ssim_per_volume.append(s)
        row.psnr_sagittal.append(ps)
        row.ssim_sagittal.append(ss)
        row.volume_hashes.append(volume_hash(out))
        if sink is not None:
            sink(dataset, case.ident, variant.name, out, gt)
        if res.bundle is not None:
            row.bundle_lineage.append([q.get("stage") for q in res.bundle.provenance])


@dataclass
class SuiteSettings:
    """Everything the ablation suite needs besides data."""

    config_profile: str = "desk"
    train_plan: object = None
    srn_plan: object = None
    adapt_plan: AdaptPlan = field(default_factory=AdaptPlan)
    smore_plan: AdaptPlan = field(default_factory=lambda: AdaptPlan(epochs=20, lr=1e-3, freeze_ipu=False))
    variants: tuple = VARIANTS
    per_dataset_adaptation: bool = True


ADAPTED_VARIANTS = ("davsr", "davsr_nofro")


def suite_adapt_plan(settings: SuiteSettings, seed: int, variant: str) -> AdaptPlan:
    return AdaptPlan(**{**settings.adapt_plan.to_dict(), "seed": seed, "freeze_ipu": variant == "davsr",
                        "per_dataset": settings.per_dataset_adaptation})


def train_suite_bundles(train_set: Sequence, scale: int, seed: int, settings: SuiteSettings,
                        val_set: Sequence = (), log_dir=None, train_refine: bool = True) -> dict:
    """Stage-1 and refinement training for one (scale, seed) cell.

    Returns ``{"main": bundle}`` plus ``"saint"`` when that variant is
    requested. With ``train_refine=False`` the refinement head keeps its
    identity initialisation and the provenance says so.
    """
    from .train import TrainPlan, train_main, train_srn

    config = NetConfig.profile(settings.config_profile, scale)
    base = settings.train_plan or TrainPlan()
    srn = settings.srn_plan or TrainPlan(stage="srn", patch=(32, 32), epochs=10, lr=1e-3)

    def logp(name):
        return None if log_dir is None else f"{log_dir}/{name}.jsonl"

    out = {}
    wanted = set(settings.variants)
    jobs = []
    if wanted & {"davsr", "davsr_na", "davsr_nofro"}:
        jobs.append(("main", base.lambda_ipu))
    if "saint_mode" in wanted:
        jobs.append(("saint", 0.0))
    for key, lam in jobs:
        plan = TrainPlan(**{**base.to_dict(), "stage": "main", "seed": seed, "lambda_ipu": lam})
        b = train_main(train_set, plan, config, val_set, log_path=logp(f"{key}_main"))
        if not train_refine:
            b.provenance.append({"stage": "srn", "trained": False})
            out[key] = b
            continue
        out[key] = train_srn(train_set, b, TrainPlan(**{**srn.to_dict(), "seed": seed}), log_path=logp(f"{key}_srn"))
    return out


def adapt_suite_bundles(main: ModelBundle, cases: Sequence[EvalVolume], seed: int,
                        settings: SuiteSettings, log_dir=None) -> dict:
    """Adapted bundles for one test set, keyed by variant name.

    Dataset-level adaptation yields one bundle per variant; otherwise one
    per case, keyed ``(variant, case ident)``. Only sparse volumes are used.
    """
    out = {}
    for vname in ADAPTED_VARIANTS:
        if vname not in settings.variants:
            continue
        plan = suite_adapt_plan(settings, seed, vname)
        if settings.per_dataset_adaptation:
            log = None if log_dir is None else f"{log_dir}/adapt_{vname}.jsonl"
            out[vname] = adapt(main, [c.lr for c in cases], plan, log_path=log)
        else:
            for c in cases:
                log = None if log_dir is None else f"{log_dir}/adapt_{vname}_{c.ident}.jsonl"
                out[(vname, c.ident)] = adapt(main, c.lr, plan, log_path=log)
    return out


def evaluate_suite(bundles: dict, test_sets: dict, scales: Sequence[int], seeds: Sequence[int],
                   settings: SuiteSettings, adapted: dict | None = None, log=None, sink=None) -> EvalReport:
    """Score every requested variant on every test set.

    ``bundles[(scale, seed)]`` holds ``main``/``saint`` bundles;
    ``adapted[(scale, seed, dataset)]`` optionally holds the output of
    :func:`adapt_suite_bundles`, which is otherwise computed here. A variant
    whose bundle is missing is marked absent in the report.
    """
    report = EvalReport()
    adapted = {} if adapted is None else adapted
    lineage = {}
    for scale in scales:
        config = NetConfig.profile(settings.config_profile, scale)
        for seed in seeds:
            cell = bundles.get((scale, seed), {})
            for key, b in sorted(cell.items()):
                lineage[f"x{scale}/seed{seed}/{key}"] = b.checksums()
            for name, cases in test_sets.items():
                ad = adapted.get((scale, seed, name))
                if ad is None and "main" in cell:
                    ad = adapt_suite_bundles(cell["main"], cases, seed, settings)
                for vname in settings.variants:
                    if log:
                        log(f"scale x{scale} seed {seed} {name}: {vname}")
                    needs = {"saint_mode": "saint", "bicubic": None, "smore_mode": None}.get(vname, "main")
                    if needs is not None and needs not in cell:
                        report.row(name, scale, vname).absent = True
                        continue
                    per_case = None
                    if vname == "bicubic":
                        variant = MethodVariant("bicubic", scale=scale)
                    elif vname == "smore_mode":
                        plan = AdaptPlan(**{**settings.smore_plan.to_dict(), "seed": seed, "freeze_ipu": False})
                        variant = MethodVariant("smore_mode", None, plan, scale, config)
                    elif vname == "saint_mode":
                        variant = MethodVariant("saint_mode", cell["saint"], scale=scale)
                    elif vname == "davsr_na":
                        variant = MethodVariant("davsr_na", cell["main"], scale=scale)
                    else:
                        variant = MethodVariant(vname, cell["main"], suite_adapt_plan(settings, seed, vname), scale)
                        if vname in ad:
                            per_case = {c.ident: ad[vname] for c in cases}
                        else:
                            per_case = {c.ident: ad[(vname, c.ident)] for c in cases}
                    evaluate_variant(report, name, scale, seed, variant, cases, per_case, sink)
    report.provenance = {"bundles": lineage, "scales": list(scales), "seeds": list(seeds),
                         "variants": list(settings.variants)}
    return report


def run_ablation_suite(train_set: Sequence, test_sets: dict, scales: Sequence[int], seeds: Sequence[int],
                       settings: SuiteSettings | None = None, val_set: Sequence = (), log=None) -> EvalReport:
    """Train per (scale, seed), then score every requested variant on every
    test set. ``test_sets`` maps a dataset name to a list of EvalVolume."""
    settings = settings or SuiteSettings()
    bundles = {}
    for scale in scales:
        for seed in seeds:
            if log:
                log(f"training x{scale} seed {seed}")
            bundles[(scale, seed)] = train_suite_bundles(train_set, scale, seed, settings, val_set)
    return evaluate_suite(bundles, test_sets, scales, seeds, settings, log=log)
