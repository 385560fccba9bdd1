"""Supervised training: the joint main stage and the refinement stage."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import PairedSample, make_in_plane_pairs, make_refine_pairs, make_through_plane_pairs, sample_patches
from .errors import ContractViolation, DataError, NumericAbort
from .models import COMPONENTS, DAVSRNet, ModelBundle, NetConfig, freeze
from .volume import DegradeSpec, Volume, subsample_axis


@dataclass(frozen=True)
class TrainPlan:
    stage: str = "main"
    lambda_tpu: float = 2.0
    lambda_ipu: float = 1.0
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 8
    patch: tuple[int, int] = (32, 8)
    steps_per_epoch: int = 20
    seed: int = 0
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    val_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in ("main", "srn"):
            raise ContractViolation(f"unknown training stage {self.stage!r}")
        if self.optimizer != "adam":
            raise ContractViolation(f"unsupported optimizer {self.optimizer!r}")
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    epoch: int
    l_tpu: float = 0.0
    l_ipu: float = 0.0
    l_main: float = 0.0
    l_ref: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def mean_abs(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ContractViolation(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    return (pred - target).abs().mean()


def loss_tpu(pred_x, gt_x, pred_y, gt_y) -> torch.Tensor:
    """Sagittal plus coronal mean absolute error."""
    return mean_abs(pred_x, gt_x) + mean_abs(pred_y, gt_y)


def loss_ipu(pred_sx, pred_sy, target, target_y=None) -> torch.Tensor:
    """x-branch plus y-branch mean absolute error against the sparse axial slice.

    ``target_y`` allows the two branches to be scored on different crops;
    by default both are compared with ``target``.
    """
    return mean_abs(pred_sx, target) + mean_abs(pred_sy, target if target_y is None else target_y)


def loss_ref(pred, gt) -> torch.Tensor:
    return mean_abs(pred, gt)


def to_batch(samples: Sequence[PairedSample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.lr_input for s in samples])).to(dtype)
    y = torch.from_numpy(np.stack([s.hr_target for s in samples])[:, None]).to(dtype)
    return x, y


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _timestamp(deterministic: bool):
    return None if deterministic else datetime.now(timezone.utc).isoformat()


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _check_finite(value: float, what: str, **diag) -> None:
    if not math.isfinite(value):
        raise NumericAbort(f"non-finite {what}", **diag)


def _split(pairs, key, value):
    return [p for p in pairs if p.meta.get(key) == value]


def build_main_pools(volumes: Sequence[Volume], r: int) -> dict[str, list[PairedSample]]:
    spec = DegradeSpec(r)
    pools = {"sag": [], "cor": [], "ip_x": [], "ip_y": []}
    for k, v in enumerate(volumes):
        tp = make_through_plane_pairs(v, spec, volume_id=str(k))
        pools["sag"] += _split(tp, "axis", "x")
        pools["cor"] += _split(tp, "axis", "y")
        sparse = subsample_axis(v, "z", r)
        ip = make_in_plane_pairs(sparse, spec, volume_id=str(k))
        pools["ip_x"] += _split(ip, "branch", "x")
        pools["ip_y"] += _split(ip, "branch", "y")
    return pools


def _main_step_losses(net: DAVSRNet, batches: dict, with_ipu: bool):
    xs, ys = batches["sag"]
    xc, yc = batches["cor"]
    l_t = loss_tpu(net.through_plane(xs), ys, net.through_plane(xc), yc)
    ix, tx = batches["ip_x"]
    iy, ty = batches["ip_y"]
    if with_ipu:
        l_i = loss_ipu(net.in_plane(ix), net.in_plane(iy), tx, ty)
    else:
        with torch.no_grad():
            l_i = loss_ipu(net.in_plane(ix), net.in_plane(iy), tx, ty)
    return l_t, l_i


def train_main(
    volumes: Sequence[Volume],
    plan: TrainPlan,
    config: NetConfig,
    val_volumes: Sequence[Volume] = (),
    log_path=None,
    on_epoch: Callable[[LossBreakdown], None] | None = None,
) -> ModelBundle:
    """Jointly fit backbone, through-plane and in-plane heads.

    With ``plan.lambda_ipu == 0`` the in-plane head receives no gradient and
    stays at its initial weights (the ablation without self-supervision).
    The returned bundle has the three trained components frozen; when
    validation volumes are given the best-validating epoch is kept.
    """
    if plan.stage != "main":
        raise ContractViolation(f"train_main needs a main-stage plan, got {plan.stage!r}")
    if not volumes:
        raise DataError("training set is empty")
    bundle = ModelBundle.create(config, seed=plan.seed)
    net = bundle.net
    pools = build_main_pools(volumes, config.upscale)
    with_ipu = plan.lambda_ipu != 0
    params = [p for name in ("ufe", "tpu") + (("ipu",) if with_ipu else ()) for p in bundle.component(name).parameters()]
    opt = torch.optim.Adam(params, lr=plan.lr, betas=plan.betas, eps=plan.eps)
    half = max(plan.batch // 2, 1)
    log = JsonlLog(log_path)
    history: list[LossBreakdown] = []
    best = (-math.inf, 0, None)
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        n = plan.steps_per_epoch * half
        crops = {k: sample_patches(pool, plan.patch, n, derive_seed(plan.seed, epoch, i))
                 for i, (k, pool) in enumerate(sorted(pools.items()))}
        sum_t = sum_i = 0.0
        for step in range(plan.steps_per_epoch):
            batches = {k: to_batch(c[step * half:(step + 1) * half]) for k, c in crops.items()}
            l_t, l_i = _main_step_losses(net, batches, with_ipu)
            loss = plan.lambda_tpu * l_t + plan.lambda_ipu * l_i if with_ipu else plan.lambda_tpu * l_t
            lt, li = float(l_t.detach()), float(l_i.detach())
            _check_finite(float(loss.detach()), "training loss", epoch=epoch, batch=step, l_tpu=lt, l_ipu=li)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sum_t += lt
            sum_i += li
        l_tpu = sum_t / plan.steps_per_epoch
        l_ipu = sum_i / plan.steps_per_epoch
        rec = LossBreakdown(epoch, l_tpu, l_ipu, plan.lambda_tpu * l_tpu + plan.lambda_ipu * l_ipu)
        history.append(rec)
        if val_volumes and (epoch % plan.val_every == 0 or epoch == plan.epochs):
            from .infer import through_plane_psnr

            score = float(np.mean([through_plane_psnr(bundle, v) for v in val_volumes]))
            if score > best[0]:
                best = (score, epoch, copy.deepcopy(net.state_dict()))
        log.write({**rec.to_dict(), "wall_seconds": round(time.perf_counter() - t0, 4), "seed": plan.seed})
        if on_epoch:
            on_epoch(rec)
    if best[2] is not None:
        net.load_state_dict(best[2])
    out = freeze(bundle, {"ufe", "tpu", "ipu"})
    out.provenance.append({
        "stage": "main",
        "plan": plan.to_dict(),
        "history": [h.to_dict() for h in history],
        "selected_epoch": best[1] if best[2] is not None else plan.epochs,
        "val_psnr": best[0] if best[2] is not None else None,
        "ipu_trained": with_ipu,
        "timestamp": _timestamp(plan.deterministic),
    })
    return out


def combined_volume(bundle: ModelBundle, v_lr: Volume) -> Volume:
    from .infer import sr_through_plane
    from .volume import combine_average

    vx, vy = sr_through_plane(bundle, v_lr)
    return combine_average(vx, vy)


def refine_pairs_for(bundle: ModelBundle, volumes: Sequence[Volume]) -> list[PairedSample]:
    r = bundle.config.upscale
    pairs = []
    for k, v in enumerate(volumes):
        n = (v.shape[2] // r) * r
        dense = v.with_data(v.data[:, :, :n])
        comb = combined_volume(bundle, subsample_axis(dense, "z", r))
        pairs += make_refine_pairs(comb, dense, volume_id=str(k))
    return pairs


@torch.no_grad()
def _features(net: DAVSRNet, pairs: Sequence[PairedSample], chunk: int = 16) -> torch.Tensor:
    out = []
    for i in range(0, len(pairs), chunk):
        x, _ = to_batch(pairs[i:i + chunk])
        out.append(net.ufe(x))
    return torch.cat(out)


def refine_loss(bundle: ModelBundle, pairs: Sequence[PairedSample]) -> float:
    """Mean absolute refinement error over whole pairs (no cropping)."""
    total = 0.0
    count = 0
    with torch.no_grad():
        for i in range(0, len(pairs), 16):
            x, y = to_batch(pairs[i:i + 16])
            total += float((bundle.net.refine(x) - y).abs().sum())
            count += y.numel()
    return total / count


def train_srn(volumes: Sequence[Volume], bundle: ModelBundle, plan: TrainPlan, log_path=None) -> ModelBundle:
    """Fit only the refinement head on combined through-plane volumes.

    Backbone features of the frozen network are computed once per slice and
    reused, so training cost is that of the head alone.
    """
    if plan.stage != "srn":
        raise ContractViolation(f"train_srn needs an srn-stage plan, got {plan.stage!r}")
    missing = {"ufe", "tpu", "ipu"} - set(bundle.frozen)
    if missing:
        raise ContractViolation(f"refinement training needs a frozen backbone and heads; not frozen: {sorted(missing)}")
    if not volumes:
        raise DataError("training set is empty")
    out = bundle.copy()
    net = out.net
    pairs = refine_pairs_for(out, volumes)
    initial = refine_loss(out, pairs)
    feats = _features(net, pairs)
    centers = torch.from_numpy(np.stack([p.lr_input[1] for p in pairs])[:, None])
    targets = torch.from_numpy(np.stack([p.hr_target for p in pairs])[:, None])
    opt = torch.optim.Adam(out.trainable_parameters(), lr=plan.lr, betas=plan.betas, eps=plan.eps)
    h, w = plan.patch
    H, W = targets.shape[-2:]
    if h > H or w > W:
        raise ContractViolation(f"patch {plan.patch} exceeds slice extent {(H, W)}")
    log = JsonlLog(log_path)
    history = []
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(derive_seed(plan.seed, epoch, 99))
        total = 0.0
        for step in range(plan.steps_per_epoch):
            idx = rng.integers(len(pairs), size=plan.batch)
            ii = rng.integers(H - h + 1, size=plan.batch)
            jj = rng.integers(W - w + 1, size=plan.batch)
            f = torch.stack([feats[a, :, i:i + h, j:j + w] for a, i, j in zip(idx, ii, jj)])
            c = torch.stack([centers[a, :, i:i + h, j:j + w] for a, i, j in zip(idx, ii, jj)])
            t = torch.stack([targets[a, :, i:i + h, j:j + w] for a, i, j in zip(idx, ii, jj)])
            loss = loss_ref(net.srn_head(f, c), t)
            _check_finite(float(loss.detach()), "refinement loss", epoch=epoch, batch=step, l_ref=float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach())
        rec = LossBreakdown(epoch, l_ref=total / plan.steps_per_epoch)
        history.append(rec)
        log.write({"epoch": epoch, "l_ref": rec.l_ref, "wall_seconds": round(time.perf_counter() - t0, 4), "seed": plan.seed})
    out.provenance.append({
        "stage": "srn",
        "plan": plan.to_dict(),
        "history": [h.to_dict() for h in history],
        "initial_l_ref": initial,
        "timestamp": _timestamp(plan.deterministic),
    })
    return out


# -- gradient checking -------------------------------------------------------

def finite_difference_check(
    params: Sequence[torch.nn.Parameter],
    loss_fn: Callable[[], torch.Tensor],
    n_samples: int = 50,
    seed: int = 0,
    step: float = 1e-4,
) -> float:
    """Max relative error between autograd and central differences over a
    random subset of scalar parameters."""
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for g in flat:
            k = int(np.searchsorted(offsets, g, side="right") - 1)
            p, i = params[k], int(g - offsets[k])
            view = p.view(-1)
            orig = view[i].item()
            view[i] = orig + step
            up = float(loss_fn())
            view[i] = orig - step
            down = float(loss_fn())
            view[i] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic[k].view(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def grad_check(bundle: ModelBundle, sample: PairedSample, loss_id: str, n_samples: int = 50,
               seed: int = 0, step: float = 1e-4) -> float:
    """Check gradients of ``loss_id`` (``tpu``, ``ipu`` or ``ref``) in float64.

    Only parameters of unfrozen components that the loss touches are sampled.
    """
    paths = {"tpu": ("through_plane", ("ufe", "tpu")),
             "ipu": ("in_plane", ("ufe", "ipu")),
             "ref": ("refine", ("ufe", "srn"))}
    if loss_id not in paths:
        raise ContractViolation(f"unknown loss id {loss_id!r}")
    method, comps = paths[loss_id]
    net = copy.deepcopy(bundle.net).double()
    x = torch.from_numpy(sample.lr_input[None]).double()
    y = torch.from_numpy(sample.hr_target[None, None]).double()
    params = [p for c in comps if c not in bundle.frozen for p in net.part(c).parameters()]
    for c in COMPONENTS:
        for p in net.part(c).parameters():
            p.requires_grad_(c not in bundle.frozen)
    fwd = getattr(net, method)
    return finite_difference_check(params, lambda: mean_abs(fwd(x), y), n_samples, seed, step)
