"""Test-time adaptation on the in-plane task of sparse test volumes.

Only the sparse volumes are ever passed in; dense ground truth is not an
input to anything in this module apart from the optional probe callback.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import make_in_plane_pairs
from .errors import ContractViolation, DataError, NumericAbort
from .models import COMPONENTS, ModelBundle, NetConfig, changed_components
from .train import JsonlLog, _timestamp, derive_seed, loss_ipu, to_batch
from .volume import DegradeSpec, Volume


@dataclass(frozen=True)
class AdaptPlan:
    epochs: int = 10
    lr: float = 1e-4
    freeze_ipu: bool = True
    seed: int = 0
    audit: bool = False
    batch: int = 8
    per_dataset: bool = False
    deterministic: bool = True
    optimizer: str = "adam"
    momentum: float = 0.9

    def to_dict(self) -> dict:
        return asdict(self)


def _slice_pairs(volumes: Sequence[Volume], r: int):
    """In-plane pairs grouped per axial slice as (x-branch, y-branch)."""
    spec = DegradeSpec(r)
    grouped = []
    for k, v in enumerate(volumes):
        if v.shape[2] < 2:
            raise DataError(f"test volume {k} has {v.shape[2]} axial slice(s); adaptation needs at least 2")
        pairs = make_in_plane_pairs(v, spec, volume_id=str(k))
        by_index = {}
        for p in pairs:
            by_index.setdefault(p.meta["index"], {})[p.meta["branch"]] = p
        grouped += [(d["x"], d["y"]) for _, d in sorted(by_index.items())]
    return grouped


def _batch_loss(net, group):
    xs, tx = to_batch([g[0] for g in group])
    ys, ty = to_batch([g[1] for g in group])
    return loss_ipu(net.in_plane(xs), net.in_plane(ys), tx, ty)


def in_plane_loss(bundle: ModelBundle, volumes: Sequence[Volume], batch: int = 8) -> float:
    """Mean in-plane loss over every axial slice, without updating anything."""
    groups = _slice_pairs(list(volumes), bundle.config.upscale)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(groups), batch):
            chunk = groups[i:i + batch]
            total += float(_batch_loss(bundle.net, chunk)) * len(chunk)
    return total / len(groups)


def _as_list(test_lr) -> list[Volume]:
    return [test_lr] if isinstance(test_lr, Volume) else list(test_lr)


def fit_in_plane(
    bundle: ModelBundle,
    volumes: Sequence[Volume],
    plan: AdaptPlan,
    trainable: Sequence[str],
    log_path=None,
    on_epoch: Callable[[int, ModelBundle, float], None] | None = None,
    stage: str = "adapt",
) -> ModelBundle:
    """Optimise ``trainable`` components on the in-plane loss of ``volumes``.

    Epoch 0 in the log is an evaluation pass before any update.
    """
    out = bundle.copy()
    out.frozen = frozenset(c for c in COMPONENTS if c not in trainable)
    out._apply_grad_flags()
    net = out.net
    groups = _slice_pairs(volumes, out.config.upscale)
    if plan.optimizer == "adam":
        opt = torch.optim.Adam(out.trainable_parameters(), lr=plan.lr)
    elif plan.optimizer == "sgd":
        opt = torch.optim.SGD(out.trainable_parameters(), lr=plan.lr, momentum=plan.momentum)
    else:
        raise ContractViolation(f"unsupported optimizer {plan.optimizer!r}")
    log = JsonlLog(log_path)
    history = []
    sums = out.checksums()
    l0 = in_plane_loss(out, volumes, plan.batch)
    history.append({"epoch": 0, "l_ipu": l0})
    log.write({"epoch": 0, "l_ipu": l0, "changed_components": [], **({"param_checksums": sums} if plan.audit else {})})
    if on_epoch:
        on_epoch(0, out, l0)
    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng(derive_seed(plan.seed, epoch, 17)).permutation(len(groups))
        total = 0.0
        for step, i in enumerate(range(0, len(groups), plan.batch)):
            chunk = [groups[j] for j in order[i:i + plan.batch]]
            loss = _batch_loss(net, chunk)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NumericAbort("non-finite adaptation loss", epoch=epoch, batch=step, l_ipu=value)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value * len(chunk)
        l_ipu = total / len(groups)
        new_sums = out.checksums()
        changed = sorted(changed_components(sums, new_sums))
        sums = new_sums
        history.append({"epoch": epoch, "l_ipu": l_ipu})
        rec = {"epoch": epoch, "l_ipu": l_ipu, "changed_components": changed,
               "wall_seconds": round(time.perf_counter() - t0, 4)}
        if plan.audit:
            rec["param_checksums"] = new_sums
        log.write(rec)
        if on_epoch:
            on_epoch(epoch, out, l_ipu)
    out.frozen = bundle.frozen
    out._apply_grad_flags()
    out.provenance.append({
        "stage": stage,
        "plan": plan.to_dict(),
        "trainable": sorted(trainable),
        "n_volumes": len(volumes),
        "history": history,
        "timestamp": _timestamp(plan.deterministic),
    })
    return out


def adapt(bundle: ModelBundle, test_lr, plan: AdaptPlan = AdaptPlan(), log_path=None,
          on_epoch: Callable[[int, ModelBundle, float], None] | None = None) -> ModelBundle:
    """Adapt the backbone to sparse test volume(s) through the in-plane head.

    With ``plan.freeze_ipu`` only the backbone moves; otherwise the in-plane
    head is trained too. A list of volumes adapts once over all of them.
    """
    volumes = _as_list(test_lr)
    if not volumes:
        raise DataError("no test volumes to adapt on")
    for k, v in enumerate(volumes):
        if v.shape[2] < 2:
            raise DataError(f"test volume {k} has {v.shape[2]} axial slice(s); adaptation needs at least 2")
    if plan.epochs == 0:
        return bundle.copy()
    trainable = ("ufe",) if plan.freeze_ipu else ("ufe", "ipu")
    return fit_in_plane(bundle, volumes, plan, trainable, log_path, on_epoch)


def is_adapted(bundle: ModelBundle) -> bool:
    return any(p.get("stage") == "adapt" for p in bundle.provenance)


def adapted_with_frozen_ipu(bundle: ModelBundle) -> bool | None:
    for p in reversed(bundle.provenance):
        if p.get("stage") == "adapt":
            return bool(p["plan"]["freeze_ipu"])
    return None


def train_self_supervised(test_lr, config: NetConfig, plan: AdaptPlan, log_path=None) -> ModelBundle:
    """Fresh backbone and in-plane head trained on test volumes only."""
    volumes = _as_list(test_lr)
    fresh = ModelBundle.create(config, seed=plan.seed)
    out = fit_in_plane(fresh, volumes, plan, ("ufe", "ipu"), log_path, stage="self_supervised")
    out.frozen = frozenset(COMPONENTS)
    out._apply_grad_flags()
    return out


def adapt_stability_probe(
    bundle: ModelBundle,
    test_lr,
    long_epochs: int = 50,
    plan: AdaptPlan | None = None,
    evaluate: Callable[[ModelBundle], float] | None = None,
) -> dict:
    """Run a long adaptation and record the per-epoch loss trajectory.

    ``evaluate`` is called after every epoch (and once before the first) to
    record a quality score such as through-plane PSNR against held-out
    ground truth; the adaptation itself never sees that data.
    """
    plan = plan or AdaptPlan()
    plan = AdaptPlan(**{**plan.to_dict(), "epochs": long_epochs})
    losses, scores = [], []

    def record(epoch, b, loss):
        losses.append(loss)
        if evaluate is not None:
            scores.append(evaluate(b))

    final = adapt(bundle, test_lr, plan, on_epoch=record)
    return {"l_ipu": losses, "psnr": scores, "bundle": final}
