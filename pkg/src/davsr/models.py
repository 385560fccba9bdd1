"""Backbone, heads and the checkpointable bundle that holds them.

The backbone is an RDN-style stack of residual dense blocks. Three small
heads sit on top of it: two upsample one spatial axis with a 1-D sub-pixel
shuffle (through-plane and in-plane), one predicts an axial residual.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import BundleLoadError, ContractViolation

COMPONENTS = ("ufe", "tpu", "ipu", "srn")
ALIASES = {"G_F": "ufe", "G_T": "tpu", "G_I": "ipu", "G_S": "srn"}
# nn.Module already has an ``ipu`` method, so submodules use distinct names.
MODULE_ATTR = {"ufe": "ufe", "tpu": "tpu_head", "ipu": "ipu_head", "srn": "srn_head"}
ATTR_COMPONENT = {v: k for k, v in MODULE_ATTR.items()}
BUNDLE_FORMAT = "davsr-bundle/1"


def component_name(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in COMPONENTS:
        raise ContractViolation(f"unknown component {name!r}; expected one of {COMPONENTS} or {tuple(ALIASES)}")
    return name


@dataclass(frozen=True)
class NetConfig:
    num_rdb: int = 2
    convs_per_rdb: int = 4
    growth: int = 8
    base_channels: int = 16
    head_convs: int = 3
    upscale: int = 4

    def __post_init__(self):
        if self.head_convs != 3:
            raise ContractViolation("heads are fixed at three convolutions")
        if self.upscale < 2:
            raise ContractViolation(f"upscale must be >= 2, got {self.upscale}")

    @classmethod
    def profile(cls, name: str, upscale: int = 4) -> "NetConfig":
        if name == "paper":
            return cls(num_rdb=6, convs_per_rdb=8, growth=32, base_channels=64, upscale=upscale)
        if name == "desk":
            return cls(num_rdb=2, convs_per_rdb=4, growth=8, base_channels=16, upscale=upscale)
        raise ContractViolation(f"unknown profile {name!r}")


def conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


def pixel_shuffle_1d(x: torch.Tensor, r: int) -> torch.Tensor:
    """``(N, r*c, H, W) -> (N, c, H, W*r)`` with ``out[..., w*r + j]`` taken
    from channel block ``j`` at column ``w``."""
    n, rc, h, w = x.shape
    if rc % r:
        raise ContractViolation(f"{rc} channels do not split into {r} blocks")
    c = rc // r
    return x.view(n, r, c, h, w).permute(0, 2, 3, 4, 1).reshape(n, c, h, w * r)


def pixel_unshuffle_1d(x: torch.Tensor, r: int) -> torch.Tensor:
    n, c, h, wr = x.shape
    if wr % r:
        raise ContractViolation(f"width {wr} is not a multiple of {r}")
    return x.view(n, c, h, wr // r, r).permute(0, 4, 1, 2, 3).reshape(n, r * c, h, wr // r)


class DenseLayer(nn.Module):
    def __init__(self, cin, growth):
        super().__init__()
        self.conv = conv3(cin, growth)

    def forward(self, x):
        return torch.cat((x, torch.relu(self.conv(x))), 1)


class RDB(nn.Module):
    def __init__(self, channels, growth, n_layers):
        super().__init__()
        self.layers = nn.Sequential(*[DenseLayer(channels + i * growth, growth) for i in range(n_layers)])
        self.lff = nn.Conv2d(channels + n_layers * growth, channels, 1)

    def forward(self, x):
        return self.lff(self.layers(x)) + x


class UFE(nn.Module):
    """Resolution-preserving feature extractor on 3-slice inputs."""

    def __init__(self, cfg: NetConfig, in_channels: int = 3):
        super().__init__()
        c = cfg.base_channels
        self.in_channels = in_channels
        self.sfe1 = conv3(in_channels, c)
        self.sfe2 = conv3(c, c)
        self.rdbs = nn.ModuleList([RDB(c, cfg.growth, cfg.convs_per_rdb) for _ in range(cfg.num_rdb)])
        self.gff1 = nn.Conv2d(cfg.num_rdb * c, c, 1)
        self.gff2 = conv3(c, c)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ContractViolation(f"backbone expects {self.in_channels} input channels, got {x.shape[1]}")
        shallow = self.sfe1(x)
        h = self.sfe2(shallow)
        outs = []
        for block in self.rdbs:
            h = block(h)
            outs.append(h)
        return self.gff2(self.gff1(torch.cat(outs, 1))) + shallow


class UpsampleHead(nn.Module):
    """Three convs; the second feeds a 1-D shuffle that stretches the last axis."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c, r = cfg.base_channels, cfg.upscale
        if r < 2:
            raise ContractViolation(f"upsampling head needs r >= 2, got {r}")
        self.r = r
        self.conv1 = conv3(c, c)
        self.conv2 = conv3(c, r * c)
        self.conv3 = conv3(c, 1)

    def forward(self, f):
        h = torch.relu(self.conv1(f))
        h = torch.relu(self.conv2(h))
        return self.conv3(pixel_shuffle_1d(h, self.r))


class RefineHead(nn.Module):
    """Predicts an additive correction to the centre slice.

    The last conv starts at zero so a fresh head is the identity.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.base_channels
        self.conv1 = conv3(c, c)
        self.conv2 = conv3(c, c)
        self.conv3 = conv3(c, 1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, f, center):
        if f.shape[-2:] != center.shape[-2:]:
            raise ContractViolation(f"feature extent {tuple(f.shape[-2:])} != slice extent {tuple(center.shape[-2:])}")
        h = torch.relu(self.conv1(f))
        h = torch.relu(self.conv2(h))
        return center + self.conv3(h)


class DAVSRNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.ufe = UFE(cfg)
        self.tpu_head = UpsampleHead(cfg)
        self.ipu_head = UpsampleHead(cfg)
        self.srn_head = RefineHead(cfg)

    def part(self, component: str) -> nn.Module:
        return getattr(self, MODULE_ATTR[component_name(component)])

    def through_plane(self, x):
        return self.tpu_head(self.ufe(x))

    def in_plane(self, x):
        return self.ipu_head(self.ufe(x))

    def refine(self, x):
        return self.srn_head(self.ufe(x), x[:, 1:2])


# Functional forms over a bundle's network, named after the components.

def ufe_forward(net: DAVSRNet, triplet: torch.Tensor) -> torch.Tensor:
    return net.ufe(triplet)


def head_forward_tpu(net: DAVSRNet, f: torch.Tensor) -> torch.Tensor:
    return net.tpu_head(f)


def head_forward_ipu(net: DAVSRNet, f: torch.Tensor) -> torch.Tensor:
    return net.ipu_head(f)


def head_forward_srn(net: DAVSRNet, f: torch.Tensor, center: torch.Tensor) -> torch.Tensor:
    return net.srn_head(f, center)


def build_net(cfg: NetConfig, seed: int = 0, dtype=torch.float32) -> DAVSRNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DAVSRNet(cfg)
    return net.to(dtype)


@dataclass
class ModelBundle:
    """The four components, which of them are frozen, and how they got here."""

    net: DAVSRNet
    config: NetConfig
    frozen: frozenset = frozenset()
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        self.frozen = frozenset(component_name(c) for c in self.frozen)
        self._apply_grad_flags()

    @classmethod
    def create(cls, config: NetConfig, seed: int = 0) -> "ModelBundle":
        return cls(build_net(config, seed), config, frozenset(), [{"stage": "init", "seed": seed}])

    def _apply_grad_flags(self):
        for name in COMPONENTS:
            for p in self.net.part(name).parameters():
                p.requires_grad_(name not in self.frozen)

    def component(self, name: str) -> nn.Module:
        return self.net.part(name)

    @property
    def ufe_params(self):
        return self.net.ufe.state_dict()

    @property
    def tpu_params(self):
        return self.net.tpu_head.state_dict()

    @property
    def ipu_params(self):
        return self.net.ipu_head.state_dict()

    @property
    def srn_params(self):
        return self.net.srn_head.state_dict()

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for name in COMPONENTS if name not in self.frozen
                for p in self.net.part(name).parameters()]

    def copy(self) -> "ModelBundle":
        return ModelBundle(copy.deepcopy(self.net), self.config, self.frozen, copy.deepcopy(self.provenance))

    def checksums(self) -> dict[str, str]:
        """SHA-256 per component over its tensors' little-endian f32 bytes."""
        out = {}
        for name in COMPONENTS:
            h = hashlib.sha256()
            for key, t in self.net.part(name).state_dict().items():
                h.update(key.encode())
                h.update(_tensor_bytes(t))
            out[name] = h.hexdigest()
        return out


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4").tobytes()


def freeze(bundle: ModelBundle, components) -> ModelBundle:
    names = {component_name(c) for c in components}
    out = bundle.copy()
    out.frozen = frozenset(bundle.frozen | names)
    out._apply_grad_flags()
    return out


def unfreeze(bundle: ModelBundle, components) -> ModelBundle:
    names = {component_name(c) for c in components}
    out = bundle.copy()
    out.frozen = frozenset(bundle.frozen - names)
    out._apply_grad_flags()
    return out


def changed_components(before: dict[str, str], after: dict[str, str]) -> set[str]:
    return {k for k in COMPONENTS if before[k] != after[k]}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_bundle(bundle: ModelBundle, path) -> Path:
    """Write ``manifest.json`` plus one ``<tensor>.f32`` blob per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    for key, t in bundle.net.state_dict().items():
        blob = _tensor_bytes(t)
        fname = f"{key}.f32"
        (path / fname).write_bytes(blob)
        tensors.append({
            "name": key,
            "component": ATTR_COMPONENT[key.split(".", 1)[0]],
            "shape": list(t.shape),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "file": fname,
        })
    manifest = {
        "format": BUNDLE_FORMAT,
        "config": asdict(bundle.config),
        "frozen": sorted(bundle.frozen),
        "provenance": bundle.provenance,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_bundle(path) -> ModelBundle:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        config = NetConfig(**manifest["config"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise BundleLoadError("manifest", f"unreadable bundle manifest in {path}: {exc}") from exc
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleLoadError("manifest", f"unknown bundle format {manifest.get('format')!r}")
    net = build_net(config)
    expected = net.state_dict()
    listed = {t["name"]: t for t in manifest["tensors"]}
    state = {}
    for key, ref in expected.items():
        comp = ATTR_COMPONENT[key.split(".", 1)[0]]
        entry = listed.get(key)
        if entry is None:
            raise BundleLoadError(comp, f"tensor {key} missing from manifest")
        try:
            blob = (path / entry["file"]).read_bytes()
        except OSError as exc:
            raise BundleLoadError(comp, f"cannot read tensor {key}: {exc}") from exc
        shape = tuple(entry["shape"])
        if shape != tuple(ref.shape) or len(blob) != 4 * int(np.prod(shape, dtype=np.int64)):
            raise BundleLoadError(comp, f"tensor {key} has {len(blob)} bytes, expected shape {tuple(ref.shape)}")
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise BundleLoadError(comp, f"checksum mismatch for tensor {key}")
        state[key] = torch.from_numpy(np.frombuffer(blob, dtype="<f4").reshape(shape).copy())
    net.load_state_dict(state)
    return ModelBundle(net, config, frozenset(manifest["frozen"]), manifest["provenance"])
