"""Command-line driver: gen-data, train, adapt, infer, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adapt import AdaptPlan, adapt
from .data import EvalVolume, PhantomSpec, generate_phantom
from .errors import ContractViolation, DataError, NumericAbort
from .infer import (
    ADAPTED_VARIANTS,
    VARIANTS,
    MethodVariant,
    SuiteSettings,
    evaluate_suite,
    sr_full,
    suite_adapt_plan,
    train_suite_bundles,
)
from .metrics import psnr, ssim
from .models import NetConfig, load_bundle, save_bundle
from .train import TrainPlan
from .volume import audit_access, read_vol, subsample_axis, write_vol

log = logging.getLogger("davsr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _plan_dict(cls, **overrides) -> dict:
    return {**asdict(cls()), **overrides}


@dataclass
class ExperimentConfig:
    """One JSON document describing a full experiment. Flags override fields."""

    out_root: str = "runs/desk"
    data_root: str | None = None
    profile: str = "desk"
    scales: list = field(default_factory=lambda: [4])
    seeds: list = field(default_factory=lambda: [0])
    variants: list = field(default_factory=lambda: list(VARIANTS))
    phantom_shape: list = field(default_factory=lambda: [64, 64, 64])
    n_train: int = 6
    n_val: int = 2
    n_test: int = 4
    shift_levels: list = field(default_factory=lambda: [0.0, 0.8])
    train: dict = field(default_factory=lambda: _plan_dict(
        TrainPlan, epochs=80, steps_per_epoch=50, batch=16, val_every=5))
    srn: dict = field(default_factory=lambda: _plan_dict(
        TrainPlan, stage="srn", patch=(32, 32), epochs=10, steps_per_epoch=20, batch=16))
    adapt: dict = field(default_factory=lambda: _plan_dict(AdaptPlan, epochs=10, lr=1e-4))
    smore: dict = field(default_factory=lambda: _plan_dict(AdaptPlan, epochs=20, lr=1e-3, freeze_ipu=False))
    per_dataset_adaptation: bool = False
    deterministic: bool = True
    png: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config fields: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k, v in d.items():
            default = getattr(base, k)
            merged[k] = {**default, **v} if isinstance(default, dict) else v
        return cls(**merged)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    # derived objects
    @property
    def data_dir(self) -> Path:
        return Path(self.data_root) if self.data_root else Path(self.out_root) / "data"

    def train_plan(self) -> TrainPlan:
        return TrainPlan(**{**self.train, "deterministic": self.deterministic})

    def srn_plan(self) -> TrainPlan:
        return TrainPlan(**{**self.srn, "stage": "srn", "deterministic": self.deterministic})

    def adapt_plan(self) -> AdaptPlan:
        return AdaptPlan(**{**self.adapt, "deterministic": self.deterministic,
                            "per_dataset": self.per_dataset_adaptation})

    def settings(self) -> SuiteSettings:
        for v in self.variants:
            if v not in VARIANTS:
                raise ContractViolation(f"unknown variant {v!r}; expected one of {VARIANTS}")
        return SuiteSettings(
            config_profile=self.profile,
            train_plan=self.train_plan(),
            srn_plan=self.srn_plan(),
            adapt_plan=self.adapt_plan(),
            smore_plan=AdaptPlan(**{**self.smore, "deterministic": self.deterministic}),
            variants=tuple(self.variants),
            per_dataset_adaptation=self.per_dataset_adaptation,
        )


def dataset_name(level: float) -> str:
    return f"test_shift{level:g}"


# -- paths ---------------------------------------------------------------------

def bundle_dir(cfg: ExperimentConfig, scale: int, seed: int) -> Path:
    return Path(cfg.out_root) / "bundles" / f"x{scale}" / f"seed{seed}"


def adapted_dir(cfg: ExperimentConfig, scale: int, seed: int, dataset: str) -> Path:
    return bundle_dir(cfg, scale, seed) / "adapted" / dataset


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise FileExistsError(f"{path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# -- manifest ------------------------------------------------------------------

def _load_manifest(cfg: ExperimentConfig) -> dict:
    path = cfg.data_dir / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"no dataset manifest at {path}; run gen-data first") from exc


def _entries(manifest: dict, set_name: str) -> list[dict]:
    return [e for e in manifest["volumes"] if e["set"] == set_name]


def _read_training_set(cfg: ExperimentConfig, manifest: dict, set_name: str):
    return [read_vol(cfg.data_dir / e["path"], role="train") for e in _entries(manifest, set_name)
            if e["role"] == "dense"]


def _test_sets(cfg: ExperimentConfig, manifest: dict, with_hr: bool) -> dict:
    """Test cases per dataset. Dense files are only opened through the
    lazy ``hr`` accessor, so adaptation never touches them."""
    out = {}
    for name in manifest["test_sets"]:
        cases = []
        entries = _entries(manifest, name)
        dense = {e["ident"]: e for e in entries if e["role"] == "hr"}
        for e in entries:
            if e["role"] != "lr":
                continue
            lr = read_vol(cfg.data_dir / e["path"], role="lr")
            hr_entry = dense.get(e["ident"])
            if with_hr and hr_entry is None:
                raise DataError(f"{name}/{e['ident']}: no ground truth listed for evaluation")
            hr_path = cfg.data_dir / hr_entry["path"] if hr_entry else None

            def loader(p=hr_path):
                return read_vol(p, role="hr")

            cases.append(EvalVolume(e["ident"], lr, loader))
        out[name] = cases
    return out


# -- commands --------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    root = cfg.data_dir
    _prepare_dir(root, force)
    shape = tuple(cfg.phantom_shape)
    volumes = []

    def emit(set_name, ident, spec, r=None):
        v = generate_phantom(spec)
        (root / set_name).mkdir(exist_ok=True)
        rel = f"{set_name}/{ident}.vol"
        write_vol(v, root / rel)
        role = "dense" if r is None else "hr"
        volumes.append({"set": set_name, "ident": ident, "role": role, "path": rel, "spec": spec.to_dict()})
        if r is not None:
            rel_lr = f"{set_name}/{ident}_lr.vol"
            write_vol(subsample_axis(v, "z", r), root / rel_lr)
            volumes.append({"set": set_name, "ident": ident, "role": "lr", "path": rel_lr, "scale": r,
                            "spec": spec.to_dict()})

    for i in range(cfg.n_train):
        emit("train", f"train{i:03d}", PhantomSpec(shape=shape, structure_seed=i))
    for i in range(cfg.n_val):
        emit("val", f"val{i:03d}", PhantomSpec(shape=shape, structure_seed=100 + i))
    names = []
    for k, level in enumerate(cfg.shift_levels):
        name = dataset_name(level)
        names.append(name)
        for i in range(cfg.n_test):
            for r in cfg.scales:
                emit(name, f"case{i:03d}_x{r}", PhantomSpec(shape=shape, structure_seed=200 + 50 * k + i,
                                                            shift_level=float(level)), r)
    manifest = {"format": "davsr-data/1", "config": cfg.to_dict(), "test_sets": names, "volumes": volumes}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d volumes under %s", len(volumes), root)
    return root / "manifest.json"


def cmd_train(cfg: ExperimentConfig, stage: str = "all", force: bool = False) -> list[Path]:
    manifest = _load_manifest(cfg)
    train_set = _read_training_set(cfg, manifest, "train")
    val_set = _read_training_set(cfg, manifest, "val")
    if not train_set:
        raise DataError("manifest lists no training volumes")
    settings = cfg.settings()
    written = []
    for scale in cfg.scales:
        for seed in cfg.seeds:
            out = bundle_dir(cfg, scale, seed)
            _prepare_dir(out, force)
            (out / "logs").mkdir()
            log.info("training x%d seed %d", scale, seed)
            bundles = train_suite_bundles(train_set, scale, seed, settings, val_set, log_dir=out / "logs",
                                          train_refine=stage != "main")
            for key, b in bundles.items():
                written.append(save_bundle(b, out / key))
    return written


def cmd_adapt(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    manifest = _load_manifest(cfg)
    for e in manifest["volumes"]:
        if e["role"] == "hr":
            log.info("ignoring ground-truth file %s during adaptation", e["path"])
    settings = cfg.settings()
    test_sets = _test_sets(cfg, manifest, with_hr=False)
    written = []
    for scale in cfg.scales:
        for seed in cfg.seeds:
            main_path = bundle_dir(cfg, scale, seed) / "main"
            if not main_path.exists():
                raise DataError(f"no trained bundle at {main_path}; run train first")
            main = load_bundle(main_path)
            for name, cases in test_sets.items():
                cases = [c for c in cases if c.ident.endswith(f"_x{scale}")]
                out = adapted_dir(cfg, scale, seed, name)
                _prepare_dir(out, force)
                with audit_access() as audit:
                    for vname in ADAPTED_VARIANTS:
                        if vname not in settings.variants:
                            continue
                        plan = suite_adapt_plan(settings, seed, vname)
                        if plan.per_dataset:
                            b = adapt(main, [c.lr for c in cases], plan, log_path=out / f"{vname}.jsonl")
                            written.append(save_bundle(b, out / vname))
                        else:
                            for c in cases:
                                b = adapt(main, c.lr, plan, log_path=out / f"{vname}_{c.ident}.jsonl")
                                written.append(save_bundle(b, out / vname / c.ident))
                (out / "audit.json").write_text(json.dumps({"hr_reads": audit.hr_reads,
                                                             "records": audit.records}, indent=2))
                if audit.hr_reads:
                    raise DataError(f"adaptation read {audit.hr_reads} ground-truth volume(s)")
    return written


def _load_adapted(cfg: ExperimentConfig, scale: int, seed: int, name: str, cases) -> dict | None:
    root = adapted_dir(cfg, scale, seed, name)
    out = {}
    for vname in ADAPTED_VARIANTS:
        if vname not in cfg.variants:
            continue
        if (root / vname / "manifest.json").exists():
            out[vname] = load_bundle(root / vname)
        else:
            for c in cases:
                p = root / vname / c.ident
                if not (p / "manifest.json").exists():
                    return None
                out[(vname, c.ident)] = load_bundle(p)
    return out


def cmd_eval(cfg: ExperimentConfig, force: bool = False) -> tuple[Path, bool]:
    """Returns the report directory and whether every requested variant ran."""
    manifest = _load_manifest(cfg)
    settings = cfg.settings()
    test_sets = _test_sets(cfg, manifest, with_hr=True)
    bundles, adapted = {}, {}
    for scale in cfg.scales:
        for seed in cfg.seeds:
            cell = {}
            for key in ("main", "saint"):
                p = bundle_dir(cfg, scale, seed) / key
                if (p / "manifest.json").exists():
                    cell[key] = load_bundle(p)
                else:
                    log.warning("no %s bundle at %s", key, p)
            bundles[(scale, seed)] = cell
            if "main" in cell:
                for name, cases in test_sets.items():
                    sub = [c for c in cases if c.ident.endswith(f"_x{scale}")]
                    found = _load_adapted(cfg, scale, seed, name, sub)
                    if found is not None:
                        adapted[(scale, seed, name)] = found
    out = Path(cfg.out_root) / "reports"
    _prepare_dir(out, force)
    images = {}

    def sink(dataset, ident, vname, volume, gt):
        if cfg.png and not any(k[0] == dataset and k[1] != ident for k in images):
            images[(dataset, ident, vname)] = (volume, gt)

    reports = []
    for scale in cfg.scales:
        scoped = {n: [c for c in cs if c.ident.endswith(f"_x{scale}")] for n, cs in test_sets.items()}
        reports.append(evaluate_suite(bundles, scoped, [scale], cfg.seeds, settings,
                                      adapted=adapted, log=log.info, sink=sink))
    report = reports[0]
    for extra in reports[1:]:
        report.rows += extra.rows
        report.provenance["bundles"].update(extra.provenance["bundles"])
    report.provenance.update({"scales": list(cfg.scales), "config": cfg.to_dict()})
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    if cfg.png and images:
        write_comparisons(images, out / "png")
    complete = not any(r.absent for r in report.rows)
    return out, complete


def cmd_infer(cfg: ExperimentConfig, variant: str, lr_path: Path, out_path: Path,
              bundle_path: Path | None, scale: int) -> Path:
    v_lr = read_vol(lr_path, role="lr")
    settings = cfg.settings()
    bundle = load_bundle(bundle_path) if bundle_path else None
    plan = None
    if variant in ADAPTED_VARIANTS:
        plan = suite_adapt_plan(settings, cfg.seeds[0], variant)
    elif variant == "smore_mode":
        plan = settings.smore_plan
    mv = MethodVariant(variant, bundle, plan, scale, NetConfig.profile(cfg.profile, scale))
    with audit_access() as audit:
        res = sr_full(mv, v_lr, deterministic=cfg.deterministic)
    if audit.hr_reads:
        raise DataError("inference read ground-truth data")
    write_vol(res.volume, out_path)
    return out_path


def write_comparisons(images: dict, out: Path) -> list[Path]:
    """Middle sagittal slice of the ground truth beside every variant."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ContractViolation("PNG comparisons need matplotlib (pip install artifact[plots])") from exc
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for dataset in sorted({k[0] for k in images}):
        items = [(k[2], v) for k, v in images.items() if k[0] == dataset]
        gt = items[0][1][1]
        x = gt.shape[0] // 2
        fig, axes = plt.subplots(1, len(items) + 1, figsize=(2.2 * (len(items) + 1), 2.6))
        axes[0].imshow(gt.data[x].T, cmap="gray", vmin=0, vmax=1, origin="lower")
        axes[0].set_title("HR", fontsize=8)
        for ax, (vname, (vol, g)) in zip(axes[1:], items):
            ax.imshow(vol.data[x].T, cmap="gray", vmin=0, vmax=1, origin="lower")
            ax.set_title(f"{vname}\n{psnr(vol.data[x], g.data[x]):.2f} / {ssim(vol.data[x], g.data[x]):.3f}",
                         fontsize=7)
        for ax in axes:
            ax.axis("off")
        path = out / f"{dataset}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


# -- argument handling ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--profile", choices=("paper", "desk"))
    p.add_argument("--scale", type=int, choices=(2, 4, 6))
    p.add_argument("--variant", action="append", choices=VARIANTS, help="repeatable")
    p.add_argument("--deterministic", action="store_true", help="force reproducible kernels and reductions")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="davsr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen-data", "train", "adapt", "eval", "ablate", "infer"):
        p = sub.add_parser(name)
        _common(p)
        if name == "train":
            p.add_argument("--stage", choices=("main", "all"), default="all",
                           help="'main' skips refinement training")
        if name == "infer":
            p.add_argument("--bundle", type=Path)
            p.add_argument("--input", type=Path, required=True, help="sparse .vol volume")
            p.add_argument("--output", type=Path, required=True)
    return parser


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise ContractViolation(f"cannot read config {args.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.profile:
        cfg.profile = args.profile
    if args.scale:
        cfg.scales = [args.scale]
    if args.variant:
        cfg.variants = list(dict.fromkeys(args.variant))
    if args.deterministic:
        cfg.deterministic = True
    if os.environ.get("DAVSR_OUT"):
        cfg.out_root = os.environ["DAVSR_OUT"]
    return cfg


def run(args) -> int:
    cfg = load_config(args)
    Path(cfg.out_root).mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd in ("gen-data", "ablate"):
        cmd_gen_data(cfg, args.force)
    if cmd == "train" or cmd == "ablate":
        cmd_train(cfg, getattr(args, "stage", "all"), args.force)
    if cmd == "adapt" or cmd == "ablate":
        cmd_adapt(cfg, args.force)
    if cmd == "infer":
        if not args.variant or len(args.variant) != 1:
            raise ContractViolation("infer needs exactly one --variant")
        cmd_infer(cfg, args.variant[0], args.input, args.output, args.bundle, cfg.scales[0])
    if cmd == "eval" or cmd == "ablate":
        out, complete = cmd_eval(cfg, args.force)
        print(out / "report.csv")
        if not complete:
            log.error("some requested variants had no bundle; see 'absent' rows in the report")
            return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ContractViolation, FileExistsError) as exc:
        print(f"davsr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"davsr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"davsr: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
