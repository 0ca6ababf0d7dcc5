"""Command-line entry point.

    sfsseg [--config run.json] [--set section.key=value ...] <command> [flags]

Commands: gen-data, train-source, fit-gmm, adapt, evaluate, ablate.  Every
command writes into a run directory: its outputs, the fully resolved config
(``config.json``) and ``manifest.json`` with sha256 checksums of inputs and
outputs.  Exit codes: 0 success, 1 numeric fault, 2 usage or contract error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .container import ContainerError
from .evaluation import evaluate_model, export_embeddings, source_pseudo_distance, write_metrics_csv
from .internal_dist import GmmFitError, UnderCoverageError, collect_filtered, fit_gmm
from .model import ModelConfig, SegmentationModel, checkpoint_extra, load_checkpoint, save_checkpoint
from .numerics import ContractViolation, NumericFault
from .pipeline import (AdaptConfig, EventLog, PipelineStateError, TrainConfig, adapt, run_ablation,
                       train_source)
from .synthdata import CoverageError, DomainSpec, generate, load_dataset, save_dataset

log = logging.getLogger("sfsseg")

CONFIG_VERSION = 1
DERIVED_MODEL_KEYS = ("width", "height", "num_classes")


class UsageError(Exception):
    pass


class SourceFreeViolation(UsageError):
    pass


@dataclass
class DataConfig:
    # source uses seed, target seed + 1; the labelled test splits (target and
    # its paired source twin) use seed + 2
    seed: int = 1
    n_source: int = 480
    n_target: int = 240
    n_test: int = 80


SECTIONS = {"domain": DomainSpec, "data": DataConfig, "model": ModelConfig,
            "train": TrainConfig, "adapt": AdaptConfig}


# -- run config ---------------------------------------------------------------------------------

@dataclass
class RunConfig:
    domain: DomainSpec
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    adapt: AdaptConfig

    def to_dict(self):
        d = {"version": CONFIG_VERSION}
        for name in SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d


def _check_keys(section, data, cls):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown key(s) in [{section}]: {sorted(unknown)}")


def resolve_config(doc=None, overrides=()):
    """Merge a config document with ``section.key=value`` overrides (flags win)."""
    doc = json.loads(json.dumps(doc or {}))
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ContractViolation(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ContractViolation(f"unknown config section(s): {sorted(unknown)}")
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ContractViolation(f"override '{item}' must look like section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[name] = value
    for section, cls in SECTIONS.items():
        _check_keys(section, doc.get(section, {}), cls)
    domain = DomainSpec(**doc.get("domain", {}))
    model_doc = dict(doc.get("model", {}))
    for k in DERIVED_MODEL_KEYS:
        given = model_doc.pop(k, None)
        want = {"width": domain.width, "height": domain.height, "num_classes": domain.num_classes}[k]
        if given is not None and given != want:
            raise ContractViolation(f"model.{k}={given} disagrees with the domain ({want})")
    model = ModelConfig(width=domain.width, height=domain.height, num_classes=domain.num_classes, **model_doc)
    return RunConfig(domain, DataConfig(**doc.get("data", {})), model,
                     TrainConfig(**doc.get("train", {})), AdaptConfig(**doc.get("adapt", {})))


def load_config_file(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"{path}: not valid JSON ({exc})") from None


# -- run directories ------------------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksums(root):
    root = Path(root)
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _input_digest(path):
    path = Path(path)
    if path.is_dir():
        h = hashlib.sha256()
        for rel, digest in tree_checksums(path).items():
            h.update(f"{rel}:{digest}\n".encode())
        return h.hexdigest()
    return sha256_file(path)


class RunDir:
    """One command's output directory with config copy and checksummed manifest."""

    def __init__(self, path, command, config, inputs, force):
        self.path = Path(path)
        self.command = command
        self.config = config.to_dict()
        self.inputs = {name: _input_digest(p) for name, p in inputs.items() if p is not None}
        self.force = force

    def _config_text(self):
        return json.dumps(self.config, indent=2, sort_keys=True) + "\n"

    def _fingerprint(self):
        payload = json.dumps({"command": self.command, "config": self.config, "inputs": self.inputs},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def up_to_date(self):
        """True when an identical run already completed here; raises on a conflicting one."""
        manifest = self.path / "manifest.json"
        if not self.path.exists():
            if not self.path.parent.exists():
                raise FileNotFoundError(f"parent directory {self.path.parent} does not exist")
            return False
        if not manifest.exists():
            # never clear a directory this tool did not create, even with --force
            if any(self.path.iterdir()):
                raise UsageError(f"{self.path} exists, is not empty and is not a run directory")
            return False
        old = json.loads(manifest.read_text())
        same = old.get("fingerprint") == self._fingerprint() and all(
            (self.path / rel).exists() and sha256_file(self.path / rel) == digest
            for rel, digest in old.get("outputs", {}).items())
        if self.force:
            return False
        if same:
            return True
        raise UsageError(f"{self.path} holds a different run; pass --force to overwrite")

    def prepare(self):
        if (self.path / "manifest.json").exists():
            shutil.rmtree(self.path)
        self.path.mkdir(exist_ok=True)

    def finish(self):
        (self.path / "config.json").write_text(self._config_text())
        outputs = {rel: d for rel, d in tree_checksums(self.path).items() if rel != "manifest.json"}
        manifest = {"command": self.command, "package_version": __version__, "fingerprint": self._fingerprint(),
                    "inputs": self.inputs, "outputs": outputs}
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run(args, cfg, inputs, body):
    run = RunDir(args.out, args.command, cfg, inputs, args.force)
    if run.up_to_date():
        print(f"{args.out}: up to date")
        return 0
    run.prepare()
    body(run.path)
    run.finish()
    print(f"{args.command}: wrote {args.out}")
    return 0


# -- commands ----------------------------------------------------------------------------------

def _dataset_dirs(root):
    return {split: Path(root) / split for split in ("source", "target", "test", "source_test")}


def build_datasets(cfg):
    """The four splits a run config describes, keyed by directory name."""
    dc = cfg.data
    plan = (("source", "source", dc.n_source, dc.seed), ("target", "target", dc.n_target, dc.seed + 1),
            ("test", "target", dc.n_test, dc.seed + 2), ("source_test", "source", dc.n_test, dc.seed + 2))
    return {name: generate(cfg.domain, n, split, seed) for name, split, n, seed in plan}


def cmd_gen_data(args, cfg):
    def body(out):
        for name, ds in build_datasets(cfg).items():
            save_dataset(ds, out / name, preview=args.preview)
    return _run(args, cfg, {}, body)


def cmd_train_source(args, cfg):
    src_dir = _dataset_dirs(args.data)["source"]

    def body(out):
        source = load_dataset(src_dir)
        model = SegmentationModel(cfg.model, seed=cfg.train.seed)
        events = EventLog(out / "events.jsonl")
        train_cfg = cfg.train
        if train_cfg.checkpoint_every:
            train_cfg = replace(train_cfg, checkpoint_path=str(out / "source.sfsmodel"))
        try:
            model, _ = train_source(model, source, train_cfg, events)
        finally:
            events.close()
        save_checkpoint(model, out / "source.sfsmodel")
        metrics, _ = evaluate_model(model, source)
        write_metrics_csv(out / "metrics.csv", {"source-train": metrics})
    return _run(args, cfg, {"source": src_dir}, body)


def cmd_fit_gmm(args, cfg):
    src_dir = _dataset_dirs(args.data)["source"]

    def body(out):
        model = load_checkpoint(args.model, cfg.model)
        source = load_dataset(src_dir)
        ac = cfg.adapt
        sets = collect_filtered(model, source.images, source.labels, ac.rho, ac.t)
        gmm = fit_gmm(sets, ac.t, ac.gmm_max_iters, ac.gmm_tol, ac.seed, ac.covariance_type, ac.gmm_max_points)
        # source-side bound terms, measured while the source data is still in reach;
        # only these scalars cross into the bundle
        imgs = source.images[: args.bound_images]
        preds, _ = model.predict(source.images)
        snapshot = model.embed_array(imgs).reshape(-1, model.config.embed_dim)
        handoff = {"w_source_pseudo": source_pseudo_distance(gmm, snapshot, args.bound_subsample, ac.seed, ac.p_order),
                   "e_source": float(np.mean(preds != source.labels)), "n_source": int(source.labels.size),
                   "subsample": args.bound_subsample}
        save_checkpoint(model, out / "bundle.sfsmodel", gmm=gmm, extra={"handoff": handoff})
        gmm.save(out / "gmm.sfsgmm")
        (out / "handoff_bound.json").write_text(json.dumps(handoff, indent=2, sort_keys=True) + "\n")
        (out / "filtered_counts.json").write_text(json.dumps(
            {"rho": ac.rho, "retained": sets.counts.tolist(), "totals": sets.totals.tolist()}, indent=2) + "\n")
    return _run(args, cfg, {"model": args.model, "source": src_dir}, body)


SOURCE_FLAGS = ("--source-data", "--source", "--source-images", "--source-dir")


def _refuse_source_paths(paths):
    for p in paths:
        if p is None:
            continue
        meta = Path(p) / "meta.json"
        if meta.exists() and json.loads(meta.read_text()).get("split") == "source":
            raise SourceFreeViolation(f"source-free violation: {p} holds source-domain images")


def cmd_adapt(args, cfg):
    if args.source_data is not None:
        raise SourceFreeViolation("source-free violation: adapt does not accept source data "
                                  f"(got --source-data {args.source_data})")
    _refuse_source_paths([args.target, args.eval])

    def body(out):
        model, gmm = load_checkpoint(args.model, cfg.model, with_gmm=True)
        oracle = cfg.adapt.pseudo_mode == "oracle-hist"
        target = load_dataset(args.target, with_labels=oracle)
        eval_data = load_dataset(args.eval) if args.eval else None
        events = EventLog(out / "events.jsonl")
        ac = cfg.adapt
        if ac.checkpoint_every:
            ac = replace(ac, checkpoint_path=str(out / "adapted.sfsmodel"))
        try:
            model, report = adapt(model, gmm, target, ac, events, eval_data, args.bound_subsample,
                                  handoff=checkpoint_extra(args.model).get("handoff"))
        finally:
            events.close()
        save_checkpoint(model, out / "adapted.sfsmodel", gmm=gmm)
        report.to_json(out / "report.json")
        if eval_data is not None:
            write_metrics_csv(out / "metrics.csv", {"pre-adaptation": report.pre_metrics,
                                                    "post-adaptation": report.post_metrics})
            report.migration.to_csv(out / "migration.csv")
            (out / "bound.json").write_text(json.dumps(
                {"pre": report.bound_pre.to_dict(), "post": report.bound_post.to_dict()},
                indent=2, sort_keys=True) + "\n")
    return _run(args, cfg, {"model": args.model, "target": args.target, "eval": args.eval}, body)


def cmd_evaluate(args, cfg):
    def body(out):
        model = load_checkpoint(args.model, cfg.model)
        data = load_dataset(args.data)
        metrics, _ = evaluate_model(model, data, per_slice=args.per_slice)
        write_metrics_csv(out / "metrics.csv", {args.run_name: metrics})
        if args.export:
            export_embeddings(model, data.images, out / "embeddings.csv", args.export, data.labels,
                              max_rows=args.export_rows, seed=0)
    return _run(args, cfg, {"model": args.model, "data": args.data}, body)


def cmd_ablate(args, cfg):
    dirs = _dataset_dirs(args.data)
    values = [v.strip() for v in args.values.split(",") if v.strip()]

    def body(out):
        model = load_checkpoint(args.model, cfg.model)
        source = load_dataset(dirs["source"])
        target = load_dataset(dirs["target"], with_labels=cfg.adapt.pseudo_mode == "oracle-hist")
        test = load_dataset(dirs["test"])
        run_ablation(cfg.adapt, args.axis, values, model, source, target, test, out / "ablation.csv")
    return _run(args, cfg, {"model": args.model, "data": args.data}, body)


# -- argument parsing ------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="sfsseg", description="Source-free segmentation adaptation toolkit")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config entry (repeatable; wins over --config)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    g = sub.add_parser("gen-data", help="generate source, target and labelled target test sets")
    common(g)
    g.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    g.add_argument("--preview", action="store_true", help="write PNG previews next to the binaries")

    t = sub.add_parser("train-source", help="train the segmentation model on the source split")
    common(t)
    t.add_argument("--data", required=True, help="gen-data run directory")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)

    f = sub.add_parser("fit-gmm", help="fit the internal distribution; writes a model+GMM bundle")
    common(f)
    f.add_argument("--model", required=True, help="source checkpoint (.sfsmodel)")
    f.add_argument("--data", required=True, help="gen-data run directory")
    f.add_argument("--bound-subsample", type=int, default=256)
    f.add_argument("--bound-images", type=int, default=64)

    a = sub.add_parser("adapt", help="source-free adaptation from a bundle and target images")
    common(a)
    a.add_argument("--model", required=True, help="bundle from fit-gmm (.sfsmodel with a GMM section)")
    a.add_argument("--target", required=True, help="unlabelled target dataset directory")
    a.add_argument("--eval", help="labelled target dataset for before/after reports")
    a.add_argument("--iterations", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--bound-subsample", type=int, default=256)
    for flag in SOURCE_FLAGS:
        a.add_argument(flag, dest="source_data", help=argparse.SUPPRESS)

    e = sub.add_parser("evaluate", help="Dice/ASSD of a checkpoint on a labelled dataset")
    common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="labelled dataset directory")
    e.add_argument("--run-name", default="evaluate")
    e.add_argument("--per-slice", action="store_true")
    e.add_argument("--export", choices=["none", "pca2"], help="also export per-pixel embeddings")
    e.add_argument("--export-rows", type=int, default=None)

    b = sub.add_parser("ablate", help="rerun GMM fit + adaptation for each value of one setting")
    common(b)
    b.add_argument("--model", required=True, help="source checkpoint")
    b.add_argument("--data", required=True, help="gen-data run directory")
    b.add_argument("--axis", required=True, choices=["rho", "t", "V", "metric", "lam"])
    b.add_argument("--values", required=True, help="comma-separated values")
    return p


def _flag_overrides(args):
    out = []
    cmd = args.command
    if getattr(args, "seed", None) is not None:
        section = {"gen-data": "data", "train-source": "train", "adapt": "adapt"}[cmd]
        out.append(f"{section}.seed={args.seed}")
    if getattr(args, "iterations", None) is not None:
        out.append(f"{'train' if cmd == 'train-source' else 'adapt'}.iterations={args.iterations}")
    return out


COMMANDS = {"gen-data": cmd_gen_data, "train-source": cmd_train_source, "fit-gmm": cmd_fit_gmm,
            "adapt": cmd_adapt, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


def _limit_threads():
    n = os.environ.get("SFS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        cfg = resolve_config(load_config_file(args.config), list(args.set) + _flag_overrides(args))
        return COMMANDS[args.command](args, cfg)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ContractViolation, ContainerError, PipelineStateError, UnderCoverageError,
            GmmFitError, CoverageError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
