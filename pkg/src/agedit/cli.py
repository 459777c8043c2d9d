"""Command-line entry point: ``python -m agedit <command> ...``.

Every command writes into its ``--out`` directory only, finishing with a
``run_manifest.json`` that lists each artifact with its SHA-256. Relative
``--out`` paths are resolved against ``$AGEDIT_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as aio
from .acg import ProbeTrainingError, train_age_probe
from .conditioning import AttentionCapture, export_attention_maps
from .evaluation import (DEFAULT_TARGETS, attention_region_mass, calibration_threshold, decoupling_test,
                         edit_age, evaluate, export_report, prior_baseline)
from .synthface import (SyntheticFaceSpec, build_codebook, codebook_purity, generate_dataset,
                        stratified_specs)
from .training import (ConfigError, TrainConfig, defaults_table, load_config, load_probe,
                       load_training_checkpoint, save_config, save_probe, save_training_checkpoint, train)

COMMANDS = ("gen-data", "build-codebook", "train-probe", "train", "edit", "eval", "ablate",
            "grad-check", "attn-dump", "report")


class UsageError(Exception):
    pass


class RunManifest:
    """Provenance record written next to a command's artifacts."""

    def __init__(self, command: str, out_dir: Path, seed: int | None = None, config_digest: str = "",
                 dataset_hash: str = ""):
        self.command = command
        self.out_dir = out_dir
        self.seed = seed
        self.config_digest = config_digest
        self.dataset_hash = dataset_hash
        self.start = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.outputs: list[Path] = []

    def add(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p.resolve().parent != self.out_dir.resolve() and self.out_dir.resolve() not in p.resolve().parents:
                raise RuntimeError(f"refusing to record {p} outside {self.out_dir}")
            self.outputs.append(p)

    def to_json(self) -> dict:
        return {
            "format_version": 1, "command": self.command, "config_digest": self.config_digest,
            "dataset_manifest_hash": self.dataset_hash, "code_version": __version__, "seed": self.seed,
            "start": self.start, "end": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "outputs": [{"path": str(p.relative_to(self.out_dir)), "sha256": aio.sha256_file(p)}
                        for p in sorted(set(self.outputs))],
        }

    def write(self) -> Path:
        path = self.out_dir / "run_manifest.json"
        aio.write_json(path, self.to_json())
        return path


def _out_dir(arg) -> Path:
    p = Path(arg)
    root = os.environ.get("AGEDIT_OUTPUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {}
    for name in ("stage", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "steps1", None) is not None:
        overrides["stage1_steps"] = args.steps1
    if getattr(args, "steps2", None) is not None:
        overrides["stage2_steps"] = args.steps2
    return cfg.replace(**overrides) if overrides else cfg


def _codebook_for(args, header: dict | None = None):
    if getattr(args, "codebook", None):
        return aio.load_codebook(args.codebook)
    if header and "codebook" in header:
        from .synthface import AgeCodebook
        return AgeCodebook.from_json(header["codebook"])
    raise UsageError("no codebook: pass --codebook or use a checkpoint written by `train`")


def _load_model(path):
    header, _ = aio.load_checkpoint(path)
    return load_training_checkpoint(path), header


def _source(path):
    p = Path(path)
    if p.suffix.lower() == ".pgm":
        return aio.read_pgm(p).astype(np.float64) / 127.5 - 1.0
    return SyntheticFaceSpec.from_json(aio.read_json(p))


# commands ------------------------------------------------------------------

def cmd_gen_data(args, out: Path) -> RunManifest:
    ds = generate_dataset(args.n, args.seed, args.distribution)
    man = RunManifest("gen-data", out, seed=args.seed, dataset_hash=ds.manifest["manifest_hash"])
    man.add(*aio.save_dataset(ds, out))
    return man


def cmd_build_codebook(args, out: Path) -> RunManifest:
    ds = aio.load_dataset(args.data)
    cb = build_codebook(ds, key=args.key)
    man = RunManifest("build-codebook", out, dataset_hash=ds.manifest.get("manifest_hash", ""))
    aio.save_codebook(cb, out / "codebook.json")
    purity = codebook_purity(ds)
    aio.write_json(out / "purity.json", {"partition": "identity_cluster",
                                         "similarity": {str(k): v for k, v in purity.items()}})
    man.add(out / "codebook.json", out / "purity.json")
    return man


def cmd_train_probe(args, out: Path) -> RunManifest:
    ds = aio.load_dataset(args.data)
    probe = train_age_probe(ds.images, ds.ages, steps=args.steps, seed=args.seed)
    save_probe(out / "probe.ckpt", probe)
    man = RunManifest("train-probe", out, seed=args.seed, dataset_hash=ds.manifest.get("manifest_hash", ""))
    man.add(out / "probe.ckpt")
    print(f"probe held-out MAE {probe.val_mae:.3f} (mean predictor {probe.baseline_mae:.3f})")
    return man


def cmd_train(args, out: Path) -> RunManifest:
    cfg = _config(args)
    ds = aio.load_dataset(args.data)
    cb = aio.load_codebook(args.codebook) if args.codebook else build_codebook(ds)
    probe = load_probe(args.probe) if args.probe else None
    init = None
    if args.init:
        _, tensors = aio.load_checkpoint(args.init)
        init = {"tensors": tensors}
    save_config(cfg, out / "config.json")
    log = out / "loss.log"
    every = max(1, args.print_every)

    def progress(step, row):
        if step % every == 0:
            print(f"step {step} l_diff {row.l_diff:.5f} l_age {row.l_age:.5f}", flush=True)
    result = train(cfg, ds, cb, probe, init=init, log_path=log, progress=progress)
    save_training_checkpoint(out / "checkpoint.ckpt", result, extra={"codebook": cb.to_json()})
    man = RunManifest("train", out, seed=cfg.seed, config_digest=cfg.digest(),
                      dataset_hash=ds.manifest.get("manifest_hash", ""))
    man.add(out / "config.json", log, out / "checkpoint.ckpt")
    print(f"trained stages {'+'.join(result.stages_run)} in {result.seconds:.1f}s")
    return man


def cmd_edit(args, out: Path) -> RunManifest:
    result, header = _load_model(args.checkpoint)
    cb = _codebook_for(args, header)
    scales = {"id": args.id_scale, "age": args.age_scale, "c_age": args.cage_scale}
    img = edit_age(result.model, cb, _source(args.source), args.target_age, scales=scales, seed=args.seed,
                   sampler=args.sampler, steps=args.steps)
    aio.write_pgm(out / "edited.pgm", img)
    aio.save_tensor(out / "edited.agt", img)
    man = RunManifest("edit", out, seed=args.seed, config_digest=header.get("config_digest", ""))
    man.add(out / "edited.pgm", out / "edited.agt")
    return man


def cmd_eval(args, out: Path) -> RunManifest:
    result, header = _load_model(args.checkpoint)
    cb = _codebook_for(args, header)
    specs = stratified_specs(args.n_test, args.test_seed)
    targets = tuple(args.targets) if args.targets else DEFAULT_TARGETS
    report = evaluate(result.model, cb, specs, targets, seed=args.seed, sampler=args.sampler,
                      steps=args.steps, manifest_hash=header.get("config_digest", ""))
    base = prior_baseline(targets, n=args.baseline_n, cfg=result.model.config, steps=args.steps)
    report.extra["prior_baseline_mae"] = base["average_mae"]
    report.extra["identity_calibration"] = calibration_threshold()
    files = export_report(report, out)
    print(format_table_one(report))
    man = RunManifest("eval", out, seed=args.seed, config_digest=header.get("config_digest", ""))
    man.add(*files)
    return man


def cmd_ablate(args, out: Path) -> RunManifest:
    from .pipeline import ReferenceSetup, ablate
    cfg = _config(args)
    ds = aio.load_dataset(args.data)
    cb = aio.load_codebook(args.codebook) if args.codebook else build_codebook(ds)
    probe = load_probe(args.probe) if args.probe else train_age_probe(ds.images, ds.ages)
    setup = ReferenceSetup(ds, cb, probe, stratified_specs(args.n_test, args.test_seed))
    table = ablate(cfg, setup, cache=args.cache or (out / "cache"))
    aio.write_json(out / "ablation.json", table.to_json())
    (out / "ablation.txt").write_text(table.format() + "\n")
    print(table.format())
    man = RunManifest("ablate", out, seed=cfg.seed, config_digest=cfg.digest(),
                      dataset_hash=ds.manifest.get("manifest_hash", ""))
    man.add(out / "ablation.json", out / "ablation.txt")
    return man


def cmd_grad_check(args, out: Path) -> RunManifest:
    from .verification import gradient_suite
    reports = gradient_suite(probes=args.probes, seed=args.seed, tolerance=args.tolerance)
    payload = {name: {"passed": r.passed, "max_rel_error": r.max_rel_error, "probes": r.probes}
               for name, r in reports.items()}
    aio.write_json(out / "gradcheck.json", payload)
    for name, r in reports.items():
        print(f"{name:<30} {'PASS' if r.passed else 'FAIL'}  {r.max_rel_error:.3e}")
    man = RunManifest("grad-check", out, seed=args.seed)
    man.add(out / "gradcheck.json")
    if not all(r.passed for r in reports.values()):
        man.write()
        raise RuntimeError("gradient check failed")
    return man


def cmd_attn_dump(args, out: Path) -> RunManifest:
    from .conditioning import ConditionBundle
    from .diffusion import forward_diffuse, make_schedule
    from .evaluation import render_specs
    from .synthface import id_embeddings
    from .vocab import neutral_caption
    result, header = _load_model(args.checkpoint)
    cb = _codebook_for(args, header)
    spec = SyntheticFaceSpec.from_json(aio.read_json(args.source))
    model = result.model
    sched = make_schedule(model.config.T)
    t = args.t or model.config.T // 2
    img = render_specs([spec])
    eps = np.random.default_rng(args.seed).standard_normal(img.shape)
    z_t = forward_diffuse(img.astype(np.float64), np.array([t]), eps, sched)
    bundle = ConditionBundle.build(neutral_caption()[None], id_embeddings(spec.identity),
                                   cb.lookup([spec.age]), [spec.age])
    cap = AttentionCapture()
    model.predict(z_t, np.array([t]), bundle, capture=cap)
    paths = export_attention_maps(cap, out / "maps")
    masses = attention_region_mass(model, cb, [spec], timesteps=(t,), seed=args.seed)
    aio.write_json(out / "region_mass.json",
                   {r: {b: float(v[0]) for b, v in d.items()} for r, d in masses.items()})
    man = RunManifest("attn-dump", out, seed=args.seed, config_digest=header.get("config_digest", ""))
    man.add(*paths, out / "region_mass.json")
    return man


def format_table_one(report) -> str:
    head = " ".join(f"{t:>7}" for t in report.targets) + f" {'avg':>7} {'ID sim':>7}"
    vals = " ".join(f"{report.per_target_mae[t]:7.3f}" for t in report.targets)
    sim = report.identity_similarity if report.identity_similarity is not None else float("nan")
    return f"{head}\n{vals} {report.average_mae:7.3f} {sim:7.3f}"


def cmd_report(args, out: Path) -> RunManifest:
    from .evaluation import EvalReport
    lines = []
    for path in args.inputs:
        obj = aio.read_json(path)
        lines.append(f"== {path}")
        if "rows" in obj:
            lines.append(f"{'variant':<10} {'MAE':>8} {'ID sim':>8}")
            lines += [f"{r['variant']:<10} {r['average_mae']:8.3f} {r['identity_similarity']:8.3f}"
                      for r in obj["rows"]]
        elif "per_target_mae" in obj:
            lines.append(format_table_one(EvalReport.from_json(obj)))
        else:
            raise UsageError(f"{path}: neither a metrics nor an ablation file")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    man = RunManifest("report", out)
    man.add(out / "report.txt")
    return man


# parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agedit", description="Fine-grained age editing on synthetic faces.",
                epilog="training config keys (JSON file, all optional):\n" + defaults_table(),
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--out", required=True, help="output directory")
        return q

    q = add("gen-data", "render an annotated synthetic dataset")
    q.add_argument("--n", type=int, default=8500)
    q.add_argument("--seed", type=int, default=7)
    q.add_argument("--distribution", default="uniform")

    q = add("build-codebook", "average age embeddings per age")
    q.add_argument("--data", required=True)
    q.add_argument("--key", default="age")

    q = add("train-probe", "fit and freeze the clean-image age probe")
    q.add_argument("--data", required=True)
    q.add_argument("--steps", type=int, default=1500)
    q.add_argument("--seed", type=int, default=0)

    def training_args(q):
        q.add_argument("--data", required=True)
        q.add_argument("--config", help="JSON config; omitted keys take their defaults")
        q.add_argument("--codebook")
        q.add_argument("--probe")
        q.add_argument("--seed", type=int)
        q.add_argument("--steps1", type=int, help="override stage1_steps")
        q.add_argument("--steps2", type=int, help="override stage2_steps")

    q = add("train", "two-stage training")
    training_args(q)
    q.add_argument("--stage", choices=("I", "II", "I+II"))
    q.add_argument("--init", help="checkpoint with stage-I weights (for --stage II)")
    q.add_argument("--print-every", type=int, default=500)

    def sampling_args(q):
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--codebook")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
        q.add_argument("--steps", type=int, default=50)

    q = add("edit", "regenerate a source face at a target age")
    sampling_args(q)
    q.add_argument("--source", required=True, help="spec JSON or PGM image")
    q.add_argument("--target-age", type=int, required=True)
    q.add_argument("--age-scale", type=float, default=1.0, help="scale of the age-embedding branch")
    q.add_argument("--cage-scale", type=float, default=1.0, help="scale of the age-phrase branch")
    q.add_argument("--id-scale", type=float, default=1.0, help="scale of the identity branch")

    q = add("eval", "age MAE and identity similarity on held-out specs")
    sampling_args(q)
    q.add_argument("--n-test", type=int, default=100)
    q.add_argument("--test-seed", type=int, default=2024)
    q.add_argument("--targets", type=int, nargs="+")
    q.add_argument("--baseline-n", type=int, default=100)

    q = add("ablate", "train and evaluate full / W/O Age / W/O ID / W/O ACG")
    training_args(q)
    q.add_argument("--n-test", type=int, default=100)
    q.add_argument("--test-seed", type=int, default=2024)
    q.add_argument("--cache", help="directory for per-run checkpoints (default: OUT/cache)")

    q = add("grad-check", "finite-difference gradient suite")
    q.add_argument("--probes", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--tolerance", type=float, default=1e-4)

    q = add("attn-dump", "export cross-attention maps for one source")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--codebook")
    q.add_argument("--source", required=True, help="spec JSON")
    q.add_argument("--t", type=int, help="timestep (default T/2)")
    q.add_argument("--seed", type=int, default=0)

    q = add("report", "render metrics/ablation JSON files as tables")
    q.add_argument("inputs", nargs="+")
    return p


HANDLERS = {"gen-data": cmd_gen_data, "build-codebook": cmd_build_codebook, "train-probe": cmd_train_probe,
            "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval, "ablate": cmd_ablate,
            "grad-check": cmd_grad_check, "attn-dump": cmd_attn_dump, "report": cmd_report}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"agedit: error: {err}", file=sys.stderr)
        return 2
    except SystemExit as err:  # --help / --version
        return int(err.code or 0)
    try:
        out = _out_dir(args.out)
        manifest = HANDLERS[args.command](args, out)
        manifest.write()
    except (ConfigError, UsageError) as err:
        print(f"agedit: error: {err}", file=sys.stderr)
        return 2
    except (ProbeTrainingError, RuntimeError, ValueError, KeyError, OSError, aio.FormatError) as err:
        print(f"agedit: {args.command} failed: {err}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
