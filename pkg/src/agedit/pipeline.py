"""Reference experiment: data, probe, cached training runs and the ablation table."""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acg import AgeProbe, train_age_probe
from .evaluation import DEFAULT_TARGETS, EvalReport, evaluate
from .synthface import AgeCodebook, FaceDataset, build_codebook, generate_dataset, stratified_specs
from .training import (TrainConfig, TrainResult, load_probe, load_training_checkpoint, save_probe,
                       save_training_checkpoint, train)

ABLATIONS = {
    "full": {},
    "W/O Age": {"enable_age_branch": False},
    "W/O ID": {"enable_id_branch": False},
    "W/O ACG": {"enable_acg": False},
}
# settings that only influence stage II; stage-I runs that differ only here are shared
STAGE_TWO_FIELDS = ("stage2_steps", "lam", "enable_acg", "acg_input", "acg_target", "acg_warmup_steps",
                    "acg_lr", "sampler", "sample_steps")


def cache_dir(path=None) -> Path:
    p = Path(path or os.environ.get("AGEDIT_CACHE_DIR", Path.home() / ".cache" / "agedit"))
    p.mkdir(parents=True, exist_ok=True)
    return p


@dataclass
class ReferenceSetup:
    dataset: FaceDataset
    codebook: AgeCodebook
    probe: AgeProbe
    test_specs: list
    data_seconds: float = 0.0


def reference_setup(n: int = 8500, data_seed: int = 7, test_seed: int = 2024, n_test: int = 100,
                    probe_seed: int = 0, cache=None) -> ReferenceSetup:
    """Dataset, codebook, frozen age probe and the stratified held-out specs."""
    start = time.perf_counter()
    ds = generate_dataset(n, data_seed)
    cb = build_codebook(ds)
    key = hashlib.sha256(f"probe|{ds.manifest['manifest_hash']}|{probe_seed}".encode()).hexdigest()[:20]
    path = cache_dir(cache) / f"probe_{key}.ckpt" if cache is not False else None
    if path is not None and path.exists():
        probe = load_probe(path)
    else:
        probe = train_age_probe(ds.images, ds.ages, seed=probe_seed)
        if path is not None:
            save_probe(path, probe)
    specs = stratified_specs(n_test, test_seed)
    return ReferenceSetup(ds, cb, probe, specs, time.perf_counter() - start)


def _run_key(cfg: TrainConfig, ds: FaceDataset, init_key: str) -> str:
    body = json.dumps({"config": cfg.to_dict(), "data": ds.manifest.get("manifest_hash", ""),
                       "init": init_key}, sort_keys=True)
    return hashlib.sha256(body.encode()).hexdigest()[:20]


def train_cached(cfg: TrainConfig, setup: ReferenceSetup, init: tuple[str, TrainResult] | None = None,
                 cache=None, progress=None) -> tuple[str, TrainResult, dict]:
    """Train (or load) one stage; returns ``(key, result, info)``.

    ``info`` carries ``seconds`` and the loss log path. Cached results keep
    their log on disk next to the checkpoint.
    """
    key = _run_key(cfg, setup.dataset, init[0] if init else "")
    root = cache_dir(cache)
    ckpt, log, meta = root / f"run_{key}.ckpt", root / f"run_{key}.log", root / f"run_{key}.json"
    if ckpt.exists() and meta.exists():
        result = load_training_checkpoint(ckpt)
        info = json.loads(meta.read_text())
        result.log = read_loss_log(log)
        result.seconds = info["seconds"]
        return key, result, info
    result = train(cfg, setup.dataset, setup.codebook, setup.probe,
                   init=init[1] if init else None, log_path=log, progress=progress)
    save_training_checkpoint(ckpt, result)
    info = {"seconds": result.seconds, "log": str(log), "config_digest": cfg.digest(), "cached": False}
    meta.write_text(json.dumps(info))
    return key, result, info


def read_loss_log(path) -> list:
    from .training import LogRow
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        s, a, b, c = line.split()
        rows.append(LogRow(int(s), float(a), float(b), float(c)))
    return rows


def train_two_stage(cfg: TrainConfig, setup: ReferenceSetup, cache=None, progress=None):
    """Stage I then stage II as separately cached runs.

    Returns ``(stage1, stage2, runs)`` where ``runs`` maps each run's cache key
    to the seconds it took to train.
    """
    k1, r1, i1 = train_cached(cfg.replace(stage="I", **_stage_two_defaults()), setup, cache=cache,
                              progress=progress)
    k2, r2, i2 = train_cached(cfg.replace(stage="II"), setup, init=(k1, r1), cache=cache, progress=progress)
    return r1, r2, {k1: i1["seconds"], k2: i2["seconds"]}


def _stage_two_defaults() -> dict:
    d = TrainConfig()
    return {f: getattr(d, f) for f in STAGE_TWO_FIELDS}


@dataclass
class AblationRow:
    variant: str
    average_mae: float
    identity_similarity: float
    per_target_mae: dict
    train_seconds: float


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)
    seconds: float = 0.0
    reports: dict[str, EvalReport] = field(default_factory=dict, repr=False)
    run_seconds: dict[str, float] = field(default_factory=dict)
    eval_seconds: float = 0.0

    @property
    def compute_seconds(self) -> float:
        """Training time of each distinct run (shared runs counted once) plus evaluation time."""
        return float(sum(self.run_seconds.values()) + self.eval_seconds)

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def format(self) -> str:
        lines = [f"{'variant':<10} {'MAE':>8} {'ID sim':>8}"]
        lines += [f"{r.variant:<10} {r.average_mae:8.3f} {r.identity_similarity:8.3f}" for r in self.rows]
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {"format_version": 1, "seconds": self.seconds, "compute_seconds": self.compute_seconds,
                "rows": [{"variant": r.variant, "average_mae": r.average_mae,
                          "identity_similarity": r.identity_similarity,
                          "per_target_mae": {str(k): v for k, v in r.per_target_mae.items()},
                          "train_seconds": r.train_seconds} for r in self.rows]}


def ablate(base: TrainConfig, setup: ReferenceSetup, variants=None, targets=DEFAULT_TARGETS,
           cache=None, progress=None) -> AblationTable:
    """Train and evaluate each ablation variant (stage-I runs are shared where possible)."""
    variants = variants or ABLATIONS
    table = AblationTable()
    start = time.perf_counter()
    for name, changes in variants.items():
        cfg = base.replace(**changes)
        _, result, runs = train_two_stage(cfg, setup, cache=cache, progress=progress)
        table.run_seconds.update(runs)
        t0 = time.perf_counter()
        report = evaluate(result.model, setup.codebook, setup.test_specs, targets,
                          sampler=cfg.sampler, steps=cfg.sample_steps,
                          manifest_hash=setup.dataset.manifest.get("manifest_hash", ""))
        table.eval_seconds += time.perf_counter() - t0
        table.reports[name] = report
        table.rows.append(AblationRow(name, report.average_mae, report.identity_similarity,
                                      report.per_target_mae, sum(runs.values())))
    table.seconds = time.perf_counter() - start
    return table


def smoothed(curve, window: int = 250) -> np.ndarray:
    """Means of consecutive non-overlapping windows."""
    curve = np.asarray(curve, dtype=np.float64)
    k = len(curve) // window
    return curve[: k * window].reshape(k, window).mean(axis=1)
