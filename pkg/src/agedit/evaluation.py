"""Age editing by conditional regeneration, and the metrics built on it.

An edit keeps nothing of the source image except its identity embedding: a
fresh sample is drawn from noise under the source's ``e_id``, the target age's
phrase and codebook entry, and the neutral caption.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .conditioning import AttentionCapture, ConditionBundle, get_scales, set_scales
from .diffusion import ddim_sample, ddpm_sample, forward_diffuse, make_schedule
from .io import image_grid, write_json, write_pgm
from .model import DenoiserConfig, DenoiserModel
from .synthface import (AgeCodebook, SyntheticFaceSpec, id_embeddings, identity_calibration,
                        identity_similarity, oracle_age, patch_fractions, pinned_identity_encoder,
                        region_masks, render_faces)
from .vocab import neutral_caption

DEFAULT_TARGETS = (10, 20, 30, 40, 50, 60, 70)


@contextlib.contextmanager
def scales_applied(model, scales):
    """Temporarily apply ``scales`` (dict or ``(id, age, c_age)`` tuple) to ``model``."""
    if scales is None:
        yield
        return
    if not isinstance(scales, dict):
        scales = dict(zip(("id", "age", "c_age"), scales))
    before = get_scales(model)
    set_scales(model, scales.get("id"), scales.get("age"), scales.get("c_age"))
    try:
        yield
    finally:
        set_scales(model, before.get("id"), before.get("age"), before.get("c_age"))


def source_id_embedding(source) -> np.ndarray:
    """``e_id`` of a spec, or of an image through the pinned encoder's identity estimate."""
    if isinstance(source, SyntheticFaceSpec):
        return id_embeddings(source.identity)[0]
    u = pinned_identity_encoder().predict_identity(np.asarray(source))
    return id_embeddings(np.clip(u, -1.0, 1.0))[0]


def initial_noise(seeds, shape=(1, 16, 16)) -> np.ndarray:
    """One standard-normal start per seed, independent of batch composition."""
    return np.stack([np.random.default_rng([int(s), 0]).standard_normal(shape) for s in seeds])


def edit_batch(model: DenoiserModel, codebook: AgeCodebook, id_embs, target_ages, seeds,
               scales=None, sampler: str = "ddim", steps: int = 50, sched=None,
               capture: AttentionCapture | None = None) -> np.ndarray:
    """Regenerate one image per row of ``id_embs`` at the matching target age."""
    target_ages = np.atleast_1d(np.asarray(target_ages, dtype=np.int64))
    missing = [int(a) for a in np.unique(target_ages) if int(a) not in codebook]
    if missing:
        raise KeyError(f"target age(s) {missing} not in codebook")
    id_embs = np.atleast_2d(id_embs)
    n = len(target_ages)
    sched = sched or make_schedule(model.config.T)
    bundle = ConditionBundle.build(np.tile(neutral_caption(), (n, 1)), id_embs,
                                   codebook.lookup(target_ages), target_ages)
    z_T = initial_noise(seeds)

    def eps_model(z, t, cond):
        return model.predict(z, t, cond, capture=capture)
    with scales_applied(model, scales):
        if sampler == "ddim":
            out = ddim_sample(z_T, eps_model, bundle, sched, steps)
        elif sampler == "ddpm":
            out = ddpm_sample(z_T, eps_model, bundle, sched, np.random.default_rng(int(seeds[0])))
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def edit_age(model: DenoiserModel, codebook: AgeCodebook, source, target_age: int, scales=None,
             seed: int = 0, sampler: str = "ddim", steps: int = 50) -> np.ndarray:
    """Edited ``(1, 16, 16)`` image of ``source`` (a spec or an image) at ``target_age``."""
    if int(target_age) not in codebook:
        raise KeyError(f"target age {target_age} not in codebook")
    return edit_batch(model, codebook, source_id_embedding(source)[None], [target_age], [seed],
                      scales=scales, sampler=sampler, steps=steps)[0]


# metrics -------------------------------------------------------------------

@dataclass
class EvalReport:
    targets: list[int]
    per_target_mae: dict[int, float]
    average_mae: float
    identity_similarity: float | None
    manifest_hash: str = ""
    grid_files: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    sources: np.ndarray | None = field(default=None, repr=False)
    edits: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"format_version": 1, "targets": [int(t) for t in self.targets],
                "per_target_mae": {str(k): v for k, v in self.per_target_mae.items()},
                "average_mae": self.average_mae, "identity_similarity": self.identity_similarity,
                "manifest_hash": self.manifest_hash, "grid_files": list(self.grid_files),
                "extra": self.extra}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls([int(t) for t in obj["targets"]], {int(k): v for k, v in obj["per_target_mae"].items()},
                   obj["average_mae"], obj["identity_similarity"], obj.get("manifest_hash", ""),
                   list(obj.get("grid_files", [])), obj.get("extra", {}))


def _average(per_target: dict) -> float:
    return float(sum(per_target.values()) / len(per_target))


def spec_seeds(specs, seed: int) -> list[int]:
    return [int(np.random.default_rng([seed, i]).integers(2**31 - 1)) for i in range(len(specs))]


def run_edits(model, codebook, specs, targets=DEFAULT_TARGETS, seed: int = 0, scales=None,
              sampler: str = "ddim", steps: int = 50) -> np.ndarray:
    """Edits of every spec at every target, shape ``(len(targets), len(specs), 1, 16, 16)``.

    A spec keeps the same starting noise across targets.
    """
    if len(specs) == 0:
        raise ValueError("empty test set")
    emb = id_embeddings(np.stack([s.identity for s in specs]))
    seeds = spec_seeds(specs, seed)
    k, n = len(targets), len(specs)
    out = edit_batch(model, codebook, np.tile(emb, (k, 1)), np.repeat(targets, n), seeds * k,
                     scales=scales, sampler=sampler, steps=steps)
    return out.reshape(k, n, *out.shape[1:])


def eval_age_mae(model, codebook, test_specs, targets=DEFAULT_TARGETS, edits=None, **kw) -> dict[int, float]:
    """Mean ``|oracle_age(edit) - target|`` per target."""
    if len(test_specs) == 0:
        raise ValueError("empty test set")
    edits = run_edits(model, codebook, test_specs, targets, **kw) if edits is None else edits
    return {int(t): float(np.abs(oracle_age(edits[i]) - t).mean()) for i, t in enumerate(targets)}


def eval_identity(model, codebook, test_specs, targets=DEFAULT_TARGETS, edits=None, **kw) -> float:
    """Mean identity similarity between each source render and its edits."""
    if len(test_specs) == 0:
        raise ValueError("empty test set")
    edits = run_edits(model, codebook, test_specs, targets, **kw) if edits is None else edits
    sources = render_specs(test_specs)
    sims = [identity_similarity(sources, edits[i]) for i in range(len(targets))]
    return float(np.mean(sims))


def render_specs(specs) -> np.ndarray:
    return render_faces(np.stack([s.identity for s in specs]), [s.age for s in specs],
                        [s.nuisance_seed for s in specs])


def evaluate(model, codebook, test_specs, targets=DEFAULT_TARGETS, seed: int = 0, scales=None,
             sampler: str = "ddim", steps: int = 50, manifest_hash: str = "") -> EvalReport:
    """Age MAE per target and mean identity similarity from a single set of edits."""
    edits = run_edits(model, codebook, test_specs, targets, seed=seed, scales=scales,
                      sampler=sampler, steps=steps)
    per = eval_age_mae(model, codebook, test_specs, targets, edits=edits)
    sim = eval_identity(model, codebook, test_specs, targets, edits=edits)
    extra = {"sampler": sampler, "steps": steps, "seed": seed, "n_specs": len(test_specs),
             "scales": get_scales(model) if scales is None else scales}
    return EvalReport(list(targets), per, _average(per), sim, manifest_hash, [], extra,
                      sources=render_specs(test_specs), edits=edits)


def prior_baseline(targets=DEFAULT_TARGETS, n: int = 100, seed: int = 0, cfg: DenoiserConfig | None = None,
                   steps: int = 50, sampler: str = "ddim") -> dict:
    """MAE of an untrained denoiser's samples against every target.

    The untrained model's output head is zero, so its samples are the
    sampler's response to a zero noise prediction; each of the ``n`` samples
    is read by the oracle and compared with each target.
    """
    model = DenoiserModel(cfg or DenoiserConfig(), seed=seed)
    sched = make_schedule(model.config.T)
    z_T = initial_noise(range(seed, seed + n))
    zero = lambda z, t, c: np.zeros_like(z)  # noqa: E731
    if sampler == "ddim":
        samples = ddim_sample(z_T, zero, None, sched, steps)
    else:
        samples = ddpm_sample(z_T, zero, None, sched, np.random.default_rng(seed))
    ages = oracle_age(np.clip(samples, -1.0, 1.0))
    per = {int(t): float(np.abs(ages - t).mean()) for t in targets}
    return {"per_target_mae": per, "average_mae": _average(per), "n": n, "oracle_ages": ages}


def calibration_threshold(n_sigma: float = 3.0) -> dict:
    cal = identity_calibration()
    return {"mean": cal["mean"], "std": cal["std"], "threshold": cal["mean"] + n_sigma * cal["std"]}


# reports -------------------------------------------------------------------

def report_hash(report: EvalReport) -> str:
    body = {k: v for k, v in report.to_json().items() if k != "grid_files"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def export_report(report: EvalReport, out_path, max_columns: int = 16, scale: int = 4) -> list[Path]:
    """Write ``metrics.json`` and a PGM grid (sources on top, one row per target)."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if report.edits is not None and report.sources is not None:
        cols = min(max_columns, report.sources.shape[0])
        rows = [list(report.sources[:cols])] + [list(report.edits[i, :cols]) for i in range(len(report.targets))]
        grid = out / "grid.pgm"
        write_pgm(grid, image_grid(rows), scale=scale)
        report.grid_files = [grid.name]
        report.extra["grid_shape"] = [len(rows), cols]
        files.append(grid)
    metrics = out / "metrics.json"
    payload = report.to_json()
    payload["report_hash"] = report_hash(report)
    write_json(metrics, payload)
    files.insert(0, metrics)
    return files


def load_report(path) -> EvalReport:
    obj = json.loads(Path(path).read_text())
    return EvalReport.from_json(obj)


# attention analysis --------------------------------------------------------

def branch_saliency(capture: AttentionCapture, n_tokens: int) -> dict[str, np.ndarray]:
    """Per-branch share of output magnitude at each image token, averaged over blocks.

    For every captured map the norm of the branch's (scaled) output at each
    query token is normalised to sum to one over tokens; shape ``(B, n)``.
    """
    acc: dict[str, list[np.ndarray]] = {}
    for m in capture.maps:
        norms = m["output_norms"]
        if norms is None:
            raise ValueError("capture lacks output norms")
        norms = norms.reshape(-1, n_tokens)
        acc.setdefault(m["branch"], []).append(norms / np.maximum(norms.sum(axis=1, keepdims=True), 1e-12))
    return {b: np.mean(v, axis=0) for b, v in acc.items()}


def attention_region_mass(model: DenoiserModel, codebook: AgeCodebook, specs, timesteps=None,
                          seed: int = 0) -> dict:
    """Region mass of each branch's output on noised renders of ``specs``.

    Returns ``{"age_region": {branch: (N,)}, "face_oval": {branch: (N,)}}``,
    where a mass is the branch's token saliency weighted by the fraction of
    each token covered by the region, averaged over ``timesteps``.
    """
    cfg = model.config
    sched = make_schedule(cfg.T)
    timesteps = timesteps or (cfg.T // 4, cfg.T // 2, 3 * cfg.T // 4)
    n = len(specs)
    images = render_specs(specs)
    ages = np.array([s.age for s in specs])
    bundle = ConditionBundle.build(np.tile(neutral_caption(), (n, 1)),
                                   id_embeddings(np.stack([s.identity for s in specs])),
                                   codebook.lookup(ages), ages)
    fracs = {"age_region": [], "face_oval": []}
    for s in specs:
        masks = region_masks(s)
        fracs["age_region"].append(patch_fractions(masks["age"], cfg.patch))
        fracs["face_oval"].append(patch_fractions(masks["face_oval"], cfg.patch))
    fracs = {k: np.stack(v) for k, v in fracs.items()}
    rng = np.random.default_rng(seed)
    totals: dict[str, dict[str, list]] = {"age_region": {}, "face_oval": {}}
    for t in timesteps:
        eps = rng.standard_normal(images.shape)
        z_t = forward_diffuse(images.astype(np.float64), np.full(n, t), eps, sched)
        cap = AttentionCapture()
        model.predict(z_t, np.full(n, t), bundle, capture=cap)
        sal = branch_saliency(cap, cfg.n_tokens)
        for region, f in fracs.items():
            for b, s in sal.items():
                totals[region].setdefault(b, []).append((s * f).sum(axis=1))
    return {region: {b: np.mean(v, axis=0) for b, v in d.items()} for region, d in totals.items()}


def decoupling_test(masses: dict, age_branch: str = "age") -> dict:
    """Paired one-sided t-tests of the two region-mass orderings."""
    out = {}
    for region, hi, lo in (("age_region", age_branch, "id"), ("face_oval", "id", age_branch)):
        d = masses[region][hi] - masses[region][lo]
        res = stats.ttest_1samp(d, 0.0, alternative="greater")
        out[region] = {"higher": hi, "lower": lo, "mean_margin": float(d.mean()),
                       "t": float(res.statistic), "p_value": float(res.pvalue), "n": int(len(d))}
    return out
