"""Training configuration and the two-stage training loop.

Stage I minimises the noise-prediction loss alone. Stage II continues from
the stage-I weights and adds the age-guidance term,
``total = l_diff + lambda * l_age``, where ``l_age`` compares the guidance
head's reading of ``(z_t, t, eps_hat)`` against the frozen probe's age of the
clean image. Ages inside ``l_age`` are divided by ``AGE_SPAN`` so that
``lambda`` weighs two losses of similar magnitude.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .acg import AGE_SPAN, ACGHead, AgeProbe, acg_forward, age_loss, total_loss
from .conditioning import ConditionBundle
from .diffusion import diffusion_loss, forward_diffuse, make_schedule
from .io import load_checkpoint, save_checkpoint, split_prefix, with_prefix
from .model import DenoiserConfig, DenoiserModel
from .nn import Adam
from .synthface import AgeCodebook, FaceDataset
from .tensor import Tensor
from .vocab import neutral_caption

STAGES = ("I", "II", "I+II")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class MissingProbeError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    """A step produced a non-finite value; carries a diagnostic message."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "I+II"
    stage1_steps: int = 20000
    stage2_steps: int = 10000
    lam: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    T: int = 200
    d_model: int = 64
    n_blocks: int = 4
    enable_age_branch: bool = True
    enable_id_branch: bool = True
    enable_acg: bool = True
    acg_input: str = "predicted"
    acg_target: str = "probe"
    acg_warmup_steps: int = 1000
    acg_lr: float = 1e-3
    caption_dropout: float = 0.3
    joint_from_scratch: bool = False
    sampler: str = "ddim"
    sample_steps: int = 50
    deterministic: bool = True

    def __post_init__(self):
        validate_config(self)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        return config_from_dict(obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(d_model=self.d_model, d_txt=self.d_model, d_attn=self.d_model,
                              n_blocks=self.n_blocks, T=self.T,
                              enable_id_branch=self.enable_id_branch,
                              enable_age_branch=self.enable_age_branch)


CONFIG_DOCS = {
    "stage": "which stages to run: I, II or I+II",
    "stage1_steps": "optimizer steps in stage I (noise loss only)",
    "stage2_steps": "optimizer steps in stage II (noise loss + lambda * age loss)",
    "lambda": "weight of the age-guidance loss in stage II, >= 0",
    "lr": "Adam learning rate (constant)",
    "batch_size": "examples per step",
    "seed": "seed for initialisation, batches, timesteps and noise",
    "T": "diffusion timesteps",
    "d_model": "token width (also the text and attention width)",
    "n_blocks": "transformer blocks",
    "enable_age_branch": "age-embedding and age-phrase cross-attention branches",
    "enable_id_branch": "identity cross-attention branch",
    "enable_acg": "age guidance loss in stage II",
    "acg_input": "noise fed to the guidance head: predicted or true",
    "acg_target": "guidance target: probe (frozen age probe) or ground_truth",
    "acg_warmup_steps": "head-only steps on the frozen stage-I model before stage II",
    "acg_lr": "learning rate of the guidance head",
    "caption_dropout": "probability of replacing a caption by the neutral one",
    "joint_from_scratch": "allow stage II without stage-I weights",
    "sampler": "evaluation sampler: ddim or ddpm",
    "sample_steps": "DDIM steps at evaluation",
    "deterministic": "pin BLAS to one thread for bit-reproducible runs",
}


def _field_types() -> dict:
    hints = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    hints["lambda"] = hints.pop("lam")
    return hints


def validate_config(cfg: TrainConfig) -> None:
    def fail(name, msg):
        raise ConfigError(f"{name}: {msg}")
    if cfg.stage not in STAGES:
        fail("stage", f"must be one of {STAGES}, got {cfg.stage!r}")
    for name in ("stage1_steps", "stage2_steps", "acg_warmup_steps"):
        if getattr(cfg, name) < 0:
            fail(name, "must be >= 0")
    for name in ("batch_size", "T", "d_model", "n_blocks", "sample_steps"):
        if getattr(cfg, name) < 1:
            fail(name, "must be >= 1")
    if not np.isfinite(cfg.lam) or cfg.lam < 0:
        fail("lambda", f"must be a finite number >= 0, got {cfg.lam}")
    for name in ("lr", "acg_lr"):
        if not np.isfinite(getattr(cfg, name)) or getattr(cfg, name) <= 0:
            fail(name, "must be > 0")
    if not 0.0 <= cfg.caption_dropout <= 1.0:
        fail("caption_dropout", "must lie in [0, 1]")
    if cfg.acg_input not in ("predicted", "true"):
        fail("acg_input", "must be 'predicted' or 'true'")
    if cfg.acg_target not in ("probe", "ground_truth"):
        fail("acg_target", "must be 'probe' or 'ground_truth'")
    if cfg.sampler not in ("ddim", "ddpm"):
        fail("sampler", "must be 'ddim' or 'ddpm'")
    if cfg.sample_steps > cfg.T:
        fail("sample_steps", "cannot exceed T")
    if cfg.d_model % 2:
        fail("d_model", "must be even")


def config_from_dict(obj: dict) -> TrainConfig:
    """Validate types, reject unknown keys and apply defaults."""
    if not isinstance(obj, dict):
        raise ConfigError("config: top level must be a mapping")
    types = _field_types()
    unknown = sorted(set(obj) - set(types))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kwargs = {}
    for key, value in obj.items():
        want = types[key]
        if want == "bool":
            ok = isinstance(value, bool)
        elif want == "int":
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want == "float":
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(f"{key}: expected {want}, got {type(value).__name__}")
        kwargs["lam" if key == "lambda" else key] = value
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    """Read a JSON config file; an empty file means all defaults."""
    text = Path(path).read_text()
    if not text.strip():
        return TrainConfig()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: not valid JSON ({err})") from None
    return config_from_dict(obj)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def defaults_table() -> str:
    d = TrainConfig().to_dict()
    width = max(map(len, d))
    return "\n".join(f"  {k:<{width}}  {json.dumps(d[k]):<8}  {CONFIG_DOCS[k]}" for k in d)


# training ------------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    l_diff: float
    l_age: float
    total: float


@dataclass
class TrainResult:
    model: DenoiserModel
    head: ACGHead | None
    config: TrainConfig
    log: list[LogRow] = field(default_factory=list)
    warmup_log: list[float] = field(default_factory=list)
    stages_run: tuple[str, ...] = ()
    seconds: float = 0.0

    def diffusion_curve(self) -> np.ndarray:
        return np.array([r.l_diff for r in self.log])


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Single-threaded BLAS so that reductions run in a fixed order."""
    if enabled:
        with threadpool_limits(limits=1):
            yield
    else:
        yield


def build_bundle(ds: FaceDataset, idx, codebook: AgeCodebook, captions=None) -> ConditionBundle:
    """Caption, age phrase, identity embedding and codebook age embedding of records ``idx``."""
    caps = ds.caption_tokens[idx] if captions is None else captions
    return ConditionBundle.build(caps, ds.id_embeddings[idx], codebook.lookup(ds.ages[idx]), ds.ages[idx])


def _sample_batch(ds, codebook, cfg, rng, sched):
    idx = rng.integers(0, len(ds), cfg.batch_size)
    caps = ds.caption_tokens[idx].copy()
    caps[rng.random(cfg.batch_size) < cfg.caption_dropout] = neutral_caption()
    bundle = build_bundle(ds, idx, codebook, caps)
    t = rng.integers(1, sched.T + 1, cfg.batch_size)
    eps = rng.standard_normal(ds.images[idx].shape).astype(np.float32)
    z_t = forward_diffuse(ds.images[idx], t, eps, sched)
    return idx, bundle, t, eps, z_t


def _abort(step, stage, err, t, idx, ds, last):
    raise TrainingAborted(
        f"non-finite value at step {step} (stage {stage}): {err}; "
        f"timesteps {int(t.min())}..{int(t.max())}, ages {sorted(set(ds.ages[idx].tolist()))[:8]}, "
        f"last finite loss {last}") from err


def _age_targets(ds: FaceDataset, cfg: TrainConfig, probe: AgeProbe | None) -> np.ndarray:
    if cfg.acg_target == "ground_truth":
        return ds.ages.astype(np.float64)
    if probe is None:
        raise MissingProbeError("stage II with probe targets requires a trained age probe")
    if not probe.frozen:
        raise ValueError("the age probe must be frozen before it supplies targets")
    return probe.predict(ds.images)


def _write_log(fh, row: LogRow) -> None:
    if fh is not None:
        fh.write(f"{row.step} {row.l_diff:.9g} {row.l_age:.9g} {row.total:.9g}\n")


def train(config: TrainConfig, dataset: FaceDataset, codebook: AgeCodebook, probe: AgeProbe | None = None,
          init: TrainResult | dict | None = None, log_path=None, progress=None) -> TrainResult:
    """Run the stages selected by ``config.stage``.

    ``init`` (a previous result or a checkpoint ``(header, tensors)`` dict
    entry set) supplies stage-I weights when only stage II runs. ``progress``
    is called as ``progress(step, row)`` after every step.
    """
    cfg = config
    run_two = "II" in cfg.stage.split("+")
    if run_two and cfg.enable_acg and cfg.acg_target == "probe" and probe is None:
        raise MissingProbeError("stage II requires a trained age probe")
    if cfg.stage == "II" and init is None and not cfg.joint_from_scratch:
        raise ConfigError("stage: stage II needs stage-I weights (init) or joint_from_scratch")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    with deterministic_mode(cfg.deterministic):
        model = DenoiserModel(cfg.denoiser_config(), seed=cfg.seed)
        head = ACGHead(T_=cfg.T, seed=cfg.seed + 1) if cfg.enable_acg else None
        if init is not None:
            _load_init(model, head, init)
        result = TrainResult(model, head, cfg)
        sched = make_schedule(cfg.T)
        fh = open(log_path, "w") if log_path else None
        try:
            if fh:
                fh.write(f"# step l_diff l_age total | config {cfg.digest()[:16]}\n")
            if cfg.stage in ("I", "I+II"):
                _run_stage_one(result, dataset, codebook, sched, fh, progress)
            if run_two:
                _run_stage_two(result, dataset, codebook, probe, sched, fh, progress)
        finally:
            if fh:
                fh.close()
    result.seconds = time.perf_counter() - start
    return result


def _load_init(model, head, init) -> None:
    if isinstance(init, TrainResult):
        model.load_state_dict(init.model.state_dict())
        if head is not None and init.head is not None:
            head.load_state_dict(init.head.state_dict())
        return
    tensors = init["tensors"] if "tensors" in init else init
    model.load_state_dict(split_prefix(tensors, "denoiser"))
    acg_state = split_prefix(tensors, "acg")
    if head is not None and acg_state:
        head.load_state_dict(acg_state)


def _run_stage_one(result: TrainResult, ds, codebook, sched, fh, progress) -> None:
    cfg, model = result.config, result.model
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.parameters(), lr=cfg.lr)
    last = None
    for step in range(1, cfg.stage1_steps + 1):
        idx, bundle, t, eps, z_t = _sample_batch(ds, codebook, cfg, rng, sched)
        try:
            with T.Tape() as tape:
                l_diff = diffusion_loss(eps, model(z_t, t, bundle))
                loss = total_loss(l_diff, Tensor(np.zeros((), np.float32)), 0.0)
                tape.backward(loss)
            opt.step()
        except FloatingPointError as err:
            _abort(step, "I", err, t, idx, ds, last)
        opt.zero_grad()
        last = loss.item()
        row = LogRow(step, last, 0.0, last)
        result.log.append(row)
        _write_log(fh, row)
        if progress:
            progress(step, row)
    result.stages_run += ("I",)


def _run_stage_two(result: TrainResult, ds, codebook, probe, sched, fh, progress) -> None:
    cfg, model, head = result.config, result.model, result.head
    offset = len(result.log)
    opt = Adam(model.parameters(), lr=cfg.lr)
    if cfg.enable_acg:
        targets = _age_targets(ds, cfg, probe) / AGE_SPAN
        head_opt = Adam(head.parameters(), lr=cfg.acg_lr)
        _warmup_head(result, ds, codebook, sched, targets, head_opt)
    rng = np.random.default_rng([cfg.seed, 2])
    last = None
    for step in range(1, cfg.stage2_steps + 1):
        idx, bundle, t, eps, z_t = _sample_batch(ds, codebook, cfg, rng, sched)
        try:
            with T.Tape() as tape:
                eps_hat = model(z_t, t, bundle)
                l_diff = diffusion_loss(eps, eps_hat)
                if cfg.enable_acg:
                    fed = eps_hat if cfg.acg_input == "predicted" else Tensor(eps)
                    pred = T.scale(acg_forward(head, Tensor(z_t), t, fed), 1.0 / AGE_SPAN)
                    l_age = age_loss(targets[idx], pred)
                    loss = total_loss(l_diff, l_age, cfg.lam)
                else:
                    l_age = None
                    loss = l_diff
                tape.backward(loss)
            opt.step()
            if cfg.enable_acg:
                head_opt.step()
        except FloatingPointError as err:
            _abort(offset + step, "II", err, t, idx, ds, last)
        opt.zero_grad()
        if cfg.enable_acg:
            head_opt.zero_grad()
        last = loss.item()
        row = LogRow(offset + step, l_diff.item(), 0.0 if l_age is None else l_age.item(), last)
        result.log.append(row)
        _write_log(fh, row)
        if progress:
            progress(offset + step, row)
    result.stages_run += ("II",)


def _warmup_head(result: TrainResult, ds, codebook, sched, targets, head_opt) -> None:
    """Fit the guidance head alone against the frozen current denoiser."""
    cfg, model, head = result.config, result.model, result.head
    rng = np.random.default_rng([cfg.seed, 3])
    for _ in range(cfg.acg_warmup_steps):
        idx, bundle, t, eps, z_t = _sample_batch(ds, codebook, cfg, rng, sched)
        fed = model.predict(z_t, t, bundle) if cfg.acg_input == "predicted" else eps
        with T.Tape() as tape:
            pred = T.scale(acg_forward(head, z_t, t, fed), 1.0 / AGE_SPAN)
            l_age = age_loss(targets[idx], pred)
            tape.backward(l_age)
        head_opt.step()
        head_opt.zero_grad()
        result.warmup_log.append(l_age.item())


# checkpoints ---------------------------------------------------------------

def save_training_checkpoint(path, result: TrainResult, extra: dict | None = None) -> None:
    tensors = with_prefix(result.model.state_dict(), "denoiser")
    if result.head is not None:
        tensors.update(with_prefix(result.head.state_dict(), "acg"))
    header = {"kind": "denoiser", "config_digest": result.config.digest(),
              "stage": "+".join(result.stages_run) or "init", "train_config": result.config.to_dict(),
              "denoiser_config": result.model.config.to_dict(), "steps": len(result.log)}
    header.update(extra or {})
    save_checkpoint(path, tensors, header)


def load_training_checkpoint(path) -> TrainResult:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    cfg = config_from_dict(header["train_config"])
    model = DenoiserModel(cfg.denoiser_config(), seed=cfg.seed)
    model.load_state_dict(split_prefix(tensors, "denoiser"))
    acg_state = split_prefix(tensors, "acg")
    head = None
    if acg_state:
        head = ACGHead(T_=cfg.T, seed=cfg.seed + 1)
        head.load_state_dict(acg_state)
    stages = tuple(s for s in header["stage"].split("+") if s in ("I", "II"))
    return TrainResult(model, head, cfg, stages_run=stages)


def save_probe(path, probe: AgeProbe) -> None:
    header = {"kind": "age_probe", "config_digest": "", "stage": "probe", "frozen": probe.frozen,
              "val_mae": probe.val_mae, "baseline_mae": probe.baseline_mae}
    save_checkpoint(path, with_prefix(probe.state_dict(), "probe"), header)


def load_probe(path) -> AgeProbe:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "age_probe":
        raise ValueError(f"{path}: not an age-probe checkpoint")
    probe = AgeProbe()
    probe.load_state_dict(split_prefix(tensors, "probe"))
    probe.val_mae = header.get("val_mae")
    probe.baseline_mae = header.get("baseline_mae")
    if header.get("frozen"):
        probe.freeze()
    return probe
