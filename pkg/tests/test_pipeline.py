"""Run cache, stage sharing and curve smoothing of the reference pipeline."""
import numpy as np
import pytest

from agedit.acg import train_age_probe
from agedit.pipeline import ReferenceSetup, ablate, read_loss_log, smoothed, train_cached, train_two_stage
from agedit.synthface import stratified_specs
from agedit.training import TrainConfig

TINY = dict(d_model=16, n_blocks=1, batch_size=8, stage1_steps=5, stage2_steps=3, acg_warmup_steps=2,
            sample_steps=4)


@pytest.fixture(scope="module")
def setup(small_dataset):
    ds, cb = small_dataset
    probe = train_age_probe(ds.images, ds.ages, steps=100)
    return ReferenceSetup(ds, cb, probe, stratified_specs(3, 0))


def test_smoothed_windows():
    # [TRIVIAL] non-overlapping window means, trailing remainder dropped
    np.testing.assert_allclose(smoothed(np.arange(10.0), 4), [1.5, 5.5])
    assert len(smoothed(np.ones(2000), 250)) == 8


def test_cache_reuses_runs(setup, tmp_path):
    cfg = TrainConfig(stage="I", **TINY)
    k1, r1, i1 = train_cached(cfg, setup, cache=tmp_path)
    k2, r2, i2 = train_cached(cfg, setup, cache=tmp_path)
    assert k1 == k2 and len(list(tmp_path.glob("run_*.ckpt"))) == 1
    assert [row.total for row in r2.log] == pytest.approx([row.total for row in r1.log], rel=1e-6)
    for (n, p), (_, q) in zip(r1.model.named_parameters(), r2.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)
    assert len(read_loss_log(i1["log"])) == 5


def test_stage_one_shared_across_stage_two_variants(setup, tmp_path):
    base = TrainConfig(**TINY)
    train_two_stage(base, setup, cache=tmp_path)
    train_two_stage(base.replace(enable_acg=False), setup, cache=tmp_path)
    train_two_stage(base.replace(lam=0.5), setup, cache=tmp_path)
    # one shared stage-I run plus three stage-II runs
    assert len(list(tmp_path.glob("run_*.ckpt"))) == 4


def test_ablation_rows(setup, tmp_path):
    table = ablate(TrainConfig(**TINY), setup, targets=(20, 50), cache=tmp_path)
    assert [r.variant for r in table.rows] == ["full", "W/O Age", "W/O ID", "W/O ACG"]
    assert table.row("W/O ID").average_mae >= 0 and "variant" in table.format()
    assert table.to_json()["rows"][0]["per_target_mae"].keys() == {"20", "50"}
    # W/O Age and W/O ID change the architecture, so only two stage-I runs are shared
    assert len(list(tmp_path.glob("run_*.ckpt"))) == 3 + 4


def test_ablation_counts_shared_runs_once(setup, tmp_path):
    table = ablate(TrainConfig(**TINY), setup, targets=(20,), cache=tmp_path)
    assert len(table.run_seconds) == 7
    assert table.compute_seconds == pytest.approx(sum(table.run_seconds.values()) + table.eval_seconds)
    assert table.compute_seconds <= sum(r.train_seconds for r in table.rows) + table.eval_seconds
