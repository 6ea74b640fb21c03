import json

from evdeblur.datagen import DatasetConfig
from evdeblur.experiment import ensure_dataset, run_experiment, summary_line
from evdeblur.train import TrainConfig

SMALL = DatasetConfig(n_views=2, n_novel=1, width=12, height=12, substeps=50)


def _cfg(**kw):
    return TrainConfig(**dict(dict(iters=2, n_samples=8, batch_rays=16, width=16, depth=2), **kw))


def test_ensure_dataset_reuses_matching_config(tmp_path):
    ds = ensure_dataset(SMALL, tmp_path / "ds")
    stamp = (ds / "manifest.json").stat().st_mtime_ns
    ensure_dataset(SMALL, tmp_path / "ds")
    assert (ds / "manifest.json").stat().st_mtime_ns == stamp


def test_run_is_cached_by_config_digest(tmp_path):
    ds = ensure_dataset(SMALL, tmp_path / "ds")
    a = run_experiment(ds, _cfg(), tmp_path / "run")
    b = run_experiment(ds, _cfg(), tmp_path / "run")
    assert a["run"]["train_seconds"] == b["run"]["train_seconds"]
    c = run_experiment(ds, _cfg(seed=3), tmp_path / "run")
    assert c["run"]["config_hash"] != a["run"]["config_hash"]
    stored = json.loads((tmp_path / "run" / "report.json").read_text())
    assert stored["run"]["config_hash"] == c["run"]["config_hash"]
    assert "deblur PSNR" in summary_line("x", c)


def test_single_pose_run_reports_no_ate(tmp_path):
    ds = ensure_dataset(SMALL, tmp_path / "ds")
    rep = run_experiment(ds, _cfg(p=1, lam=0.0), tmp_path / "p1")
    assert rep["ate"]["mean_trans_rmse"] is None
    assert "ATE n/a" in summary_line("p1", rep)
