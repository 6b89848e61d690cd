import json
import math

import numpy as np
import pytest

import histomask as hm

TINY = {
    "data.genes": "6",
    "data.uni_dim": "3",
    "data.conch_dim": "2",
    "data.latent_dim": "2",
    "data.rows": "5",
    "data.cols": "5",
    "data.slices": "2",
    "model.width": "8",
    "model.layers": "1",
    "model.heads": "2",
    "model.ffn_width": "16",
    "model.time_dim": "8",
    "model.cond_hidden": "8",
    "train.pretrain_epochs": "1",
    "train.max_epochs": "1",
    "train.warm_epochs": "1",
    "train.val_warmup": "1",
    "diffusion.T": "10",
    "sample.steps": "10",
    "eval.pcc_k": "3,5",
}


def tiny_config():
    cfg = hm.RunConfig()
    for k, v in TINY.items():
        cfg.set(k, v)
    cfg.validate()
    return cfg


def test_power_schedule_values():
    s = hm.build_schedule("power", 4, 1.0)
    assert s["alpha_bar"] == pytest.approx([1.0, 0.75, 0.5, 0.25, 0.0], abs=1e-12)
    assert s["weight"][0] == pytest.approx(1.0)
    assert s["weight"][-1] == pytest.approx(0.25)
    assert hm.check_schedule_invariants("cosine", 50, 1.0) == ""


def test_log_gene_zeta():
    assert hm.log_gene_zeta(100, 50) == pytest.approx(math.log(50) / math.log(100))


def test_subsample_keeps_endpoints():
    s = hm.subsample_schedule("power", 50, 1.0, 5)
    assert s["T"] == 5
    assert s["source_t"][0] == 0 and s["source_t"][-1] == 50
    assert s["alpha_bar"][-1] == 0.0


def test_chain_matches_product_bernoulli():
    for t in range(1, 6):
        assert hm.chain_total_variation("power", 5, 2.0, 3, t) < 1e-12


def test_metrics():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(30, 4))
    assert hm.pearson(truth[:, 0], truth[:, 0]) == pytest.approx(1.0)
    mse, mae = hm.mse_mae(truth + 0.5, truth)
    assert mse == pytest.approx(0.25) and mae == pytest.approx(0.5)
    assert hm.wilcoxon_paired(np.arange(1.0, 6.0), np.zeros(5)) == pytest.approx(0.0625)
    grid = rng.normal(size=(9, 9))
    assert hm.ssim_gene_map(grid, grid) == pytest.approx(1.0)


def test_config_errors_map_to_python():
    cfg = hm.RunConfig()
    with pytest.raises(hm.ConfigError):
        cfg.set("no.such.key", "1")
    with pytest.raises(ValueError):
        cfg.set("train.rho", "1.5")
        cfg.validate()
    assert "train.rho" in hm.config_keys()


def test_generate_dataset_shapes():
    ds = hm.generate_dataset(tiny_config())
    assert len(ds["slices"]) == 2
    assert ds["slices"][0]["expr"].shape == (25, 6)
    assert ds["slices"][0]["cond"].shape == (25, 5)
    assert np.all((ds["bayes_pcc"] > 0) & (ds["bayes_pcc"] < 1))


def test_stage_chain(tmp_path):
    cfg = tiny_config()
    data, run = tmp_path / "data", tmp_path / "run"
    hm.gen_data(cfg, data)
    with pytest.raises(hm.MissingPrerequisite):
        hm.finetune(cfg, data, run)
    hm.pretrain(cfg, data, run)
    hm.finetune(cfg, data, run)
    pred = hm.sample(cfg, data, run, 10)
    report = hm.evaluate(cfg, data, run, pred)
    assert math.isfinite(report["mse"])
    on_disk = json.loads((run / "report.json").read_text())
    assert on_disk["mse"] == pytest.approx(report["mse"])
