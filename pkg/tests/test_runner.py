"""Runner layer: strict config parsing, per-cell orchestration with
failure isolation, grid search, report emission, and the CLI."""

import json
import os
from dataclasses import replace

import numpy as np
import pytest

from metabdc.cli import main
from metabdc.config import (
    ExperimentConfig,
    ProxyConfig,
    apply_grid_overrides,
    apply_profile,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
    train_label_space,
    train_source,
)
from metabdc.core import SeededRng
from metabdc.data import HierarchySpec, SyntheticConfig
from metabdc.encoder import EncoderConfig, init_params
from metabdc.experiment import (
    CellOutcome,
    RowFragment,
    cell_list,
    grid_search,
    pretrain_encoder,
    prepare_splits,
    run_experiment,
    shot_label,
)
from metabdc.finetune import FinetuneConfig
from metabdc.report import ResultsTable, column_label, emit_report
from metabdc.ssl import IpIrmConfig


def tiny_cfg(**kw):
    base = dict(
        pretrain="none",
        pretrain_kinds=("none",),
        finetune_kinds=("meta-fine-same", "fully-supervised"),
        k_shots=(1,),
        n_way=2,
        q_query=3,
        encoder=EncoderConfig(
            height=16, width=16, channels=1, stages=((4, 3, 2), (8, 3, 2)), proj_hidden=16, proj_dim=8
        ),
        data=SyntheticConfig(count_per_fine=32, image_size=16, px=6.25, py=6.25, seed=3),
        other_data=SyntheticConfig(
            count_per_fine=32, image_size=16, px=6.25, py=6.25, seed=103,
            texture_family="rings", hierarchy=HierarchySpec.nested(8, 4),
        ),
        out_size=16,
        ipirm=IpIrmConfig(
            outer_iterations=1, partition_steps=8, partition_restarts=1, epochs_per_iter=1,
            batch_size=32, base_lr=1e-3,
        ),
        proxy=ProxyConfig(epochs=1, batch_size=32),
        tune=FinetuneConfig(lr=1e-2, epochs=2, decay_epochs=(1,), episodes_per_epoch=2, val_episodes=3),
        test_episodes=3,
        test_repeats=2,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfigParsing:
    def test_empty_dict_gives_defaults(self):
        assert config_from_dict({}) == ExperimentConfig()

    def test_dict_roundtrip(self):
        cfg = tiny_cfg(grid=(("tune.lr", (0.01, 0.003)), ("ipirm.tau", (0.3,))))
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_file_roundtrip(self, tmp_path):
        cfg = tiny_cfg(grid=(("tune.lr", (0.01,)),))
        path = str(tmp_path / "cfg.json")
        save_config(path, cfg)
        assert load_config(path) == cfg

    def test_unknown_top_level_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            config_from_dict({"epochs": 3})

    def test_unknown_nested_key(self):
        with pytest.raises(ValueError, match="unknown tune keys"):
            config_from_dict({"tune": {"momentum": 0.9}})

    def test_unknown_kinds_rejected(self):
        with pytest.raises(ValueError, match="pretrain kind"):
            tiny_cfg(pretrain="dino")
        with pytest.raises(ValueError, match="fine-tune kind"):
            tiny_cfg(finetune_kinds=("linear-probe",))

    def test_duplicate_kinds_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            tiny_cfg(finetune_kinds=("meta-fine-same", "meta-fine-same"))

    def test_n_way_capped_by_eval_classes(self):
        # default hierarchy has 2 coarse classes, so 3-way evaluation cannot fill
        with pytest.raises(ValueError, match="coarse classes"):
            tiny_cfg(n_way=3)

    def test_domain_clash_rejected(self):
        with pytest.raises(ValueError, match="domains must differ"):
            tiny_cfg(eval_domain=0)

    def test_encoder_size_must_match_preprocessing(self):
        with pytest.raises(ValueError, match="preprocessing emits"):
            tiny_cfg(out_size=32)

    def test_grid_paths_validated(self):
        with pytest.raises(ValueError, match="grid path"):
            tiny_cfg(grid=(("data.seed", (1,)),))
        with pytest.raises(ValueError, match="no field"):
            tiny_cfg(grid=(("tune.momentum", (0.9,)),))
        with pytest.raises(ValueError, match="no values"):
            tiny_cfg(grid=(("tune.lr", ()),))

    def test_apply_grid_overrides(self):
        cfg = tiny_cfg()
        out = apply_grid_overrides(cfg, {"tune.lr": 0.5, "ipirm.weight_decay": 0.01})
        assert out.tune.lr == 0.5
        assert out.ipirm.weight_decay == 0.01
        assert cfg.tune.lr == 0.01  # original untouched

    def test_profiles(self):
        ci = apply_profile(tiny_cfg(), "ci")
        assert (ci.tune.episodes_per_epoch, ci.tune.val_episodes) == (100, 100)
        assert (ci.test_episodes, ci.test_repeats) == (100, 3)
        paper = apply_profile(tiny_cfg(), "paper")
        assert (paper.test_episodes, paper.test_repeats) == (600, 5)
        with pytest.raises(ValueError, match="profile"):
            apply_profile(tiny_cfg(), "fast")

    def test_digest_tracks_content(self):
        assert tiny_cfg().digest() == tiny_cfg().digest()
        assert tiny_cfg().digest() != tiny_cfg(n_way=2, q_query=4).digest()

    def test_kind_helpers(self):
        assert train_label_space("meta-fine-same") == "fine"
        assert train_label_space("meta-coarse-other") == "coarse"
        assert train_label_space("fully-supervised") == "coarse"
        assert train_source("meta-fine-other") == "other"
        assert train_source("meta-coarse-same") == "same"

    def test_cell_list_and_shot_labels(self):
        cfg = tiny_cfg(finetune_kinds=("meta-fine-same", "fully-supervised"), k_shots=(1, 5))
        assert cell_list(cfg) == [("meta-fine-same", 1), ("meta-fine-same", 5), ("fully-supervised", 0)]
        assert shot_label(0) == "whole"
        assert shot_label(5) == "5shot"


class TestExperiment:
    def test_run_experiment_artifacts(self, tmp_path):
        cfg = tiny_cfg()
        out = str(tmp_path / "run")
        fragment = run_experiment(cfg, 7, out)
        assert fragment.pretrain == "none"
        assert set(fragment.cells) == {("meta-fine-same", 1), ("fully-supervised", 0)}
        assert not any(c.failed for c in fragment.cells.values())
        for outcome in fragment.cells.values():
            assert 0.0 <= outcome.mean <= 1.0

        assert os.path.exists(os.path.join(out, "pretrain-none-s7.mbcp"))
        assert os.path.exists(os.path.join(out, "cell-none-meta-fine-same-1shot-s7.mbcp"))
        assert os.path.exists(os.path.join(out, "cell-none-fully-supervised-whole-s7.mbcp"))

        with open(fragment.metrics_path) as f:
            lines = f.read().splitlines()
        assert lines[0] == "run_id,phase,episode,repeat,auroc"
        body = [line.split(",") for line in lines[1:]]
        assert {row[1] for row in body} == {"val", "test"}
        assert {row[0] for row in body} == {
            "none+meta-fine-same-1shot-s7",
            "none+fully-supervised-whole-s7",
        }
        meta_test = [r for r in body if r[0].startswith("none+meta") and r[1] == "test"]
        assert len(meta_test) == cfg.test_episodes * cfg.test_repeats
        sup_test = [r for r in body if r[0].startswith("none+fully") and r[1] == "test"]
        assert len(sup_test) == 1

    def test_same_seed_metrics_byte_identical(self, tmp_path):
        cfg = tiny_cfg()
        frag_a = run_experiment(cfg, 11, str(tmp_path / "a"))
        frag_b = run_experiment(cfg, 11, str(tmp_path / "b"))
        with open(frag_a.metrics_path, "rb") as f:
            bytes_a = f.read()
        with open(frag_b.metrics_path, "rb") as f:
            bytes_b = f.read()
        assert bytes_a == bytes_b

    def test_cell_failure_is_isolated(self, tmp_path):
        # shot count larger than any eval pool: that cell fails, the rest run
        cfg = tiny_cfg(k_shots=(1, 40), finetune_kinds=("meta-fine-same",))
        fragment = run_experiment(cfg, 5, str(tmp_path / "run"))
        good = fragment.cells[("meta-fine-same", 1)]
        bad = fragment.cells[("meta-fine-same", 40)]
        assert not good.failed
        assert bad.failed
        assert bad.reason and "," not in bad.reason and "\n" not in bad.reason
        with open(fragment.metrics_path) as f:
            content = f.read()
        assert "1shot" in content and "40shot" not in content

    def test_pretrain_dispatch_none_vs_proxy(self, tmp_path):
        cfg = tiny_cfg()
        primary = prepare_splits(cfg, "same")
        rng = SeededRng(0).child(1)
        raw = pretrain_encoder(cfg, primary.train, rng)
        assert np.array_equal(raw["conv0_w"], init_params(cfg.encoder, rng.child(0))["conv0_w"])

        proxy_cfg = replace(cfg, pretrain="supervised-proxy")
        trained = pretrain_encoder(proxy_cfg, primary.train, rng, str(tmp_path), "-s0")
        assert not np.array_equal(trained["conv0_w"], raw["conv0_w"])
        assert os.path.exists(str(tmp_path / "pretrain-supervised-proxy-s0.mbcp"))

    def test_other_source_cell_uses_other_data(self, tmp_path):
        cfg = tiny_cfg(finetune_kinds=("meta-fine-other",))
        fragment = run_experiment(cfg, 3, str(tmp_path / "run"))
        outcome = fragment.cells[("meta-fine-other", 1)]
        assert not outcome.failed


class TestGridSearch:
    def test_requires_axes(self):
        with pytest.raises(ValueError, match="grid axes"):
            grid_search(tiny_cfg(), 0)

    def test_exact_tie_keeps_earlier_point(self):
        cfg = tiny_cfg(grid=(("tune.lr", (0.01, 0.01)),), finetune_kinds=("meta-fine-same",))
        best_cfg, points = grid_search(cfg, 2)
        assert len(points) == 2
        assert points[0].score == points[1].score
        assert best_cfg.tune.lr == 0.01

    def test_selects_max_validation_score(self):
        cfg = tiny_cfg(grid=(("tune.epochs", (2, 3)),), finetune_kinds=("meta-fine-same",))
        best_cfg, points = grid_search(cfg, 2)
        assert [p.score is not None for p in points] == [True, True]
        best = max(points, key=lambda p: p.score)
        assert best_cfg.tune.epochs == dict(best.overrides)["tune.epochs"]

    def test_all_points_failing_is_an_error(self):
        cfg = tiny_cfg(grid=(("tune.lr", (-1.0,)),), finetune_kinds=("meta-fine-same",))
        with pytest.raises(RuntimeError, match="every grid point failed"):
            grid_search(cfg, 0)


class TestReport:
    def make_table(self):
        cfg = tiny_cfg()
        full = RowFragment(
            "none", 0,
            {
                ("meta-fine-same", 1): CellOutcome(mean=0.8123, std=0.0456),
                ("fully-supervised", 0): CellOutcome(mean=0.7, std=0.0),
            },
            "a.csv",
        )
        partial = RowFragment(
            "simclr", 0,
            {("meta-fine-same", 1): CellOutcome(reason="ValueError: class 5; support count != 40")},
            "b.csv",
        )
        return cfg, ResultsTable.from_fragments(cfg, [full, partial], 0)

    def test_layout_and_failure_rendering(self, tmp_path):
        cfg, table = self.make_table()
        csv_path, txt_path = emit_report(table, str(tmp_path))
        with open(csv_path) as f:
            lines = f.read().splitlines()
        assert lines[0] == f"# seed=0 config={cfg.digest()}"
        assert lines[1] == "pretrain,meta-fine-same@1shot,fully-supervised@whole"
        assert lines[2] == "none,0.8123 +- 0.0456,0.7000 +- 0.0000"
        assert lines[3].startswith("simclr,FAILED(ValueError")
        assert "FAILED(missing)" in lines[3]
        with open(txt_path) as f:
            text = f.read()
        assert "meta-fine-same@1shot" in text
        assert "0.8123 +- 0.0456" in text

    def test_reemit_is_byte_identical(self, tmp_path):
        _, table = self.make_table()
        csv_path, txt_path = emit_report(table, str(tmp_path))
        with open(csv_path, "rb") as f:
            first = f.read()
        emit_report(table, str(tmp_path))
        with open(csv_path, "rb") as f:
            assert f.read() == first

    def test_column_label(self):
        assert column_label(("meta-coarse-other", 5)) == "meta-coarse-other@5shot"
        assert column_label(("fully-supervised", 0)) == "fully-supervised@whole"

    def test_empty_fragments_rejected(self):
        with pytest.raises(ValueError, match="no result rows"):
            ResultsTable.from_fragments(tiny_cfg(), [], 0)


class TestCli:
    @pytest.fixture()
    def setup(self, tmp_path):
        cfg = tiny_cfg(grid=(("tune.lr", (0.01, 0.003)),))
        cfg_path = str(tmp_path / "cfg.json")
        save_config(cfg_path, cfg)
        return cfg, cfg_path, str(tmp_path / "out")

    def test_generate_data(self, setup):
        _, cfg_path, out = setup
        assert main(["generate-data", "--config", cfg_path, "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "data", "primary", "manifest.csv"))
        assert os.path.exists(os.path.join(out, "data", "other", "manifest.csv"))

    def test_pretrain_finetune_evaluate_chain(self, setup):
        _, cfg_path, out = setup
        assert main(["pretrain", "--config", cfg_path, "--seed", "4", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "pretrain-none-s4.mbcp"))
        assert main(["finetune", "--config", cfg_path, "--seed", "4", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "cell-none-meta-fine-same-1shot-s4.mbcp"))
        assert os.path.exists(os.path.join(out, "val-none+meta-fine-same-1shot-s4.csv"))
        assert main(["evaluate", "--config", cfg_path, "--seed", "4", "--out", out]) == 0
        test_csv = os.path.join(out, "test-none+meta-fine-same-1shot-s4.csv")
        with open(test_csv) as f:
            lines = f.read().splitlines()
        assert lines[0] == "run_id,phase,episode,repeat,auroc"
        assert len(lines) == 1 + 3 * 2  # test_episodes x test_repeats

    def test_evaluate_without_checkpoint_fails(self, setup, capsys):
        _, cfg_path, out = setup
        assert main(["evaluate", "--config", cfg_path, "--seed", "9", "--out", out]) == 2
        assert "finetune" in capsys.readouterr().err

    def test_grid_writes_best_config(self, setup):
        cfg, cfg_path, out = setup
        assert main(["grid", "--config", cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "grid.csv")) as f:
            lines = f.read().splitlines()
        assert lines[0] == "point,score"
        assert len(lines) == 3
        best = load_config(os.path.join(out, "best_config.json"))
        assert best.tune.lr in (0.01, 0.003)

    def test_report_full_table(self, setup):
        _, cfg_path, out = setup
        assert main(["report", "--config", cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "results.csv")) as f:
            lines = f.read().splitlines()
        assert lines[1] == "pretrain,meta-fine-same@1shot,fully-supervised@whole"
        assert [line.split(",")[0] for line in lines[2:]] == ["none"]

    def test_profile_flag_applies(self, setup, tmp_path):
        cfg, cfg_path, out = setup
        # ci profile forces 100-episode validation; the val CSV row count shows it
        assert main(["finetune", "--config", cfg_path, "--profile", "ci", "--seed", "1", "--out", out]) == 0
        val_csv = os.path.join(out, "val-none+meta-fine-same-1shot-s1.csv")
        with open(val_csv) as f:
            lines = f.read().splitlines()
        assert len(lines) == 1 + cfg.tune.epochs

    def test_bad_config_reports_error(self, tmp_path, capsys):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as f:
            json.dump({"bogus": 1}, f)
        assert main(["report", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert "unknown config keys" in capsys.readouterr().err
