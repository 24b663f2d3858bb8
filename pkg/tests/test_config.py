"""Run-configuration loading, overrides, validation, and hashing."""

import pytest
import yaml

from latentgaze.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    load_config,
    save_resolved_config,
    validate,
    validate_or_raise,
)


class TestLoading:
    def test_defaults_are_paper_scale(self):
        cfg = RunConfig()
        assert cfg.pretrain.lr == 0.06
        assert cfg.pretrain.batch_size == 112
        assert cfg.pretrain.epochs == 100
        assert cfg.pretrain.tau_base == 0.996
        assert cfg.finetune.lr == 0.0003
        assert cfg.finetune.batch_size == 16
        assert cfg.finetune.early_stop_patience == 2
        assert cfg.finetune.early_stop_min_delta == 0.1

    def test_yaml_round_trip(self, tmp_path):
        cfg = config_from_dict({"seed": 7, "pretrain": {"epochs": 5}})
        path = tmp_path / "run.yaml"
        save_resolved_config(cfg, path)
        again = load_config(path)
        assert again == cfg

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"pretrain": {"epochs": 5, "lr": 0.01}}))
        cfg = load_config(path, overrides=["pretrain.epochs=9", "seed=3"])
        assert cfg.pretrain.epochs == 9
        assert cfg.pretrain.lr == 0.01
        assert cfg.seed == 3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            config_from_dict({"pretrain": {"learning": 1.0}})

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, overrides=["no-equals-sign"])

    def test_tuple_coercion(self):
        cfg = config_from_dict({"architecture": {"proj_dims": [1536, 1024, 1024]}})
        assert cfg.architecture.proj_dims == (1536, 1024, 1024)


class TestValidation:
    def test_default_config_valid(self):
        assert validate(RunConfig()) == []

    def test_all_violations_enumerated(self):
        cfg = config_from_dict(
            {
                "architecture": {"proj_dims": [64, 32, 32], "pred_dims": [16, 16, 16]},
                "pretrain": {"lr": -1, "batch_size": 0},
                "augmentation": {"cutout": 2.0},
            }
        )
        errors = validate(cfg)
        joined = "\n".join(errors)
        assert "prediction input dim" in joined
        assert "learning rate" in joined
        assert "batch size" in joined
        assert "cutout" in joined
        assert len(errors) >= 4

    def test_landmarkless_dataset_conflicts_with_pmn(self):
        cfg = RunConfig()
        errors = validate(cfg, dataset_has_landmarks=False)
        assert any("eye patches" in e for e in errors)
        cfg2 = config_from_dict(
            {"ablation": {"use_pmn": False, "use_local": False}}
        )
        assert validate(cfg2, dataset_has_landmarks=False) == []

    def test_validate_or_raise(self):
        with pytest.raises(ConfigError):
            validate_or_raise(config_from_dict({"pretrain": {"epochs": 0}}))


class TestAblationFlags:
    def test_every_published_variant_expressible(self):
        variants = {
            "full": {},
            "wo_pmn": {"use_pmn": False},
            "wo_ssl": {"use_ssl_init": False},
            "wo_inv_ev": {"use_inv_ev": False},
            "wo_mbyol": {"use_mbyol_mods": False},
            "wo_local": {"use_local": False},
            "wo_global": {"use_global": False},
            "basic": {"use_mbyol_mods": False, "use_pmn": False, "use_inv_ev": False},
        }
        for name, flags in variants.items():
            cfg = config_from_dict({"ablation": flags})
            assert validate(cfg) == [], name

    def test_plain_pair_downgrade(self):
        cfg = config_from_dict({"ablation": {"use_mbyol_mods": False}})
        flags = cfg.effective_flags()
        assert not flags.use_local
        assert flags.use_global
        enc = cfg.encoder_config()
        assert not enc.global_branch.use_attention

    def test_encoder_config_dims(self):
        cfg = RunConfig()
        enc = cfg.encoder_config()
        assert enc.global_branch.input_size == (112, 112)
        assert enc.local_branch.out_dim == 52


class TestHash:
    def test_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        assert a.config_hash() == b.config_hash()
        c = config_from_dict({"seed": 1})
        assert c.config_hash() != a.config_hash()
        assert len(a.config_hash()) == 12
