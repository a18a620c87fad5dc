import json
import logging

import pytest

from robust_mapf.config import (
    ConfigValidationError,
    RunConfig,
    apply_overrides,
    canonical_json,
    config_hash,
    from_dict,
    load_config,
    to_dict,
)

_log = logging.getLogger(__name__)


class TestLoadConfig:
    def test_load_whenNothingGiven_thenDefaults(self):
        # Act
        cfg = load_config()

        # Assert
        assert cfg == RunConfig()
        assert cfg.seed == 42
        assert cfg.env.side == 8 and cfg.env.num_agents == 4
        assert cfg.adv.adv_fraction == 0.30
        assert cfg.macer.weight == 0.05
        assert cfg.cert.n == 500
        assert cfg.eval.episodes_per_cell == 30

    def test_load_whenPartialSection_thenOtherFieldsKeepDefaults(self, tmp_path):
        # Arrange
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"ppo": {"lr": 1e-4}, "iterations": 10}))

        # Act
        cfg = load_config(path)

        # Assert
        assert cfg.ppo.lr == 1e-4
        assert cfg.ppo.gamma == 0.95
        assert cfg.iterations == 10

    def test_load_whenOverridesAndSeed_thenAppliedAfterFile(self, tmp_path):
        # Arrange
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"adv": {"beta": 0.5}}))

        # Act
        cfg = load_config(path, ["adv.beta=0.25", "eval.fgsm_eps=[0.1, 0.2]"], seed=7)

        # Assert
        assert cfg.adv.beta == 0.25
        assert cfg.eval.fgsm_eps == (0.1, 0.2)
        assert cfg.seed == 7

    def test_load_whenInvalidJson_thenValidationError(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{not json")
        with pytest.raises(ConfigValidationError, match="invalid JSON"):
            load_config(path)

    def test_load_whenTopLevelNotObject_thenValidationError(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigValidationError):
            load_config(path)


@pytest.mark.parametrize(
    "overrides, field",
    [
        (["ppo.gamma=2.0"], "ppo"),
        (["ppo.episodes_per_batch=0"], "ppo"),
        (["adv.adv_fraction=1.5"], "adv"),
        (["cert.pool_size=0"], "cert"),
        (["macer.samples=1"], "macer"),
        (["ppo.unknown=1"], "ppo.unknown"),
        (["colour=blue"], "colour"),
        (["iterations=0"], "iterations"),
        (["seed=true"], "seed"),
        (["seed=1.5"], "seed"),
    ],
)
def test_invalid_values_name_the_offending_field(overrides, field):
    with pytest.raises(ConfigValidationError) as exc_info:
        load_config(overrides=overrides)
    assert exc_info.value.field == field


class TestOverrides:
    def test_override_whenValueNotJson_thenKeptAsString(self):
        assert apply_overrides({}, ["name=baseline"]) == {"name": "baseline"}

    def test_override_whenMissingEquals_thenValidationError(self):
        with pytest.raises(ConfigValidationError, match="key=value"):
            apply_overrides({}, ["ppo.lr"])

    def test_override_whenNestedTooDeep_thenValidationError(self):
        with pytest.raises(ConfigValidationError, match="one level"):
            apply_overrides({}, ["a.b.c=1"])

    def test_override_whenApplied_thenInputUntouched(self):
        doc = {"ppo": {"lr": 1.0}}
        apply_overrides(doc, ["ppo.lr=2.0"])
        assert doc == {"ppo": {"lr": 1.0}}


class TestHash:
    def test_hash_whenSameConfig_thenStable(self):
        assert config_hash(RunConfig()) == config_hash(load_config())
        assert len(config_hash(RunConfig())) == 64

    def test_hash_whenFieldChanges_thenDiffers(self):
        assert config_hash(RunConfig()) != config_hash(load_config(overrides=["ppo.lr=1e-4"]))

    def test_canonicalJson_whenReloaded_thenSameConfig(self):
        cfg = load_config(overrides=["adv.kappa_max=0.5", "ppo.adam_betas=[0.8, 0.99]"])
        assert from_dict(json.loads(canonical_json(cfg))) == cfg

    def test_toDict_whenCalled_thenEverySectionPresent(self):
        doc = to_dict(RunConfig())
        assert set(doc) == {"env", "ppo", "adv", "macer", "cert", "eval", "seed", "iterations", "storyboard_seed"}
