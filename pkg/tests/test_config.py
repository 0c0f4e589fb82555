"""Config parsing, presets, validation, and round-tripping."""

import numpy as np
import pytest

from tsgseg.config import (
    PRESETS,
    ConfigError,
    RunConfig,
    dataset_config,
    format_config,
    load_config_file,
    model_config,
    parse_config_text,
    resolve_config,
)


class TestParse:
    def test_basic_lines(self):
        text = "steps = 50\n# a comment\nlr0 = 0.5  # trailing\n\nflip = true\n"
        assert parse_config_text(text) == {"steps": "50", "lr0": "0.5",
                                           "flip": "true"}

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError, match="line 2.*learning_rate"):
            parse_config_text("steps = 50\nlearning_rate = 1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("steps = 50\nsteps = 60\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("steps 50\n")


class TestResolve:
    def test_desk_defaults(self):
        cfg = resolve_config("desk")
        assert cfg.preset == "desk"
        assert (cfg.height, cfg.width) == (64, 64)
        assert cfg.stage_dims == (32, 64, 128)
        assert cfg.precision == "double"
        assert cfg.encoder_fusion == "tsg" and cfg.decoder_fusion == "tsg"

    def test_paper_preset_is_heavier(self):
        desk, paper = resolve_config("desk"), resolve_config("paper")
        assert paper.height > desk.height
        assert len(paper.stage_dims) == 4
        assert paper.num_classes > desk.num_classes
        assert paper.lr0 == 6e-5
        assert paper.precision == "single"

    def test_presets_enumerated(self):
        assert PRESETS == ("desk", "paper")
        with pytest.raises(ConfigError, match="preset"):
            resolve_config("huge")

    def test_overrides_typed(self):
        cfg = resolve_config("desk", {
            "steps": "25", "lr0": "5e-4", "flip": "true",
            "stage_dims": "8,16,32", "size_mix": "0.5,0.25,0.25",
            "single_stage": "2", "precision": "single",
        })
        assert cfg.steps == 25 and cfg.lr0 == 5e-4 and cfg.flip is True
        assert cfg.stage_dims == (8, 16, 32)
        assert cfg.size_mix == (0.5, 0.25, 0.25)
        assert cfg.single_stage == 2
        assert cfg.precision == "single"

    def test_single_stage_none(self):
        assert resolve_config("desk", {"single_stage": "none"}).single_stage is None

    def test_non_string_overrides_pass_through(self):
        cfg = resolve_config("desk", {"steps": 7, "stage_dims": (4, 8, 16)})
        assert cfg.steps == 7 and cfg.stage_dims == (4, 8, 16)

    def test_seed_argument_wins(self):
        assert resolve_config("desk", {"seed": "3"}, seed=11).seed == 11

    def test_bad_bool(self):
        with pytest.raises(ConfigError, match="boolean"):
            resolve_config("desk", {"flip": "maybe"})

    def test_validation_errors(self):
        with pytest.raises(ConfigError, match="precision"):
            resolve_config("desk", {"precision": "half"})
        with pytest.raises(ConfigError, match="equal length"):
            resolve_config("desk", {"stage_dims": "8,16"})
        with pytest.raises(ConfigError, match="single_stage"):
            resolve_config("desk", {"encoder_fusion": "single"})
        with pytest.raises(ConfigError, match="n_objects"):
            resolve_config("desk", {"n_objects_min": "9", "n_objects_max": "2"})
        with pytest.raises(ConfigError, match="positive"):
            resolve_config("desk", {"steps": "0"})


class TestRoundtrip:
    def test_format_parse_resolve(self, tmp_path):
        cfg = resolve_config("desk", {"steps": "17", "flip": "true",
                                      "single_stage": "3",
                                      "encoder_fusion": "single"})
        path = tmp_path / "run.cfg"
        path.write_text(format_config(cfg))
        again = resolve_config(cfg.preset, load_config_file(path))
        assert again == cfg

    def test_none_formats_as_none(self):
        text = format_config(RunConfig())
        assert "single_stage = none" in text
        assert "flip = false" in text


class TestLowering:
    def test_model_config_fields(self):
        cfg = resolve_config("desk", {"stage_dims": "8,16,32",
                                      "stage_heads": "2,2,4",
                                      "stage_blocks": "1,1,1",
                                      "d_f": "16"})
        mc = model_config(cfg)
        assert mc.image_hw == (64, 64)
        assert mc.stage_dims == (8, 16, 32)
        assert mc.d_f == 16
        assert mc.num_classes == cfg.num_classes

    def test_dataset_config_fields(self):
        cfg = resolve_config("desk", {"noise": "0.1", "n_objects_min": "3",
                                      "n_objects_max": "4"})
        dc = dataset_config(cfg)
        assert (dc.height, dc.width) == (64, 64)
        assert dc.n_objects_range == (3, 4)
        assert dc.noise == 0.1
        assert dc.num_classes == cfg.num_classes
