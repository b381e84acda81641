"""
Tests for config module.
"""

import math

import pytest

from src.graphalign.config import (
    DIGEST_NAME,
    RESOLVED_NAME,
    RunConfig,
    load_config,
    parse_value,
    render_config,
    split_override,
    write_resolved,
)
from src.graphalign.errors import ConfigError
from typing import Optional, Tuple


class TestParseValue:
    """Tests for parse_value."""

    @pytest.mark.parametrize("text,expected", [
        ("pi", math.pi),
        ("-pi", -math.pi),
        ("pi/4", math.pi / 4),
        ("0.5*pi", 0.5 * math.pi),
        ("0.25", 0.25),
    ])
    def test_floats_and_pi(self, text, expected):
        """Test plain floats and multiples of pi."""
        assert parse_value(text, float) == pytest.approx(expected)

    def test_tuples(self):
        """Test fixed-length and variable-length tuples."""
        assert parse_value("0.0, 0.6", Tuple[float, float]) == (0.0, 0.6)
        assert parse_value("2, 5, 10", Tuple[int, ...]) == (2, 5, 10)
        with pytest.raises(ValueError):
            parse_value("1, 2, 3", Tuple[float, float])

    def test_optional_and_bool(self):
        """Test none and boolean spellings."""
        assert parse_value("none", Optional[int]) is None
        assert parse_value("yes", bool) is True
        with pytest.raises(ValueError):
            parse_value("maybe", bool)


class TestLoadConfig:
    """Tests for load_config."""

    def test_defaults(self):
        """Test that no file and no overrides gives the defaults, resolved."""
        config = load_config()

        assert config.encoder.n_groups == config.graph.n_groups
        assert config.model.l_edge == config.graph.l_edge

    def test_file_and_overrides(self, tmp_path):
        """Test that overrides win over the file."""
        path = tmp_path / "run.ini"
        path.write_text("[run]\nseed = 4\n\n[graph]\nn_groups = 6\n", encoding="utf-8")
        config = load_config(path, ["run.seed=9", "eval.init_rot_range=pi/2"])

        assert config.seed == 9
        assert config.encoder.n_groups == 6
        assert config.eval.init_rot_range == pytest.approx(math.pi / 2)

    def test_unknown_key(self):
        """Test that an unknown key names itself in the error."""
        with pytest.raises(ConfigError) as info:
            load_config(overrides=["train.learning_rte=0.1"])
        assert info.value.key == "train.learning_rte"

    def test_unknown_section(self, tmp_path):
        """Test that an unknown file section is rejected."""
        path = tmp_path / "run.ini"
        path.write_text("[plotting]\ndpi = 100\n", encoding="utf-8")

        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_value(self):
        """Test that an unparsable value raises ConfigError rather than ValueError alone."""
        with pytest.raises(ConfigError):
            load_config(overrides=["run.jobs=many"])

    def test_invalid_settings(self):
        """Test that section validation runs after parsing."""
        with pytest.raises(ConfigError):
            load_config(overrides=["run.jobs=0"])

    def test_missing_file(self, tmp_path):
        """Test that a missing config file is a config error."""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    def test_malformed_override(self):
        """Test that overrides without a section are rejected."""
        with pytest.raises(ConfigError):
            split_override("seed=3")


class TestRender:
    """Tests for render_config and write_resolved."""

    def test_render_loads_back(self, tmp_path):
        """Test that the rendered INI reproduces the same config."""
        config = load_config(overrides=["run.seed=17", "sampler.n_restarts=3", "eval.diversity_demos=2, 5"])
        path = tmp_path / "resolved.ini"
        path.write_text(render_config(config), encoding="utf-8")

        again = load_config(path)
        assert again == config
        assert again.digest() == config.digest()

    def test_digest_tracks_values(self):
        """Test that any changed value changes the digest."""
        assert RunConfig().digest() != load_config(overrides=["run.seed=1"]).digest()

    def test_write_resolved(self, tmp_path):
        """Test that both files land in the output directory."""
        config = load_config(overrides=[f"run.output_dir={tmp_path}"])
        write_resolved(config)

        assert (tmp_path / RESOLVED_NAME).exists()
        assert (tmp_path / DIGEST_NAME).read_text(encoding="utf-8").strip() == config.digest()
