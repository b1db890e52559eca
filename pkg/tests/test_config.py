"""Config file parsing, overrides, and fail-fast validation."""

from fractions import Fraction

import pytest

from fedspike.config import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    load_config,
    parse_address,
    parse_fraction,
)


class TestParsers:
    def test_fraction_whole(self):
        assert parse_fraction("1") == Fraction(1)
        assert parse_fraction("4") == Fraction(4)

    def test_fraction_ratio(self):
        assert parse_fraction("1/8") == Fraction(1, 8)
        assert parse_fraction(" 3/2 ") == Fraction(3, 2)

    def test_fraction_rejects_junk(self):
        for bad in ("x", "1/0", "1/2/3", ""):
            with pytest.raises(ConfigError):
                parse_fraction(bad)

    def test_address(self):
        assert parse_address("127.0.0.1:7000") == ("127.0.0.1", 7000)
        assert parse_address("[::1]:80") == ("[::1]", 80)

    def test_address_rejects_junk(self):
        for bad in ("nohost", ":80", "host:", "host:zz"):
            with pytest.raises(ConfigError):
                parse_address(bad)


class TestLoad:
    def test_defaults_are_valid(self):
        cfg = load_config(None)
        assert cfg == ExperimentConfig()

    def test_ini_round_trip(self, tmp_path):
        cfg = ExperimentConfig(rounds=3, master_seed=99,
                               learning_rate=Fraction(1, 4), box_enabled=False)
        path = tmp_path / "exp.ini"
        path.write_text(dump_config(cfg))
        assert load_config(str(path)) == cfg

    def test_file_values_land(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(
            "[federation]\nclients = 3\nrounds = 2\ntransport = socket\n"
            "listen = 10.0.0.1:9000\n"
            "[plasticity]\nlearning_rate = 1/4\nbox_enabled = off\n"
            "[seed]\nmaster = 123\n")
        cfg = load_config(str(path))
        assert cfg.clients == 3
        assert cfg.rounds == 2
        assert cfg.transport == "socket"
        assert cfg.listen == ("10.0.0.1", 9000)
        assert cfg.learning_rate == Fraction(1, 4)
        assert cfg.box_enabled is False
        assert cfg.master_seed == 123

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[federation]\nrounds = 2\n")
        cfg = load_config(str(path), {"rounds": 9, "master_seed": 5})
        assert cfg.rounds == 9
        assert cfg.master_seed == 5

    def test_none_overrides_ignored(self):
        cfg = load_config(None, {"rounds": None, "clients": None})
        assert cfg.rounds == ExperimentConfig().rounds

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config("/nonexistent/exp.ini")

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match=r"\[mystery\]"):
            load_config(str(path))

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[federation]\nwarp_factor = 9\n")
        with pytest.raises(ConfigError, match="warp_factor"):
            load_config(str(path))

    def test_bad_int(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[federation]\nrounds = soon\n")
        with pytest.raises(ConfigError, match=r"\[federation\] rounds"):
            load_config(str(path))

    def test_bad_bool(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[plasticity]\nbox_enabled = maybe\n")
        with pytest.raises(ConfigError, match="box_enabled"):
            load_config(str(path))


class TestValidation:
    def test_error_names_the_field(self):
        cases = [
            ({"window": 0}, r"\[plasticity\] window"),
            ({"learning_rate": Fraction(3, 7)}, r"\[plasticity\] learning_rate"),
            ({"transport": "tcp"}, r"\[federation\] transport"),
            ({"classes": 11}, r"\[data\] classes"),
            ({"clients": 0}, r"\[federation\] clients"),
            ({"alpha1_shift": 0}, r"\[plasticity\] alpha1_shift"),
            ({"alpha2_shift": 2}, r"\[plasticity\] alpha2_shift"),
            ({"box_low": 10, "box_high": 5}, r"\[plasticity\] box_high"),
            ({"hidden_threshold": 0}, r"\[network\] hidden_threshold"),
            ({"master_seed": -1}, r"\[seed\] master"),
            ({"arch": "noise"}, r"\[network\] arch"),
        ]
        for kwargs, pattern in cases:
            with pytest.raises(ConfigError, match=pattern):
                ExperimentConfig(**kwargs)

    def test_arch_must_match_sensor_shape(self):
        with pytest.raises(ConfigError, match=r"\[network\] arch"):
            ExperimentConfig(width=16)  # desk arch expects 32x32x2 frames

    def test_custom_arch_with_matching_sensor(self):
        cfg = ExperimentConfig(arch="16x16x2, out", width=16, height=16)
        assert cfg.arch == "16x16x2, out"

    def test_rounds_zero_allowed(self):
        assert ExperimentConfig(rounds=0).rounds == 0

    def test_power_of_two_rates_allowed(self):
        for lr in (Fraction(1), Fraction(2), Fraction(1, 2), Fraction(1, 128)):
            assert ExperimentConfig(learning_rate=lr).learning_rate == lr


class TestModuleBuilders:
    def test_neuron_params_split(self):
        cfg = ExperimentConfig(hidden_threshold=64, output_threshold=512,
                               refractory_hidden=1, refractory_output=2)
        hp, op = cfg.hidden_params(), cfg.output_params()
        assert hp.threshold == 64 and op.threshold == 512
        assert hp.refractory_steps == 1 and op.refractory_steps == 2

    def test_error_unit_mirrors_config(self):
        cfg = ExperimentConfig(window=8, error_threshold=2, error_offset=60)
        unit = cfg.error_unit()
        assert unit.window == 8
        assert unit.threshold == 2
        assert unit.offset == 60

    def test_trace_template_mirrors_config(self):
        cfg = ExperimentConfig(alpha1_shift=3, alpha2_shift=5,
                               impulse1=8, impulse2=24)
        t = cfg.trace_template()
        assert (t.alpha1_shift, t.alpha2_shift) == (3, 5)
        assert (t.impulse1, t.impulse2) == (8, 24)

    def test_box_gate_bounds(self):
        g = ExperimentConfig(box_low=-5, box_high=70).box_gate()
        assert (g.u_min, g.u_max) == (-5, 70)
