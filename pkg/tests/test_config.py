"""Strict config parsing, validation messages, and hashing."""

import pytest

from fedmatch.config import ConfigError, config_hash, from_dict, parse_config, to_dict

MINIMAL = {"task": "synthetic", "seed": 1}

TUNER_AXES = [
    {"name": "learning_rate", "values": [0.01, 0.05, 0.1], "integer": False},
    {"name": "sgd_iterations", "values": [10, 20]},
]


def parse(overrides=None, base=MINIMAL):
    cfg = dict(base)
    if overrides:
        cfg.update(overrides)
    return from_dict(cfg)


class TestDefaults:
    def test_minimal_config_parses(self):
        cfg = parse()
        assert cfg.task == "synthetic"
        assert cfg.seed == 1
        assert cfg.arch_name == "mnist_mlp"  # synthetic data feeds the mlp
        assert cfg.n_clients == 10
        assert cfg.client_fraction == 1.0
        assert cfg.aggregation == "literal"
        assert cfg.partition == "iid"
        assert not cfg.use_tuner and not cfg.use_matching and not cfg.use_wd

    def test_to_dict_is_a_fixed_point(self):
        # the echoed dict materializes defaults (e.g. the task's hyper grid),
        # so one more parse/echo cycle must reproduce it exactly
        cfg = parse()
        echoed = to_dict(cfg)
        assert to_dict(from_dict(echoed)) == echoed
        assert config_hash(from_dict(echoed)) == config_hash(cfg)

    def test_tuner_config_roundtrip(self):
        cfg = parse({"use_tuner": True, "tuner": {"axes": TUNER_AXES,
                                                  "window": 5,
                                                  "update_sign": "descent"}})
        again = from_dict(to_dict(cfg))
        assert again.tuner.window == 5
        assert again.tuner.update_sign == "descent"
        assert again.hyper_grid().size == 6

    def test_output_dir_default_names_task_and_seed(self):
        cfg = parse({"seed": 7})
        assert "synthetic" in cfg.output_dir and "7" in cfg.output_dir

    def test_parse_config_reads_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text('{"task": "synthetic", "seed": 3}')
        assert parse_config(p).seed == 3

    def test_parse_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.json")

    def test_parse_config_bad_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="valid JSON"):
            parse_config(p)


class TestStrictness:
    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            parse({"archh": "mlp"})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="tuner"):
            parse({"tuner": {"axes": TUNER_AXES, "bogus": 3}})

    def test_arch_is_not_configurable(self):
        # the model family follows the task; a stray arch key is unknown
        with pytest.raises(ConfigError, match="unknown"):
            parse({"arch": "mnist_mlp"})

    def test_wrong_type_names_the_field(self):
        with pytest.raises(ConfigError, match="seed"):
            parse({"seed": "one"})

    def test_bool_is_not_an_integer(self):
        with pytest.raises(ConfigError, match="rounds"):
            parse({"rounds": True})

    def test_missing_required_field(self):
        with pytest.raises(ConfigError, match="task"):
            from_dict({"seed": 3})

    def test_unknown_task(self):
        with pytest.raises(ConfigError, match="task"):
            parse({"task": "imagenet"})

    def test_root_must_be_object(self):
        with pytest.raises(ConfigError, match="object"):
            from_dict(["task"])


class TestValidation:
    def test_real_task_requires_data_dir(self):
        with pytest.raises(ConfigError, match="data_dir"):
            parse({"task": "mnist"})

    def test_client_fraction_range(self):
        with pytest.raises(ConfigError, match="client_fraction"):
            parse({"client_fraction": 0.0})
        with pytest.raises(ConfigError, match="client_fraction"):
            parse({"client_fraction": 1.5})

    def test_non_iid_needs_client_per_class(self):
        with pytest.raises(ConfigError, match="n_clients"):
            parse({"partition": "non_iid", "n_clients": 7})

    def test_non_iid_ok_when_counts_match(self):
        cfg = parse({"partition": "non_iid", "n_clients": 10})
        assert cfg.partition == "non_iid"

    def test_non_iid_follows_synthetic_class_count(self):
        cfg = parse({"partition": "non_iid", "n_clients": 4,
                     "synthetic": {"classes": 4}})
        assert cfg.n_clients == 4

    def test_matching_and_wd_exclusive(self):
        with pytest.raises(ConfigError, match="exclusive"):
            parse({"use_matching": True, "use_wd": True})

    def test_tuner_axes_must_name_both_hypers(self):
        with pytest.raises(ConfigError, match="axes"):
            parse({"use_tuner": True,
                   "tuner": {"axes": [TUNER_AXES[0]]}})

    def test_tuner_iterations_must_be_integer_axis(self):
        bad = [TUNER_AXES[0],
               {"name": "sgd_iterations", "values": [10.5, 20.0],
                "integer": False}]
        with pytest.raises(ConfigError, match="integer"):
            parse({"use_tuner": True, "tuner": {"axes": bad}})

    def test_aggregation_enum(self):
        cfg = parse({"aggregation": "renormalized"})
        assert cfg.aggregation == "renormalized"
        with pytest.raises(ConfigError, match="aggregation"):
            parse({"aggregation": "mean"})

    def test_update_sign_enum(self):
        with pytest.raises(ConfigError, match="update_sign"):
            parse({"tuner": {"axes": TUNER_AXES, "update_sign": "sideways"}})

    def test_synthetic_input_dim_is_pinned(self):
        with pytest.raises(ConfigError, match="input_dim"):
            parse({"synthetic": {"input_dim": 100}})

    def test_zero_rounds_allowed_negative_rejected(self):
        assert parse({"rounds": 0}).rounds == 0
        with pytest.raises(ConfigError, match="rounds"):
            parse({"rounds": -1})

    def test_axis_values_must_be_sorted_unique(self):
        bad = [{"name": "learning_rate", "values": [0.1, 0.1, 0.2],
                "integer": False}, TUNER_AXES[1]]
        with pytest.raises(ConfigError):
            parse({"use_tuner": True, "tuner": {"axes": bad}})


class TestTunerSection:
    def test_grid_built_from_axes(self):
        cfg = parse({"tuner": {"axes": TUNER_AXES}})
        grid = cfg.hyper_grid()
        assert grid.size == 6
        assert grid.shape == (3, 2)
        assert [a.name for a in grid.axes] == ["learning_rate", "sgd_iterations"]

    def test_integer_flag_inferred_from_values(self):
        cfg = parse({"tuner": {"axes": TUNER_AXES}})
        lr, iters = cfg.hyper_grid().axes
        assert not lr.integer
        assert iters.integer

    def test_default_grid_when_axes_omitted(self):
        cfg = parse({"use_tuner": True})
        grid = cfg.hyper_grid()
        assert sorted(a.name for a in grid.axes) == ["learning_rate",
                                                     "sgd_iterations"]
        assert grid.size >= 4

    def test_tuner_defaults(self):
        cfg = parse()
        assert cfg.tuner.window == 10
        assert cfg.tuner.hyper_lr == pytest.approx(0.1)
        assert cfg.tuner.update_sign == "ascent"
        assert not cfg.tuner.freeze_precision


class TestHash:
    def test_hash_is_stable_across_seed_and_paths(self):
        a = parse({"seed": 1})
        b = parse({"seed": 77, "output_dir": "elsewhere"})
        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 12
        assert all(c in "0123456789abcdef" for c in config_hash(a))

    def test_hash_changes_with_substance(self):
        a = parse()
        assert config_hash(a) != config_hash(parse({"rounds": 99}))
        assert config_hash(a) != config_hash(parse({"use_matching": True}))

    def test_hash_reflects_defaults_not_spelling(self):
        # explicit defaults hash the same as omitted ones
        a = parse()
        b = parse({"n_clients": 10, "batch_size": 64})
        assert config_hash(a) == config_hash(b)
