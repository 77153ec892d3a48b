import pytest

from canmdtc.config import KEYS, ConfigError, RunConfig, dump_config, load_config, parse_value, read_config_file


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return path


def test_defaults_build_valid_training_config():
    cfg = RunConfig()
    train = cfg.training()
    assert (train.lam, train.learning_rate, train.batch_size, train.eval_every) == (1.0, 1e-4, 8, 50)
    assert cfg.model_template().input_dim == cfg.dim


def test_file_values_are_typed(tmp_path):
    path = write(tmp_path, "# comment\nlam = 0.5\n\nhidden_dims = 32, 16\nseed = 4  # trailing\nablation = no_CE\n")
    values = read_config_file(path)
    assert values == {"lam": 0.5, "hidden_dims": [32, 16], "seed": 4, "ablation": "no_CE"}


def test_unknown_key_names_line(tmp_path):
    path = write(tmp_path, "lam = 1\nlamda = 2\n")
    with pytest.raises(ConfigError, match=r"run.cfg:2: unknown key 'lamda'"):
        read_config_file(path)


def test_missing_separator(tmp_path):
    with pytest.raises(ConfigError, match=":1:"):
        read_config_file(write(tmp_path, "lam 1\n"))


def test_overrides_win_over_file(tmp_path):
    cfg = load_config(write(tmp_path, "lam = 0.5\nseed = 3\n"), {"lam": 2.0, "seed": None})
    assert cfg.lam == 2.0 and cfg.seed == 3


def test_unparsable_value():
    with pytest.raises(ConfigError):
        parse_value("seed", "three")
    assert parse_value("lambda_grid", "0.1 1,5") == [0.1, 1.0, 5.0]


def test_invalid_training_values_are_config_errors():
    with pytest.raises(ConfigError):
        RunConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        RunConfig(backend="rnn")
    with pytest.raises(ConfigError):
        RunConfig(data="/no/such/dir")


def test_dump_round_trip(tmp_path):
    cfg = RunConfig(lam=0.1, hidden_dims=[8, 4], lambda_grid=[1.0, 5.0])
    path = write(tmp_path, dump_config(cfg))
    assert load_config(path) == cfg
    assert set(read_config_file(path)) == set(KEYS)
