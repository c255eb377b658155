import pytest

from geoplane.config import KEYS, ConfigError, load_config, parse_config


def test_defaults():
    cfg = parse_config("")
    assert cfg.epsilon == 1e-3 and cfg.N == 10 and cfg.schedule == "gauss-seidel"
    assert cfg.graph_params.eps == 1e-3
    assert cfg.solver_config.max_iters == 50 and cfg.solver_config.tol_energy == 1e-7
    assert cfg.energy_params.p_prior == 0.1
    assert set(cfg.values) == set(KEYS)


def test_precedence():
    assert parse_config("N = 5\n").N == 5
    assert parse_config("N = 5\n", ["N=8"]).N == 8


def test_constraint_names_key():
    with pytest.raises(ConfigError, match="lambda_c"):
        parse_config("lambda_c = -1\n")
    with pytest.raises(ConfigError, match="epsilon"):
        parse_config("", ["epsilon=1"])


def test_unknown_key_and_type_mismatch():
    with pytest.raises(ConfigError, match="<config>:2: unknown key 'colour'"):
        parse_config("N = 3\ncolour = red\n")
    with pytest.raises(ConfigError, match="N"):
        parse_config("N = 2.5\n")
    with pytest.raises(ConfigError, match="trace"):
        parse_config("trace = maybe\n")
    with pytest.raises(ConfigError, match="schedule"):
        parse_config("schedule = random\n")
    with pytest.raises(ConfigError, match="expected"):
        parse_config("just words\n")


def test_comments_quotes_and_lists():
    cfg = parse_config('samples = "a#b.csv"  # trailing\nground_labels = [road, "sidewalk"]\n')
    assert cfg.samples == "a#b.csv"
    assert cfg.ground_labels == ("road", "sidewalk")
    assert cfg.solver_config.ground_labels == ("road", "sidewalk")


def test_relative_paths_follow_config_file(tmp_path):
    (tmp_path / "sub").mkdir()
    path = tmp_path / "sub" / "run.cfg"
    path.write_text("samples = s.csv\nedges = /abs/e.pgm\n")
    cfg = load_config(path, ["gt=g.pfm"])
    assert cfg.samples == str(tmp_path / "sub" / "s.csv")
    assert cfg.edges == "/abs/e.pgm"
    assert cfg.gt == "g.pfm"


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.cfg")
