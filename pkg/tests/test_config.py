import pytest

from kddloam.config import PipelineConfig, format_config, load_config, parse_config_text
from kddloam.errors import ConfigError


def test_defaults():
    c = PipelineConfig()
    assert (c.voxel_size, c.alpha, c.beta, c.saliency_keep_fraction, c.k_salient, c.max_range) == (
        1.0, 0.5, 1.5, 0.7, 3, 100.0,
    )
    assert (c.ransac_inlier_threshold, c.ransac_confidence, c.ransac_max_iterations) == (0.6, 0.999, 50_000)
    assert (c.delta_min, c.tau_default, c.tau_floor, c.icp_eps_conv, c.icp_max_iters) == (0.1, 2.0, 0.3, 1e-4, 100)
    assert c.match_mode == "mutual" and c.seed == 0


def test_format_round_trip(tmp_path):
    c = PipelineConfig(alpha=0.25, fit_surfels=False, match_mode="one-way")
    path = tmp_path / "c.cfg"
    path.write_text(format_config(c))
    assert load_config(path) == c


def test_overrides_win(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(format_config(PipelineConfig(beta=1.2)))
    assert load_config(path, {"beta": 1.8}).beta == 1.8


def test_comments_and_blank_lines():
    vals = parse_config_text("# header\n\nalpha = 0.4  # inline\n", require_all=False)
    assert vals == {"alpha": 0.4}


def test_missing_key_named():
    with pytest.raises(ConfigError, match="n_max"):
        parse_config_text("voxel_size = 1.0\n")


def test_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus = 1\n", require_all=False)


def test_bad_value():
    with pytest.raises(ConfigError, match="k_salient"):
        parse_config_text("k_salient = many\n", require_all=False)


def test_malformed_line():
    with pytest.raises(ConfigError):
        parse_config_text("alpha 0.5\n", require_all=False)


def test_unreadable(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


@pytest.mark.parametrize(
    "change",
    [
        {"alpha": 0.0},
        {"alpha": 1.5},
        {"beta": 0.9},
        {"beta": 2.1},
        {"saliency_keep_fraction": 0.0},
        {"k_salient": 0},
        {"min_range": 200.0},
        {"feature_provider": "magic"},
        {"match_mode": "both"},
        {"ransac_confidence": 1.0},
    ],
)
def test_validation(change):
    with pytest.raises(ConfigError):
        PipelineConfig(**change)


def test_boolean_spellings():
    assert parse_config_text("fit_surfels = off", require_all=False) == {"fit_surfels": False}
    assert parse_config_text("fit_surfels = YES", require_all=False) == {"fit_surfels": True}
