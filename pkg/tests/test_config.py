import pytest

from awsup.config import RunConfig, load_config, parse_text
from awsup.errors import ConfigError


def test_defaults_and_overrides():
    run = parse_text("""
# comment line
seed = 7
pipeline.epochs_auto = 3   # trailing comment
pipeline.augment = false
phantom.outer_radius = 14.0, 19.5
phantom.noise_sigma = 0.0
experiment.role = scar
""")
    assert run.seed == 7 and run.pipeline.seed == 7
    assert run.pipeline.epochs_auto == 3 and run.pipeline.augment is False
    assert run.phantom.outer_radius == (14.0, 19.5)
    assert run.phantom.noise_sigma == 0.0
    assert run.experiment.role == "scar"
    assert run.pipeline.K == 10


def test_text_round_trip():
    run = parse_text("seed = 3\npipeline.margin = 6\nensemble.n_learners = 5\n")
    again = parse_text(run.to_text())
    assert again == run


def test_contrast_table_round_trip():
    run = RunConfig()
    assert parse_text(run.to_text()).phantom.contrast == run.phantom.contrast


@pytest.mark.parametrize("text", [
    "pipeline.nope = 1",
    "bogus.k = 1",
    "no equals sign",
    "pipeline.K = ten",
    "pipeline.fine_size = 20",
    "ensemble.n_learners = 4",
    "experiment.role = edema",
])
def test_rejections(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
    assert load_config(None) == RunConfig()
