import pytest

from fcan import config


def test_defaults_round_trip():
    cfg = config.RunConfig()
    assert config.parse(config.dumps(cfg)) == cfg


def test_parse_values_and_comments():
    text = """
    # a comment
    task.num_classes = 6      # trailing comment
    train.region_sizes = 2x2, 3x4
    train.channels = 4 8
    train.lr = 1e-3
    train.reward = delayed
    ablate.parts = 0 1
    """
    cfg = config.parse(text)
    assert cfg.task.num_classes == 6
    assert cfg.train.region_sizes == ((2, 2), (3, 4))
    assert cfg.train.channels == (4, 8)
    assert cfg.train.lr == 1e-3 and cfg.train.reward == "delayed"
    assert cfg.ablate.parts == (0, 1)


@pytest.mark.parametrize("text,fragment", [
    ("train.lr = fast", "x.cfg:1: train.lr"),
    ("train.epochs = 3", "x.cfg:1: train.epochs: unknown key"),
    ("model.depth = 3", "model.depth: unknown section"),
    ("\n\ntrain.lr", "x.cfg:3: expected"),
    ("train.lr = 0.1\ntrain.lr = 0.2", "x.cfg:2: train.lr: already set on line 1"),
    ("train.region_sizes = 2 2", "train.region_sizes"),
    ("train.parts = 5", "train"),
    ("ablate.arms = attention left", "ablate.arms"),
    ("ablate.parts = 0 4", "ablate.parts"),
])
def test_errors_name_the_key(text, fragment):
    with pytest.raises(config.ConfigError) as err:
        config.parse(text, "x.cfg")
    assert fragment in str(err.value)


def test_every_field_documented():
    doc = config.__doc__
    for section in config.SECTIONS:
        for name in vars(getattr(config.RunConfig(), section)):
            assert name in doc, f"{section}.{name} missing from the schema docstring"


def test_load_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.seed = 7\n")
    assert config.load(path).train.seed == 7
