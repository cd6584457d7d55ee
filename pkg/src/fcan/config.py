"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.  Keys
are ``<section>.<name>``; every key below is optional and takes the listed
default.  Unknown keys are errors, so a config file fully determines the
hyperparameters of a run.

task.*   synthetic glyph task (``fcan generate``, and ``train``/``ablate``
         when no ``--data`` directory is given)
    num_classes int     10     distractors int   3     n_train int   2000
    image_size  int     64     noise       float 0.15  n_test  int   500
    glyph_size  int     8      contrast    float 0.6   seed    int   0
    class_bits  int     36

train.*  three-step training
    parts            int    2         number of glimpses T
    region_sizes     cells  2x2 4x4 3x3   region of glimpse t, in feature cells
    samples          int    8         Monte Carlo samples K per step
    batch_size       int    64
    epochs_backbone  int    10        step 1 epochs per round
    epochs_attention int    10        step 2 epochs per round
    epochs_parts     int    10        step 3 epochs per round
    rounds           int    2
    lr               float  0.003     x lr_factor once lr_drop_at of a step's epochs are done
    lr_drop_at       float  2/3 (written as a decimal)
    lr_factor        float  0.1
    rmsprop_decay    float  0.99
    rmsprop_eps      float  1e-8
    reward           str    greedy    greedy | delayed
    arm              str    attention attention | random | center
    seed             int    0
    patience         int    3         early stop after this many epochs without val gain
    val_fraction     float  0.1       share of the training split held out
    part_size        int    32        crop side length fed to part classifiers
    channels         ints   8 16 32   backbone widths; each block halves the grid
    hidden           int    64        attention head width

ablate.* comparison runs (``fcan ablate``)
    arms             strs   attention random center
    parts            ints   0 1 2 3
    rewards          strs   greedy delayed
    reward_threshold float  0.5       mean step-2 reward that counts as "reached"
"""

from dataclasses import dataclass, field, fields, replace

from .data import GlyphTaskSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AblateConfig:
    arms: tuple = ("attention", "random", "center")
    parts: tuple = (0, 1, 2, 3)
    rewards: tuple = ("greedy", "delayed")
    reward_threshold: float = 0.5


@dataclass
class RunConfig:
    task: GlyphTaskSpec = field(default_factory=GlyphTaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


SECTIONS = ("task", "train", "ablate")


def _cells(text):
    out = []
    for tok in text.replace(",", " ").split():
        h, sep, w = tok.lower().partition("x")
        if not sep:
            raise ValueError(f"region {tok!r} is not of the form HxW")
        out.append((int(h), int(w)))
    return tuple(out)


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _strs(text):
    return tuple(text.replace(",", " ").split())


def _parser(section, name, default):
    if section == "train" and name == "region_sizes":
        return _cells
    if isinstance(default, tuple):
        return _strs if default and isinstance(default[0], str) else _ints
    if isinstance(default, bool):
        raise TypeError("boolean settings are not supported")
    return type(default)


def _format(value):
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return " ".join(f"{h}x{w}" for h, w in value)
        return " ".join(str(v) for v in value)
    return str(value)


def parse(text, source="<config>"):
    """Parse config text into a validated RunConfig."""
    cfg = RunConfig()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{source}:{lineno}"
        if not sep:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"{where}: {key}: already set on line {seen[key]}")
        seen[key] = lineno
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{where}: {key}: unknown section (expected one of {', '.join(SECTIONS)})")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if name not in names:
            raise ConfigError(f"{where}: {key}: unknown key")
        default = getattr(target, name)
        try:
            parsed = _parser(section, name, default)(value)
        except ValueError as e:
            raise ConfigError(f"{where}: {key}: cannot parse {value!r} ({e})") from None
        setattr(cfg, section, replace(target, **{name: parsed}))
    validate(cfg, source)
    return cfg


def validate(cfg, source="<config>"):
    for section, obj in (("task", cfg.task), ("train", cfg.train)):
        try:
            obj.validate()
        except ValueError as e:
            raise ConfigError(f"{source}: {section}: {e}") from None
    ab = cfg.ablate
    bad = [a for a in ab.arms if a not in ("attention", "random", "center")]
    if bad:
        raise ConfigError(f"{source}: ablate.arms: unknown arm {bad[0]!r}")
    bad = [r for r in ab.rewards if r not in ("greedy", "delayed")]
    if bad:
        raise ConfigError(f"{source}: ablate.rewards: unknown strategy {bad[0]!r}")
    too_many = [p for p in ab.parts if p < 0 or p > len(cfg.train.region_sizes)]
    if too_many:
        raise ConfigError(f"{source}: ablate.parts: {too_many[0]} needs that many train.region_sizes")


def load(path):
    with open(path) as f:
        return parse(f.read(), path)


def dumps(cfg):
    """Full config text with every key spelled out; ``parse(dumps(c)) == c``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
