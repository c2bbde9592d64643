from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from retro import config
from retro.config import ConfigFileError, fingerprint, parse_text, to_text

MINIMAL = "data.source = synthetic\ntrain.mode = retro\n"

overrides = st.fixed_dictionaries({}, optional={
    "seed": st.integers(0, 10_000),
    "train.mode": st.sampled_from(["retro", "disco", "baseline_moco"]),
    "train.lr": st.floats(1e-4, 1.0),
    "train.temperature": st.floats(0.01, 1.0),
    "train.ema_momentum": st.floats(0.0, 0.9999),
    "train.epochs": st.integers(2, 50),
    "aug.flip_prob": st.floats(0.0, 1.0),
    "probe.lr_drop_milestones": st.sampled_from(["0.5", "0.3, 0.9", "0.6, 0.8"]),
    "student.widths": st.lists(st.integers(1, 64), min_size=3, max_size=3).map(
        lambda ws: ", ".join(map(str, ws))),
})


def render(values):
    base = {"data.source": "synthetic", "train.mode": "retro"}
    base.update({k: str(v) if not isinstance(v, str) else v for k, v in values.items()})
    return "".join(f"{k} = {v}\n" for k, v in base.items())


@given(overrides)
def test_serialisation_is_a_fixed_point(values):
    once = to_text(parse_text(render(values)))
    assert to_text(parse_text(once)) == once


@given(overrides, st.randoms())
def test_key_order_does_not_matter(values, random):
    lines = render(values).splitlines()
    shuffled = lines[:]
    random.shuffle(shuffled)
    assert to_text(parse_text("\n".join(lines))) == to_text(parse_text("\n".join(shuffled)))


def test_comments_and_blank_lines():
    cfg = parse_text("# heading\n\n" + MINIMAL + "seed = 7   # trailing note\n")
    assert cfg.seed == 7


def test_global_seed_reaches_every_stage():
    cfg = parse_text(MINIMAL + "seed = 13\n")
    assert cfg.pretrain.seed == cfg.train.seed == cfg.aug.seed == cfg.probe.seed == 13


@pytest.mark.parametrize("text,match", [
    (MINIMAL + "train.learning_rate = 0.1\n", "unknown key"),
    (MINIMAL + "seed = 1\nseed = 2\n", "duplicate"),
    ("train.mode = retro\n", "missing required keys: data.source"),
    (MINIMAL + "train.epochs = ten\n", "cannot parse"),
    (MINIMAL + "just some words\n", "key = value"),
    (MINIMAL + "train.seed = 3\n", "unknown key"),
])
def test_parse_errors(text, match):
    with pytest.raises(ConfigFileError, match=match):
        parse_text(text)


def test_optional_and_list_values():
    cfg = parse_text(MINIMAL + "train.frozen_epochs = none\nteacher.widths = 8, 16\nteacher.strides = 2, 2\n")
    assert cfg.train.frozen_epochs is None and cfg.teacher.widths == [8, 16]


def test_fingerprint_tracks_content_and_stage():
    a = parse_text(MINIMAL)
    b = parse_text(MINIMAL + "train.lr = 0.07\n")
    assert fingerprint(a) != fingerprint(b)
    assert fingerprint(a, "pretrain") != fingerprint(a, "distill")
    assert fingerprint(a) == fingerprint(parse_text(to_text(a)))


def test_desk_config_loads():
    cfg = config.load(Path(__file__).parents[1] / "configs" / "desk.cfg")
    assert (cfg.data.per_class, cfg.data.test_per_class, cfg.data.image_size) == (500, 100, 32)
    assert cfg.pretrain.epochs == 20 and cfg.train.epochs == 10 and cfg.probe.epochs == 30


def test_missing_file_is_reported(tmp_path):
    with pytest.raises(ConfigFileError, match="cannot read"):
        config.load(tmp_path / "absent.cfg")
