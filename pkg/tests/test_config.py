import json

import pytest

from crisp import config
from crisp.errors import ConfigError


def test_defaults_materialised():
    cfg = config.loads("{}")
    d = config.to_dict(cfg)
    assert d["factorization"] == {"r": 16, "s": 16, "group_size": 3, "exclude": ["head"]}
    assert d["gate"] == {"placement": "PRE", "activation": "silu_gate"}
    assert d["adapt"]["lr"] == 0.05 and d["compress"]["rate"] == 0.5
    assert d["mimicry"]["target_rel_error"] == 0.01


def test_round_trip_is_stable():
    text = config.dumps(config.loads('{"factorization": {"r": 8, "s": 4}, "compress": {"rate": 0.25}}'))
    again = config.dumps(config.loads(text))
    assert text == again
    assert json.loads(text)["factorization"]["r"] == 8


def test_partial_sections_keep_other_defaults():
    cfg = config.from_dict({"adapt": {"epochs": 3}})
    assert cfg.adapt.epochs == 3 and cfg.adapt.lr == 0.05


@pytest.mark.parametrize(
    "doc,where",
    [
        ({"nope": 1}, "config: unknown key(s) nope"),
        ({"mimicry": {"loss": {"kindx": "mse"}}}, "config.mimicry.loss: unknown key(s) kindx"),
        ({"adapt": {"epochs": "3"}}, "config.adapt.epochs"),
        ({"adapt": {"train_head": 1}}, "config.adapt.train_head"),
        ({"gate": {"placement": "MID"}}, "config.gate"),
        ({"compress": {"rate": 1.5}}, "config.compress"),
        ({"model": []}, "config.model"),
    ],
)
def test_invalid_documents_rejected(doc, where):
    with pytest.raises(ConfigError) as exc:
        config.from_dict(doc)
    assert where in str(exc.value)


def test_int_accepted_for_float():
    assert config.from_dict({"adapt": {"lr": 1}}).adapt.lr == 1.0


def test_bad_json():
    with pytest.raises(ConfigError):
        config.loads("{")


def test_target_task_is_shifted():
    cfg = config.from_dict({"shift": {"rotation": 0.5, "label_shift": 2}})
    assert cfg.target_task.rotation == 0.5 and cfg.target_task.label_shift == 2
    assert cfg.task.rotation == 0.0


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"model": {"seed": 4}}')
    assert config.load(p).model.seed == 4
