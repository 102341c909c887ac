from pathlib import Path

import pytest

from doclm import config
from doclm.config import ConfigError, RunConfig

ROOT = Path(__file__).resolve().parents[1]


@pytest.mark.parametrize("name", ["desk.yaml", "paper.yaml"])
def test_shipped_configs_parse_and_validate(name):
    cfg = config.load(ROOT / "configs" / name, check_paths=False)
    assert cfg.encoder.d_enc == 64 and cfg.decoder.d_dec == 64


def test_desk_config_sets_every_field():
    import yaml
    raw = yaml.safe_load((ROOT / "configs" / "desk.yaml").read_text())
    assert set(raw) == set(RunConfig().to_dict())
    for sec, fields in RunConfig().to_dict().items():
        if isinstance(fields, dict):
            assert set(raw[sec]) == set(fields), sec


def test_paper_config_recipe():
    cfg = config.load(ROOT / "configs" / "paper.yaml", check_paths=False)
    t = cfg.train
    assert (t.lr_peak, t.epochs, t.batch_size, t.warmup_ratio, t.weight_decay) == (1e-5, 20, 16, 0.05, 0.01)


def test_roundtrip():
    cfg = config.load(ROOT / "configs" / "desk.yaml", check_paths=False)
    assert config.parse(cfg.dump()) == cfg
    other = RunConfig()
    other.train.lr_peak = 3.5e-4
    other.data.qa = "x.jsonl"
    other.encoder.modality = "vision"
    assert config.parse(other.dump()) == other


def test_overrides_apply_with_types(tmp_path):
    cfg = config.load(None, {"train.lr_peak": "2e-3", "decoder.loss_on_prompt": "true", "encoder.n_layers": "3",
                             "data.qa": "none", "data.classification": "c.jsonl",
                             "output_dir": str(tmp_path)}, check_paths=False)
    assert cfg.train.lr_peak == 2e-3 and cfg.decoder.loss_on_prompt is True and cfg.encoder.n_layers == 3
    assert cfg.data.qa is None and cfg.output_dir == str(tmp_path)


def test_all_problems_reported_together(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "encoder: {d_enc: 10, n_heads: 4}\n"
        "train: {warmup_ratio: 1.5, batch_size: x}\n"
        "data: {classification: missing.jsonl}\n"
        "bogus: 1\n"
    )
    with pytest.raises(ConfigError) as err:
        config.load(path)
    text = "\n".join(err.value.problems)
    for needle in ("encoder.d_enc", "warmup_ratio", "train.batch_size must be an integer",
                   "data.classification: no such file", "unknown section 'bogus'"):
        assert needle in text


def test_unknown_field_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError, match="unknown field train.lr"):
        config.parse("train: {lr: 1}")
    with pytest.raises(ConfigError):
        config.parse("a: [1")
    with pytest.raises(ConfigError):
        config.parse("- 1\n- 2")


def test_override_list_covers_every_field():
    names = {d for d, _, _ in config.override_fields()}
    assert "train.lr_peak" in names and "encoder.modality" in names and "output_dir" in names
    total = sum(len(v) for v in RunConfig().to_dict().values() if isinstance(v, dict)) + 1
    assert len(names) == total
