import json

import pytest

from conftest import make_config

from fedgate.config import ConfigError, load_config, load_config_file


def test_defaults_applied():
    cfg = load_config(make_config())
    assert cfg.auth.cache_ttl_s == 600.0
    assert cfg.auth.token_ttl_s == 48 * 3600
    assert cfg.fabric.idle_timeout_s == 7200.0
    assert cfg.fabric.load_base_s == 10.0
    assert cfg.fabric.load_bandwidth_gb_s == 2.0
    assert cfg.gateway.max_pending_tasks == 10000
    assert cfg.batch.max_lines == 100000
    ep = cfg.endpoints[0]
    assert ep.max_instances_per_model == 4
    assert ep.registered_functions == ("infer_v1", "embed_v1")


def test_weight_bytes_follows_two_bytes_per_param():
    cfg = load_config(make_config())
    demo = next(m for m in cfg.models if m.name == "demo-8b")
    assert demo.weight_bytes == 8e9 * 2  # 16 GB


def test_unknown_keys_rejected():
    bad = make_config()
    bad["models"][0]["typo_field"] = 1
    with pytest.raises(ConfigError, match="typo_field"):
        load_config(bad)
    with pytest.raises(ConfigError, match="unknown top-level"):
        load_config(make_config(bogus_section={}))


def test_cross_references_validated():
    bad = make_config()
    bad["models"][0]["endpoints"] = ["ghost-ep"]
    with pytest.raises(ConfigError, match="ghost-ep"):
        load_config(bad)
    bad = make_config()
    bad["endpoints"][0]["cluster_id"] = "ghost"
    with pytest.raises(ConfigError, match="ghost"):
        load_config(bad)


def test_model_invariants_enforced():
    bad = make_config()
    bad["models"][0]["gpus_required"] = 0
    with pytest.raises(ConfigError, match="gpus_required"):
        load_config(bad)
    bad = make_config()
    bad["models"][0]["params_billions"] = 0
    with pytest.raises(ConfigError, match="weight_bytes"):
        load_config(bad)


def test_duplicate_names_rejected():
    bad = make_config()
    bad["models"].append(dict(bad["models"][0]))
    with pytest.raises(ConfigError, match="duplicate model"):
        load_config(bad)


def test_duplicate_endpoints_in_priority_list_rejected():
    bad = make_config()
    bad["models"][0]["endpoints"] = ["sophia-ep", "sophia-ep"]
    with pytest.raises(ConfigError, match="duplicate endpoints"):
        load_config(bad)


def test_fault_schedule_parsed():
    cfg = load_config(make_config(faults=[{"at": 12.5, "model": "demo-8b"}]))
    assert cfg.faults[0].at == 12.5
    assert cfg.faults[0].endpoint_id is None


def test_load_from_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(make_config()))
    cfg = load_config_file(path)
    assert cfg.clusters[0].nodes == 24
    assert cfg.clusters[0].vram_per_gpu_bytes == 40e9
