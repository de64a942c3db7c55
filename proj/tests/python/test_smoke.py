import json
import os
import pathlib
import subprocess

import jsonschema
import numpy as np
import pytest

import pmpd

DATA = pathlib.Path(os.environ.get("PMPD_DATA_DIR", pathlib.Path(__file__).parents[2] / "data")).resolve()


def schema(name):
    return json.loads((DATA / "schemas" / f"{name}.schema.json").read_text())


def test_rouge_and_lcs():
    assert pmpd.lcs_length([1, 2, 3, 4], [1, 3, 4]) == 3
    p, r, f = pmpd.rouge_l([1, 2, 3, 4], [1, 3, 4])
    assert (p, r) == pytest.approx((0.75, 1.0))
    assert f == pytest.approx(2 * 0.75 / 1.75)
    assert pmpd.rouge_l([5, 6], [5, 6])[2] == 1.0


def test_schedule_helpers():
    assert pmpd.count_schedules(4, 2) == 5
    assert pmpd.count_schedules(6, 3) == 28
    assert pmpd.switch_grid(5, 256) == [0, 64, 128, 192, 256]
    s = pmpd.two_level(3, 2, 39, 100)
    assert pmpd.avg_bitwidth(s) == pytest.approx(2.39, abs=1e-12)
    assert [pmpd.precision_at(s, i) for i in (0, 38, 39, 99)] == [3, 3, 2, 2]
    assert pmpd.schedule_violations(s) == []
    bad = dict(s, switch_points=[0, 101])
    assert pmpd.schedule_violations(bad)


def test_quantize_nests_and_bounds_error():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(7, 40)).astype(np.float32)
    qt = pmpd.quantize(w, p_max=6, group_size=16)
    full = qt.codes(6).astype(np.int64)
    for p in range(1, 7):
        assert np.array_equal(qt.codes(p), full >> (6 - p))
    err = np.abs(qt.dequantize(6) - w)
    for r in range(7):
        for g in range(0, 40, 16):
            block = w[r, g:g + 16]
            step = (block.max() - block.min()) / 63
            assert err[r, g:g + 16].max() <= step / 2 + 1e-5


def test_errors_map_to_python_exceptions():
    with pytest.raises(pmpd.ConfigError):
        pmpd.quantize(np.zeros((2, 2), np.float32), p_max=0)
    with pytest.raises(pmpd.InputError):
        pmpd.quantize(np.full((2, 2), np.nan, np.float32), p_max=4)
    with pytest.raises(pmpd.OverflowError):
        pmpd.count_schedules(10**6, 60)
    assert issubclass(pmpd.ParseError, pmpd.InputError)
    assert issubclass(pmpd.InputError, pmpd.Error)


def test_perf_report_validates_and_is_memory_bound():
    hw = json.loads((DATA / "hardware" / "npu_16k.json").read_text())
    jsonschema.validate(hw, schema("hardware"))
    rep = pmpd.perf_report("vicuna-7b", hw, pmpd.two_level(3, 2, 128, 256), 512, 256)
    assert 3.0 <= rep["speedup_vs_fp16"] <= 9.0
    assert rep["avg_bits"] == pytest.approx(2.5)


def tiny_config(out_dir):
    corpus = DATA / "corpus"
    return {
        "model_config": {"n_layers": 2, "n_heads": 2, "d_model": 16, "d_ff": 32, "vocab_size": 257,
                         "max_context": 64, "rope_theta": 10000.0},
        "p_max": 4,
        "group_size": 8,
        "precisions": [4, 3, 2],
        "quality": {"q_ref": None, "epsilon": 0.1},
        "grid_n": 3,
        "horizon": 6,
        "max_prompt_tokens": 20,
        "max_prompts": 3,
        "corpus": {k: str(corpus / f"{k}.txt") for k in ("calibration", "validation", "labels", "test")},
        "hardware": str(DATA / "hardware" / "npu_4k.json"),
        "perf": {"prompt_len": 32, "gen_len": 6},
        "learnsched": {"hidden": 4, "epochs": 3, "batch": 2},
        "output_dir": str(out_dir),
        "seed": 5,
    }


def test_pipeline_artifacts_match_schemas(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(tiny_config(out)))
    steps = [
        ["quantize"],
        ["calibrate"],
        ["solve"],
        ["gen-labels"],
        ["train-scheduler"],
        ["generate", "--schedule", str(out / "schedule.json"), "--out", str(out / "traces_static.json")],
        ["generate", "--learned", str(out / "scheduler.json"), "--out", str(out / "traces_learned.json")],
        ["generate", "--fixed-precision", "4", "--out", str(out / "traces_fixed.json")],
        ["eval", "--traces", str(out / "traces_static.json")],
        ["perf", "--schedule", str(out / "schedule.json")],
    ]
    for step in steps:
        code, _, err = pmpd.run_cli(["--config", str(cfg)] + step)
        assert code == 0, (step, err)

    checks = {
        "quantize_report.json": "quantize_report",
        "calibration.json": "calibration",
        "schedule.json": "schedule",
        "scheduler.json": "scheduler",
        "traces_static.json": "traces",
        "traces_learned.json": "traces",
        "traces_fixed.json": "traces",
        "eval.json": "eval",
        "perf.json": "perf",
    }
    for name, kind in checks.items():
        jsonschema.validate(json.loads((out / name).read_text()), schema(kind))
    lines = (out / "labels.jsonl").read_text().splitlines()
    assert lines
    for line in lines:
        jsonschema.validate(json.loads(line), schema("label"))
    assert (out / "model.pmpd").read_bytes()[:4] == b"PMPD"


def test_cli_exit_codes(tmp_path):
    code, _, err = pmpd.run_cli(["--config", str(tmp_path / "missing.json"), "quantize"])
    assert code == 2 and err
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"no_such_key": 1}))
    assert pmpd.run_cli(["--config", str(cfg), "quantize"])[0] == 2


@pytest.mark.skipif("PMPD_CLI" not in os.environ, reason="command-line binary not built")
def test_binary_help():
    res = subprocess.run([os.environ["PMPD_CLI"], "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "generate" in res.stdout
