import csv
import json
from pathlib import Path

import pytest

from saq import cli
from saq import config as C
from saq.runner import derive_seed, fnv1a64, model_hash, run

SMALL = {"net": {"train_steps": 300}, "eval": {"chains": 256, "reference": 256, "floor_pairs": 2},
         "quant": {"recon_iterations": 20, "calib_chains": 32},
         "qlora": {"epochs": 1, "steps": [10, 5], "n_chains": 16}}


def write_cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def metrics(out):
    with open(Path(out) / "metrics.csv") as fh:
        return {(r["stage"], r["name"]): float(r["value"]) for r in csv.DictReader(fh)}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = C.from_dict({**SMALL, "kind": "train", "out_dir": str(out)})
    run(cfg)
    return str(out / "model")


# -- seeds -----------------------------------------------------------------------

def test_fnv1a64_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_derive_seed_documented_form():
    assert derive_seed(7, "train", 0) == fnv1a64(b"7:train:0") % (1 << 63)
    assert derive_seed(7, "train", 0) != derive_seed(7, "train", 1) != derive_seed(8, "train", 1)
    assert 0 <= derive_seed(123, "calibration", 4) < 2**63


# -- config ------------------------------------------------------------------------

def test_empty_config_is_valid_with_defaults():
    cfg = C.from_dict({})
    assert cfg.grid.steps == 20 and cfg.grid.spacing == "logsnr" and cfg.qlora.steps == [100, 50, 20]
    assert cfg.quant.w_bits == 8 and cfg.qlora.rank == 32 and cfg.qlora.batch_size == 4


def test_config_roundtrip_idempotent():
    cfg = C.from_dict({**SMALL, "kind": "ablate", "seed": 3})
    text = cfg.to_json()
    again = C.from_dict(json.loads(text))
    assert again.to_json() == text


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"grid": {"stepz": 3}}, {"grid": {"steps": "20"}},
                                 {"grid": {"sampler": "euler"}}, {"quant": {"w_bits": 9}},
                                 {"qlora": {"steps": [20, 50]}}, {"error": {"deltas": [0.1, 0.2]}},
                                 {"seed": -1}, {"version": 2}, {"kind": "nope"}, {"grid": []}])
def test_invalid_configs_rejected(bad):
    with pytest.raises(C.ConfigError):
        C.from_dict(bad)


def test_unknown_key_message_names_path():
    with pytest.raises(C.ConfigError, match="grid.stepz"):
        C.from_dict({"grid": {"stepz": 3}})


def test_overrides():
    data = C.apply_overrides({"grid": {"steps": 5}}, ["grid.steps=7", "quant.pairing=second_to_first",
                                                      "net.hidden_widths=[8, 8]"])
    cfg = C.from_dict(data)
    assert cfg.grid.steps == 7 and cfg.quant.pairing == "second_to_first" and cfg.net.hidden_widths == [8, 8]
    with pytest.raises(C.ConfigError):
        C.parse_override("novalue")


def test_load_errors(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(C.ConfigError):
        C.load(p)


# -- CLI -----------------------------------------------------------------------------

def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["sample", "--config", write_cfg(tmp_path, {"bogus": 1})]) == 2
    assert cli.main(["sample", "--config", write_cfg(tmp_path, {"kind": "train"})]) == 2
    assert cli.main(["sample", "--config", str(tmp_path / "none.json")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_cli_print_config(tmp_path, capsys):
    assert cli.main(["sample", "--config", write_cfg(tmp_path, {}), "--seed", "9",
                     "--override", "grid.steps=4", "--print-config"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["seed"] == 9 and printed["grid"]["steps"] == 4 and printed["kind"] == "sample"


def test_cli_stage_failure_exit_3(tmp_path):
    out = tmp_path / "o"
    code = cli.main(["sample", "--config", write_cfg(tmp_path, {"model_checkpoint": str(tmp_path / "nope")}),
                     "--out", str(out)])
    assert code == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failure"]["stage"] == "load-model"


def test_cli_divergence_exit_4(tmp_path):
    out = tmp_path / "o"
    cfg = {"distribution": {"std": 1e200}, "net": {"train_steps": 3}}
    with pytest.warns(RuntimeWarning):
        code = cli.main(["train", "--config", write_cfg(tmp_path, cfg), "--out", str(out)])
    assert code == 4
    assert json.loads((out / "manifest.json").read_text())["status"] == "diverged"


def test_cli_success_and_manifest(tmp_path, trained):
    out = tmp_path / "s"
    cfg = {**SMALL, "model_checkpoint": trained}
    assert cli.main(["sample", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["config"]["kind"] == "sample"
    assert set(man["artifacts"]) == {"metrics.csv", "trajectories.csv"}
    assert any(s["stage"] == "sample-x_T" for s in man["subseeds"])
    assert man["build"].startswith("saq-")


# -- runs -----------------------------------------------------------------------------

def test_train_reports_losses(trained):
    m = metrics(Path(trained).parent)
    assert {("train", "final_loss"), ("train", "heldout_loss"), ("train", "analytic_floor_loss")} <= set(m)
    assert m[("train", "heldout_loss")] > m[("train", "analytic_floor_loss")]


def test_sample_twice_byte_identical(tmp_path, trained):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        run(C.from_dict({**SMALL, "kind": "sample", "out_dir": str(out), "model_checkpoint": trained}))
        outs.append(out)
    for name in ("metrics.csv", "trajectories.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_evaluate_self_consistency(tmp_path, trained):
    out = tmp_path / "e"
    run(C.from_dict({"kind": "evaluate", "out_dir": str(out), "model_checkpoint": trained}))
    m = metrics(out)
    assert m[("evaluate", "endpoint_trajectory_mse")] == 0.0
    assert all(v == 0.0 for (s, n), v in m.items() if n.startswith("trajectory_mse_step"))
    assert m[("evaluate", "energy_distance_self")] < m[("evaluate", "self_distance_noise_floor")]


def test_ablate_zero_op_hash_equals_init(tmp_path, trained):
    out = tmp_path / "a"
    cfg = {**SMALL, "kind": "ablate", "out_dir": str(out), "model_checkpoint": trained,
           "ablate": {"compare": "none"}, "qlora": {"epochs": 0, "w_cos": 0.0, "w_mota": 0.0, "steps": [6]}}
    man = run(C.from_dict(cfg))
    assert man.model_hashes["ablated_quant"] == man.model_hashes["init_quant"]
    paths = sorted(out.glob("init_quant_*"))
    assert model_hash(paths) == man.model_hashes["init_quant"]


def test_calibrate_and_finetune_runs(tmp_path, trained):
    for kind in ("calibrate-ptq", "finetune-qlora"):
        out = tmp_path / kind
        man = run(C.from_dict({**SMALL, "kind": kind, "out_dir": str(out), "model_checkpoint": trained}))
        assert man.status == "ok" and "quant" in man.model_hashes
        m = metrics(out)
        stage = "ptq" if kind == "calibrate-ptq" else "qlora"
        assert (stage, "endpoint_trajectory_mse") in m and (stage, "energy_distance_quant") in m


def test_sample_from_quant_checkpoint(tmp_path, trained):
    q = tmp_path / "q"
    run(C.from_dict({**SMALL, "kind": "calibrate-ptq", "out_dir": str(q), "model_checkpoint": trained}))
    out = tmp_path / "s"
    man = run(C.from_dict({**SMALL, "kind": "sample", "out_dir": str(out), "quant_checkpoint": str(q / "quant")}))
    assert man.status == "ok" and [s["name"] for s in man.stages][0] == "load-quant"


def test_analyze_error_outputs(tmp_path):
    out = tmp_path / "err"
    cfg = {"kind": "analyze-error", "out_dir": str(out), "distribution": {"kind": "gaussian", "std": 0.5,
                                                                           "mean": [1.0, -0.5]}}
    run(C.from_dict(cfg))
    rep = json.loads((out / "error_report.json").read_text())
    assert set(rep["delta_slopes"]) == {"dpm1", "dpm2"}
    assert (out / "error_curves.csv").exists()
    m = metrics(out)
    assert abs(m[("analyze-error", "dpm1_delta_slope")] - 1.0) <= 0.1
    assert m[("analyze-error", "midpoint_taylor_slope")] >= 2.7
