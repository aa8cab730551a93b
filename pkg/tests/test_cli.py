import csv
import json

import numpy as np
import pytest

from tdsm_lab import config as C
from tdsm_lab import gmm_oracle as oracle
from tdsm_lab import identities
from tdsm_lab.cli import cmd_fields, cmd_train, main
from tdsm_lab.label_noise import NoisyDataset
from tdsm_lab.score_model import ScoreModel

TINY = {"hidden": [8], "class_embed": 4, "time_embed": 8, "steps": 30, "batch_size": 32}


def write_config(tmp_path, name="cfg.json", **doc):
    doc.setdefault("seed", 0)
    doc.setdefault("out", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def read_rows(path):
    with open(path) as fh:
        first = fh.readline()
        return first, list(csv.DictReader(fh))


@pytest.mark.parametrize("doc", [
    {"objective": {"kind": "XDSM"}},
    {"noise": {"entries": [[0.8, 0.3], [0.2, 0.8]]}},
    {"mixture": {"vars": [1, 1]}},
    {"data": {"csv": "/nonexistent/data.csv"}},
    {"sampler": {"guidance": {"kind": "magic"}}},
    {"seed": -1},
])
def test_config_errors_exit_2(tmp_path, doc, capsys):
    assert main(["verify", "--config", write_config(tmp_path, **doc)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_seed_and_bad_files_exit_2(tmp_path):
    path = tmp_path / "noseed.json"
    path.write_text("{}")
    assert main(["verify", "--config", str(path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", "--config", str(bad)]) == 2
    assert main(["verify", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["frobnicate", "--config", str(path)]) == 2


def test_verify_default_passes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["verify", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    _, rows = read_rows(tmp_path / "out" / "verify.csv")
    assert {r["identity"] for r in rows} == set(identities.REGISTRY) | {"transition_invertible"}
    for r in rows:
        if r["identity"] != "transition_invertible":
            assert float(r["worst_error"]) < 1e-9


def test_verify_is_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    main(["verify", "--config", cfg])
    first = (tmp_path / "out" / "verify.csv").read_bytes()
    main(["verify", "--config", cfg])
    assert (tmp_path / "out" / "verify.csv").read_bytes() == first


def test_verify_reports_a_singular_matrix(tmp_path, capsys):
    cfg = write_config(tmp_path, noise={"entries": [[0.5, 0.5], [0.5, 0.5]]})
    assert main(["verify", "--config", cfg]) == 1
    assert "singular" in capsys.readouterr().out


def test_every_identity_is_registered():
    assert set(identities.REGISTRY) == identities.declared()
    assert len(identities.REGISTRY) >= 12


def test_gen_data_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, data={"n": 500})
    assert main(["gen-data", "--config", cfg]) == 0
    first = (tmp_path / "out" / "data.csv").read_bytes()
    assert main(["gen-data", "--config", cfg]) == 0
    assert (tmp_path / "out" / "data.csv").read_bytes() == first
    assert main(["gen-data", "--config", cfg, "--seed", "1"]) == 0
    assert (tmp_path / "out" / "data.csv").read_bytes() != first


def test_gen_data_rate_zero(tmp_path):
    cfg = write_config(tmp_path, noise={"kind": "symmetric", "rate": 0.0}, data={"n": 2000})
    assert main(["gen-data", "--config", cfg]) == 0
    _, rows = read_rows(tmp_path / "out" / "data.csv")
    assert all(r["clean_label"] == r["noisy_label"] for r in rows)


def test_gen_data_forty_percent_symmetric(tmp_path):
    cfg = write_config(tmp_path, noise={"kind": "symmetric", "rate": 0.4}, data={"n": 10000})
    assert main(["gen-data", "--config", cfg]) == 0
    ds = NoisyDataset.from_csv(tmp_path / "out" / "data.csv", classes=2)
    assert abs(np.mean(ds.clean_labels != ds.noisy_labels) - 0.4) < 0.015
    T = json.loads((tmp_path / "out" / "transition_forward.json").read_text())
    assert T["orientation"] == "forward"


def test_data_csv_round_trips_into_training_input(tmp_path):
    cfg = write_config(tmp_path, data={"n": 300})
    main(["gen-data", "--config", cfg])
    cfg2 = write_config(tmp_path, "cfg2.json", data={"csv": str(tmp_path / "out" / "data.csv")},
                        out=str(tmp_path / "out2"), score_model=TINY)
    assert main(["train", "--config", cfg2]) == 0


def test_contour_export(tmp_path):
    cfg = write_config(tmp_path, contour={"svg": True})
    assert main(["contour", "--config", cfg]) == 0
    head, rows = read_rows(tmp_path / "out" / "contour.csv")
    assert head.startswith("# tdsm-lab contour config_hash=")
    times = C.DEFAULTS["contour"]["times"]
    assert len(rows) == 400 * len(times)
    assert list(rows[0]) == ["x1", "x2", "t", "w"]
    assert (tmp_path / "out" / "contour.svg").read_text().startswith("<svg")
    by_t = {}
    for r in rows:
        by_t.setdefault(float(r["t"]), []).append(float(r["w"]))
    assert np.abs(np.array(by_t[40.0]) - 0.8).max() < 0.05
    # (0, 0) is not on the 20-point grid; use an odd grid that contains it
    cfg = write_config(tmp_path, "odd.json", grid={"n": 21}, out=str(tmp_path / "odd"))
    main(["contour", "--config", cfg])
    _, rows = read_rows(tmp_path / "odd" / "contour.csv")
    origin = [float(r["w"]) for r in rows if float(r["x1"]) == 0.0 and float(r["x2"]) == 0.0]
    assert len(origin) == len(times)
    np.testing.assert_allclose(origin, 0.8, atol=1e-14)


def test_outputs_carry_the_config_hash(tmp_path):
    cfg = write_config(tmp_path, score_model=TINY, data={"n": 200}, sampler={"n_samples": 64, "steps": 8})
    for cmd in (["gen-data"], ["train"], ["sample"], ["fields"]):
        assert main(cmd + ["--config", cfg]) == 0
    h = C.config_hash(C.load_config(cfg))
    out = tmp_path / "out"
    for name in ("data.csv", "loss_trace.csv", "samples.csv", "fields/clean_oracle.csv", "fields/mse.csv"):
        assert f"config_hash={h}" in (out / name).read_text().splitlines()[0], name
    for name in ("metrics.json", "train_summary.json"):
        assert json.loads((out / name).read_text())["config_hash"] == h
    assert json.loads((out / "score_model.json").read_text())["config_hash"] == h


def test_identical_config_identical_checkpoints(tmp_path):
    a = write_config(tmp_path, "a.json", score_model=TINY, data={"n": 300}, out=str(tmp_path / "a"))
    b = write_config(tmp_path, "b.json", score_model=TINY, data={"n": 300}, out=str(tmp_path / "b"))
    assert main(["train", "--config", a]) == 0
    assert main(["train", "--config", b]) == 0
    ja = json.loads((tmp_path / "a" / "score_model.json").read_text())
    jb = json.loads((tmp_path / "b" / "score_model.json").read_text())
    assert ja["arrays"] == jb["arrays"]
    assert (tmp_path / "a" / "loss_trace.csv").read_text().splitlines()[1:] == \
        (tmp_path / "b" / "loss_trace.csv").read_text().splitlines()[1:]


def test_clean_oracle_field_vanishes_at_the_means(tmp_path):
    cfg = write_config(tmp_path, grid={"lo": -3.0, "hi": 3.0, "n": 3, "times": [0.5]})
    assert main(["fields", "--config", cfg]) == 0
    _, rows = read_rows(tmp_path / "out" / "fields" / "clean_oracle.csv")
    for r in rows:
        x = (float(r["x1"]), float(r["x2"]))
        if (r["label"] == "0" and x == (3.0, 3.0)) or (r["label"] == "1" and x == (-3.0, -3.0)):
            assert float(r["s1"]) == 0.0 and float(r["s2"]) == 0.0


def test_oracle_sampling_flag(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["sample", "--config", cfg, "--oracle"]) == 0
    doc = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert doc["condition_accuracy"] >= 0.999
    head, rows = read_rows(tmp_path / "out" / "samples.csv")
    assert len(rows) == 4096 and list(rows[0]) == ["x1", "x2", "requested_label"]


def test_sample_needs_a_checkpoint(tmp_path):
    assert main(["sample", "--config", write_config(tmp_path)]) == 2


def test_guidance_modes_with_the_oracle(tmp_path):
    # plain guidance follows the noisy-label classifier (about 0.8 match);
    # the transition-aware and affine variants correct it
    acc = {}
    for kind in ("cg", "tcg", "affine"):
        cfg = write_config(tmp_path, f"{kind}.json", out=str(tmp_path / kind),
                           sampler={"n_samples": 512, "steps": 64, "guidance": {"kind": kind, "scale": 1.0}})
        assert main(["sample", "--config", cfg, "--oracle"]) == 0
        acc[kind] = json.loads((tmp_path / kind / "metrics.json").read_text())["condition_accuracy"]
    assert abs(acc["cg"] - 0.8) < 0.05
    assert acc["tcg"] >= 0.99
    assert acc["affine"] >= 0.99


@pytest.mark.slow
def test_dsm_on_clean_labels_fits_the_clean_field(tmp_path):
    cfg = C.load_config(write_config(tmp_path, objective={"kind": "DSM"},
                                     noise={"entries": [[1.0, 0.0], [0.0, 1.0]]}))
    summary = cmd_train(cfg)
    assert summary["field_mse_clean"] < 0.05


@pytest.mark.slow
def test_field_export_orders_the_trained_models(tmp_path, toy_runs):
    paths = []
    for kind in ("DSM", "TDSM", "SDSM"):
        art = toy_runs.get(kind, 0)
        path = tmp_path / f"{kind.lower()}.json"
        art["model"].save(path)
        paths.append(str(path))
    table = cmd_fields(C.load_config(write_config(tmp_path)), paths)
    assert table[("dsm", "noisy_oracle")] < table[("dsm", "clean_oracle")]
    assert table[("tdsm", "clean_oracle")] < table[("tdsm", "noisy_oracle")]
    assert table[("sdsm", "sdsm_fixed_point")] < table[("sdsm", "clean_oracle")]
    _, rows = read_rows(tmp_path / "out" / "fields" / "tdsm.csv")
    assert len(rows) == 400 * 4 * 2
