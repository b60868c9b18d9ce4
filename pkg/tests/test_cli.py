import json

import numpy as np
import pytest
import yaml

from truckcast import cli, config as C, export as X, gridding as G, pipeline as P

TINY = {
    "synth": {"bbox": list(G.bbox_from_meters(30.6, 104.0, 4000, 4000)), "n_trucks": 24, "n_sites": 8,
              "days": 3, "seed": 1},
    "labels": {"keep_fraction": 0.5},
    "models": {k: {"hidden": 4, "kappa": 2} for k in ("birnn", "tcn", "stgcn_lite", "pdformer_lite")},
    "train": {"lr": 0.01, "epochs": 2, "patience": 2},
    "seeds": [0, 1],
}


# -- config ------------------------------------------------------------------

def test_default_settings():
    cfg = C.PipelineConfig(trajectories="x.csv")
    assert (cfg.grid.cell_size, cfg.grid.slot_len) == (1000.0, 1800)
    assert (cfg.stay.delta, cfg.stay.theta) == (200.0, 600.0)
    assert (cfg.labels.keep_fraction, cfg.labels.top_fraction) == (0.25, 0.10)
    assert (cfg.features.k, cfg.features.train_ratio) == (12, 0.8)
    assert cfg.train.batch_size == 16 and cfg.train.class_weights == (0.7, 1.2, 1.1)
    assert cfg.ensemble.weights == (1.1, 1.1, 0.5, 1.3)
    assert cfg.seeds == list(range(10))


@pytest.mark.parametrize("suffix", [".yaml", ".json"])
def test_config_round_trip(tmp_path, suffix):
    cfg = C.from_dict(TINY)
    C.dump(cfg, tmp_path / f"c{suffix}")
    back = C.load(tmp_path / f"c{suffix}")
    assert back.to_dict() == cfg.to_dict() and back.digest() == cfg.digest()
    assert back.models["tcn"].hidden == 4 and back.synth.n_trucks == 24


@pytest.mark.parametrize("bad", [
    {"bogus": 1},
    {"labels": {"keep": 0.5}},
    {"seeds": []},
    {"seeds": [1, 1]},
    {"models": {"gru": {}}},
    {"synth": None},
])
def test_config_rejects(bad):
    with pytest.raises(C.ConfigError):
        C.from_dict({**TINY, **bad})


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli.main(["pipeline", "--config", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_missing_trajectories_names_path(tmp_path, capsys):
    cfgp = tmp_path / "c.yaml"
    cfgp.write_text(yaml.safe_dump({"trajectories": str(tmp_path / "gone.csv")}))
    assert cli.main(["ingest", "--config", str(cfgp), "--out", str(tmp_path / "o")]) == 1
    assert "gone.csv" in capsys.readouterr().err
    assert (tmp_path / "o" / "ingest.FAILED").exists()


def test_show_config_applies_overrides(capsys):
    assert cli.main(["show-config", "--default-fixture", "--seed", "3", "--seed", "5", "--horizon", "2"]) == 0
    d = yaml.safe_load(capsys.readouterr().out)
    assert d["seeds"] == [3, 5] and d["features"]["horizon"] == 2
    assert d["labels"]["keep_fraction"] == 0.5


def test_exclusive_config_sources(tmp_path):
    assert cli.main(["show-config", "--default-fixture", "--config", str(tmp_path / "x.yaml")]) == 1


# -- GeoJSON -----------------------------------------------------------------

GRID = G.build_grid(G.bbox_from_meters(30.6, 104.0, 2000, 2000), 1000)


def test_geojson_contract(tmp_path):
    fused = np.array([[[0.2, 0.3, 0.5], [0.7, 0.2, 0.1]]])
    n = X.export_geojson(tmp_path / "g.geojson", GRID, [0, 3], [17], fused, [[2, 0]], [[1, 0]])
    data = json.loads((tmp_path / "g.geojson").read_text())
    assert n == 2 and data["type"] == "FeatureCollection" and len(data["features"]) == 2
    for f, cell in zip(data["features"], (0, 3)):
        ring = f["geometry"]["coordinates"][0]
        assert f["geometry"]["type"] == "Polygon" and len(ring) == 5 and ring[0] == ring[-1]
        lat, lon = GRID.cell_center(cell)
        xs, ys = [p[0] for p in ring], [p[1] for p in ring]
        assert min(xs) < lon < max(xs) and min(ys) < lat < max(ys)     # [lon, lat] order
    props = X.read_geojson(tmp_path / "g.geojson")
    assert props[0] == {"cell_id": 0, "slot": 17, "pred_class": 2, "true_class": 1, "p0": 0.2, "p1": 0.3, "p2": 0.5}
    assert props[1]["p0"] == 0.7 and props[1]["cell_id"] == 3


def test_history_round_trip(tmp_path):
    hist = [{"epoch": 1, "train_loss": 1 / 3, "val_loss": 0.25, "val_macro_f1": 0.1 + 0.2}]
    X.write_history(tmp_path / "h.csv", hist)
    assert X.read_history(tmp_path / "h.csv") == hist


# -- pipeline ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfgp = root / "tiny.yaml"
    cfgp.write_text(yaml.safe_dump(TINY))
    code = cli.main(["pipeline", "--config", str(cfgp), "--out", str(root / "run")])
    return code, root / "run", cfgp


def test_pipeline_writes_every_artifact(tiny_run):
    code, out, _ = tiny_run
    assert code == 0
    for rel in ("config.yaml", "data/trajectories.csv", "data/truth.json", "ingest/staypoints.csv",
                "features/cells.json", "features/samples_h1.bin", "eval/metrics.json", "eval/confusion.csv",
                "eval/metrics.csv", "report/cells.geojson", "report/report.md",
                "predict/predictions_s0.csv", "train/tcn_s1_history.csv"):
        assert (out / rel).is_file(), rel
    for stage in P.STAGES:
        m = json.loads((out / "manifests" / f"{stage}.json").read_text())
        assert m["config_sha256"] == C.load(out / "config.yaml").digest()
        assert m["seeds"] == [0, 1]
        for rel, digest in m["outputs"].items():
            assert P.sha256(out / rel) == digest
    assert not list(out.glob("*.FAILED"))


def test_pipeline_metrics_shape(tiny_run):
    _, out, _ = tiny_run
    m = json.loads((out / "eval" / "metrics.json").read_text())
    assert set(m["models"]) == {"birnn", "tcn", "stgcn_lite", "pdformer_lite", "ensemble"}
    assert m["models"]["ensemble"]["n_runs"] == 2 and "std" in m["models"]["ensemble"]
    hi = m["high_activity"]
    assert hi["relaxed"]["precision"] >= hi["strict"]["precision"]
    assert hi["relaxed"]["recall"] >= hi["strict"]["recall"]
    props = X.read_geojson(out / "report" / "cells.geojson")
    assert len(props) == m["n_eval_cells"] * m["n_test_slots"]


def test_stage_rerun_reproduces_metrics(tiny_run):
    _, out, _ = tiny_run
    before = (out / "eval" / "metrics.json").read_bytes()
    assert cli.main(["evaluate", "--out", str(out)]) == 0       # config picked up from the run directory
    assert (out / "eval" / "metrics.json").read_bytes() == before


def test_stage_without_inputs_fails_with_marker(tmp_path, tiny_run, capsys):
    _, _, cfgp = tiny_run
    assert cli.main(["train", "--config", str(cfgp), "--out", str(tmp_path / "empty")]) == 1
    assert "missing" in capsys.readouterr().err
    assert (tmp_path / "empty" / "train.FAILED").exists()
