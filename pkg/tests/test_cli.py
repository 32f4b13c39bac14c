# -*- coding: utf-8 -*-
import json

import pytest

from cli import main
from tests.conftest import SMALL_CONFIG


@pytest.fixture
def workspace(tmp_path, iris_frame):
    data = tmp_path / "iris.csv"
    iris_frame.to_csv(data, index=False)
    config = tmp_path / "config.json"
    config.write_text(json.dumps(SMALL_CONFIG))
    return tmp_path, str(data), str(config), str(tmp_path / "iris.eng")


def _run(tmp_path, name, *argv):
    out = tmp_path / f"{name}.json"
    code = main(["--out", str(out), *argv])
    assert code == 0
    return json.loads(out.read_text(encoding="utf-8"))


def test_pipeline(workspace):
    tmp_path, data, config, store = workspace
    doc = _run(tmp_path, "train", "--config", config, "train", "--store", store, "--data", data)
    assert doc["verb"] == "train"
    assert doc["result"]["cases"] == 150
    assert doc["result"]["total_mass"] == 150.0

    doc = _run(tmp_path, "analyze", "--config", config, "analyze", "--store", store)
    assert set(doc["result"]["influence"]) == {"sepal_length", "sepal_width", "petal_length", "petal_width",
                                               "species"}

    doc = _run(tmp_path, "react", "--config", config, "react", "--store", store,
               "--context", '{"petal_length": 1.4, "petal_width": 0.2}', "--actions", "species")
    assert doc["result"]["values"]["species"] == "setosa"
    assert {"version", "verb", "snapshot_id", "seed", "result", "warnings"} <= set(doc)

    dot = tmp_path / "graph.dot"
    doc = _run(tmp_path, "causal", "--config", config, "causal", "--store", store, "--dot", str(dot))
    assert "iac" in doc["result"]
    assert "digraph" in dot.read_text()

    doc = _run(tmp_path, "export", "export", "--store", store)
    assert len(doc["result"]["cases"]) == 150


def test_output_is_byte_identical(workspace):
    tmp_path, data, config, store = workspace
    assert main(["--out", str(tmp_path / "t.json"), "train", "--store", store, "--data", data]) == 0
    argv = ["--seed", "3", "react", "--store", store, "--context", '{"petal_length": 5.0}',
            "--actions", "species", "sepal_length", "--mode", "generative"]
    assert main(["--out", str(tmp_path / "a.json"), *argv]) == 0
    assert main(["--out", str(tmp_path / "b.json"), *argv]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_usage_and_engine_errors(workspace, capsys):
    tmp_path, data, _, store = workspace
    assert main(["--bogus", "export", "--store", store]) == 1
    assert main(["export"]) == 1
    assert main(["export", "--store", str(tmp_path / "missing.eng")]) == 2
    assert main(["train", "--store", store, "--data", data]) == 0
    capsys.readouterr()
    # sin analyze previo
    assert main(["anomalies", "--store", store]) == 1
    assert "analyze" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "nope.json"), "export", "--store", store]) == 1
