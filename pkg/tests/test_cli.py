import json

import pytest

from kcsm.cli import DEFAULTS, grid, main, parse_config, resolve

SMALL = {
    "quench-east": "size = 5\nn_out = 100\nn_in = 4\nt_grid = 0:4:1\n",
    "quench-ad": "size = 3\nn_out = 50\nn_in = 4\nt_grid = 0:2:1\n",
    "nonconv-ad": "depth = 4\nell = 8\nn_samples = 300\nt_grid = 0:10:5\n",
    "gap-scan": "",
    "perc": "n = 1,2,4\nn_samples = 1000\n",
    "appendix-bfs": "n_max = 3\nell = 2,4\n",
    "hitting": "ell = 4\nn_samples = 200\n",
    "lemma-test": "n_samples = 3000\nmin_count = 100\n",
}


def _run(tmp_path, command, text, threads=1, name="out"):
    cfg = tmp_path / f"{command}.cfg"
    cfg.write_text(text)
    out = tmp_path / name
    assert main([command, "--config", str(cfg), "--seed", "4", "--threads", str(threads), "--out", str(out)]) == 0
    return out


def test_parse_config():
    assert parse_config("a = 1\n# note\n\nb=x # trailing\n") == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_config("oops\n")


def test_resolve_coerces_and_rejects_unknown_keys():
    c = resolve("quench-east", {"size": "7", "p": "0.4"})
    assert c["size"] == 7 and c["p"] == 0.4 and c["n_in"] == DEFAULTS["quench-east"]["n_in"]
    with pytest.raises(ValueError):
        resolve("quench-east", {"sizes": "7"})


def test_grid():
    assert grid("0:2:0.5") == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert grid("1,3") == [1.0, 3.0]


@pytest.mark.parametrize("command", sorted(SMALL))
def test_every_command_writes_its_outputs(tmp_path, command):
    out = _run(tmp_path, command, SMALL[command])
    csv = (out / f"{command}.csv").read_text()
    summary = json.loads((out / f"{command}.json").read_text())
    manifest = (out / f"{command}.manifest").read_text()
    assert csv.count("\n") >= 2
    assert f"command = {command}" in manifest and "seed = 4" in manifest
    if command.startswith("quench") or command == "nonconv-ad":
        assert csv.splitlines()[0] == "t,value,stderr,n_out,n_in"
    if command.startswith("quench"):
        assert {"m", "C", "reference_rate", "criteria"} <= set(summary)


@pytest.mark.parametrize("command", ["quench-east", "lemma-test", "hitting"])
def test_outputs_do_not_depend_on_threads(tmp_path, command):
    texts = [(_run(tmp_path, command, SMALL[command], k, f"t{k}") / f"{command}.csv").read_bytes() for k in (1, 3)]
    assert texts[0] == texts[1]


def test_unknown_command():
    with pytest.raises(SystemExit):
        main(["nope"])
