import json

import pytest

from strokex import run
from strokex.exceptions import ConfigException
from strokex.files import Paths, RunLock


def _gen(out, *extra):

    return run(["gen-data", "--n", "6", "--seed", "5", "--layouts", "2", "--out", str(out), *extra])


def test_gen_data_is_reproducible(tmp_path, capsys):

    assert _gen(tmp_path / "a") == 0
    assert _gen(tmp_path / "b") == 0

    a = (tmp_path / "a" / "manifest.json").read_text()
    assert a == (tmp_path / "b" / "manifest.json").read_text()
    assert len(json.loads(a)["entries"]) == 6
    assert "'samples': 6" in capsys.readouterr().out


def test_gen_data_rejects_bad_jitter(tmp_path):

    assert _gen(tmp_path / "c", "--elastic", "12") == 1


def test_version_and_usage_errors(capsys):

    assert run(["--version"]) == 0
    assert run(["evaluate", "--no-such-flag"]) == 1
    assert run([]) == 1
    assert "usage" in capsys.readouterr().err


def test_evaluate_without_checkpoints_names_the_stage(tmp_path, capsys):

    _gen(tmp_path / "data")
    code = run(["evaluate", "--run", "empty", "--data", str(tmp_path / "data")])

    assert code == 1
    err = capsys.readouterr().err
    assert "extractnet" in err and "empty" in err


def test_downstream_training_needs_upstream(tmp_path, capsys):

    _gen(tmp_path / "data")
    assert run(["train-sdnet", "--run", "r", "--data", str(tmp_path / "data")]) == 1
    assert "content" in capsys.readouterr().err


def test_config_snapshot_is_immutable(tmp_path, capsys, runs_root):

    _gen(tmp_path / "data")
    data = str(tmp_path / "data")
    run(["evaluate", "--run", "frozen", "--data", data, "--seed", "3"])

    snapshot = json.loads((runs_root / "frozen" / "config.json").read_text())
    assert snapshot["seed"] == 3
    capsys.readouterr()

    assert run(["evaluate", "--run", "frozen", "--seed", "4"]) == 1
    assert "snapshot" in capsys.readouterr().err

    # omitted flags resolve from the snapshot
    assert run(["evaluate", "--run", "frozen"]) == 1
    assert "snapshot" not in capsys.readouterr().err


def test_locked_run_is_refused(tmp_path, capsys):

    with RunLock(Paths("busy")):
        assert run(["evaluate", "--run", "busy"]) == 1
    assert "locked" in capsys.readouterr().err

    with pytest.raises(ConfigException):
        with RunLock(Paths("twice")), RunLock(Paths("twice")):
            pass
