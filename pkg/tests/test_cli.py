import json
import subprocess
import sys

import pytest

from mdtlab import cli
from mdtlab.pipeline import Manifest, ManifestError, cell_seed, fail_label, read_csv, ttest_rows

MINI = {
    "master_seed": 3,
    "corpus": {"n_subjects": 2, "family": "pfc1", "session_length": 200, "priors": "default"},
    "models": ["PM-pfcRL1", "PM-DDQN"],
    "tasks": ["T1", "T2"],
    "epochs": {"PM-pfcRL1": 1, "PM-DDQN": 1},
    "pfc_restarts": 1,
    "recovery_sessions": 1,
    "eval_trials": 40,
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    man = _write(root / "m.json", dict(MINI, out=str(root / "run")))
    codes = {}
    for cmd in ("validate", "gen", "train", "battery", "report"):
        codes[cmd] = cli.run([cmd, "--manifest", man])
    return root, man, codes


def test_pipeline_exit_codes(mini_run):
    _, _, codes = mini_run
    assert codes == {"validate": 0, "gen": 0, "train": 0, "battery": 0, "report": 0}


def test_bundle_and_dataset_counts(mini_run, capsys):
    root, man, _ = mini_run
    run = root / "run"
    bundles = sorted(p.parent.relative_to(run / "models").as_posix() for p in (run / "models").rglob("manifest.json"))
    assert bundles == ["PM-DDQN/sub001", "PM-DDQN/sub002", "PM-pfcRL1/sub001", "PM-pfcRL1/sub002"]
    # 2 subjects x 2 RL models x 2 tasks, plus the random baseline
    assert len(list((run / "battery").glob("PM-*/*/*.csv"))) == 8
    assert len(list((run / "battery" / "random").glob("*/*.csv"))) == 4
    assert json.loads((run / "manifest.json").read_text())["task_order"]


def test_resume_keeps_bundles(mini_run, capsys):
    _, man, _ = mini_run
    capsys.readouterr()
    assert cli.run(["train", "--manifest", man, "--resume"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"bundles": 4, "trained": 0, "kept": 4}


def test_reports_and_figures(mini_run):
    root, _, _ = mini_run
    rep, fig = root / "run" / "reports", root / "run" / "figures"
    tt = read_csv(rep / "ttests.csv")
    assert {(r["model"], r["task"]) for r in tt} == {(m, t) for m in ("random", "PM-pfcRL1", "PM-DDQN")
                                                     for t in ("T1", "T2")}
    assert all(r["fail"] == "True" for r in tt if r["model"] == "random")
    grid = read_csv(fig / "normalized_reward_grid.csv")
    assert [r["task"] for r in grid] == ["T1", "T2"] and "PM-DDQN_FAIL" in grid[0]
    assert len(read_csv(rep / "recovery.csv")) == 8
    names = {p.name for p in fig.iterdir()}
    assert {"recovery_scatter.csv", "consistency_grid.csv", "mi_plane.csv", "training_curves.csv"} <= names


def test_report_with_out_only(mini_run):
    root, _, _ = mini_run
    assert cli.run(["report", "--out", str(root / "run")]) == 0


def test_invalid_manifests_exit_1(tmp_path, capsys):
    cases = [{"bogus": 1}, {"models": ["GM-LSTM"]}, {"tasks": ["T11"]}, {"schema": "other/9"},
             {"corpus": {"n_subjects": 0}}, {"jobs": 0}, {"epochs": {"PM-DDQN": -1}}]
    for i, case in enumerate(cases):
        assert cli.run(["validate", "--manifest", _write(tmp_path / f"{i}.json", case)]) == 1, case
    (tmp_path / "broken.json").write_text("{not json")
    assert cli.run(["gen", "--manifest", str(tmp_path / "broken.json")]) == 1
    assert cli.run(["gen", "--manifest", str(tmp_path / "absent.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_report_without_battery_exits_1(tmp_path):
    assert cli.run(["report", "--out", str(tmp_path)]) == 1
    (tmp_path / "reports").mkdir()
    for name in ("behavior_metrics.csv", "mi_reports.csv", "glm_profiles.csv", "ttests.csv"):
        (tmp_path / "reports" / name).write_text("model,subject,task\n")
    assert cli.run(["report", "--out", str(tmp_path)]) == 1


def test_train_without_corpus_exits_1(tmp_path):
    man = _write(tmp_path / "m.json", dict(MINI, out=str(tmp_path / "run")))
    assert cli.run(["train", "--manifest", man]) == 1


def test_validate_flags_corrupt_subject(tmp_path, capsys):
    man = _write(tmp_path / "m.json", dict(MINI, out=str(tmp_path / "run")))
    assert cli.run(["gen", "--manifest", man]) == 0
    f = tmp_path / "run" / "corpus" / "sub001.csv"
    lines = f.read_text().splitlines()
    fields = lines[4].split(",")
    fields[10] = "40" if fields[10] != "40" else "0"
    lines[4] = ",".join(fields)
    f.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert cli.run(["validate", "--manifest", man]) == 1
    assert "sub001 row 2: reward mismatch" in capsys.readouterr().out


def test_runtime_failure_exits_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    man = _write(tmp_path / "m.json", dict(MINI, out=str(blocker / "run")))
    assert cli.run(["gen", "--manifest", man]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mdtlab", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen", "train", "battery", "report", "validate"):
        assert cmd in out.stdout


# ---------------------------------------------------------- manifest unit

def test_desk_scale_resolution():
    m = Manifest().resolved(desk_scale=True, out="/tmp/x", jobs=3)
    assert m.corpus["n_subjects"] == 8 and m.metarl_hidden == 48 and m.pfc_restarts == 2
    assert m.n_epochs("GM-DDQN") == 10 and m.jobs == 3 and m.out == "/tmp/x"
    assert sorted(m.task_order) == sorted(m.tasks)
    assert Manifest.from_dict(m.to_dict()) == m


def test_task_order_depends_on_seed_only():
    a = Manifest(master_seed=1).resolved()
    b = Manifest(master_seed=1, jobs=8).resolved()
    assert a.task_order == b.task_order
    assert cell_seed(a, "s", "m", "T1", "eval") == cell_seed(b, "s", "m", "T1", "eval") < 2**63


def test_fail_label():
    assert fail_label(0.01) is False and fail_label(0.05) is False
    assert fail_label(0.2) is True and fail_label(float("nan")) is True


def test_ttest_rows_against_random():
    metrics = []
    for i, (x, y) in enumerate([(0.9, 0.5), (0.8, 0.45), (0.95, 0.55), (0.85, 0.52)]):
        metrics.append({"model": "PM-DDQN", "subject": f"s{i}", "task": "T1", "normalized_reward": x})
        metrics.append({"model": "random", "subject": f"s{i}", "task": "T1", "normalized_reward": y})
    rows = ttest_rows(metrics, ["random", "PM-DDQN"], ["T1"])
    assert rows[0]["fail"] is True and rows[1]["fail"] is False and rows[1]["n"] == 4
    with pytest.raises(ManifestError):
        Manifest.from_dict({"fast_state": "sometimes"})
