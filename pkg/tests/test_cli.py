import json

import pytest

import oracles
from sfrl.cli import main
from sfrl.dataset import load_dataset, provenance_dict, validate_dataset
from sfrl.filtering import report_from_text
from sfrl.learners import load_model


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def gen(out="d.orld", *extra):
    return main(["gen", "--env", "gridworld", "-p", "n=4", "-p", "slip=0.1", "--mix", "50,30,20",
                 "--episodes", "40", "--seed", "7", "--out", out, *extra])


def test_gen_filter_pipeline(workdir):
    assert gen() == 0
    assert main(["filter", "--criterion", "disc", "--mode", "absolute", "--in", "d.orld",
                 "--out", "d_f.orld", "--report", "r.txt"]) == 0
    d = load_dataset("d.orld")
    f = load_dataset("d_f.orld")
    report = report_from_text((workdir / "r.txt").read_text())
    assert validate_dataset(f).ok
    assert 0 < len(f) < len(d)
    for ep in f.episodes:
        assert oracles.r_disc(ep.rewards, 0.99) > report.dataset_mean
    assert provenance_dict(f.provenance)["filter"]["mode"] == "absolute"


def test_score_single_episode(workdir, capsys):
    assert main(["gen", "--env", "chain", "--mix", "1,0,0", "--episodes", "1", "--out", "one.orld"]) == 0
    assert main(["score", "--criterion", "avg", "--in", "one.orld", "--report", "r.txt"]) == 0
    report = report_from_text((workdir / "r.txt").read_text())
    assert report.dataset_mean == report.per_episode[0].r_avg
    assert "superior=0" in capsys.readouterr().out


def test_train_and_eval(workdir, capsys):
    assert gen() == 0
    assert main(["train", "--algo", "expectile", "--data", "d.orld", "--tau", "0.8", "--epochs", "30",
                 "--out", "m.txt"]) == 0
    model = load_model("m.txt")
    assert model.config.expectile_tau == 0.8
    capsys.readouterr()
    assert main(["eval", "--model", "m.txt", "--episodes", "10", "--gamma-eval", "0.9"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["algorithm"] == "expectile"
    assert out["gamma_eval"] == 0.9
    assert out["env"] == model.env_id


def test_report_with_plan(workdir):
    plan = {"env_params": {"n": 4, "slip": 0.0}, "mix": [6, 3, 3], "n_seeds": 1, "checkpoints": [2],
            "eval": {"n_episodes": 5}, "learners": ["support"]}
    (workdir / "plan.json").write_text(json.dumps(plan))
    assert main(["report", "--plan", "plan.json", "--out", "res.csv"]) == 0
    lines = (workdir / "res.csv").read_text().splitlines()
    assert lines[0].startswith("# sfrl results v1")


def test_unknown_flag_is_usage_error(workdir):
    with pytest.raises(SystemExit) as info:
        main(["filter", "--in", "d.orld", "--out", "x.orld", "--bogus"])
    assert info.value.code == 2
    assert list(workdir.iterdir()) == []


def test_bad_mix_is_usage_error(workdir):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--env", "gridworld", "--mix", "1,2", "--out", "d.orld"])
    assert info.value.code == 2


def test_corrupt_input_exit_1_names_record(workdir, capsys):
    assert gen() == 0
    lines = (workdir / "d.orld").read_text().splitlines()
    lines[4] = lines[4].replace('"r":', '"r":"x","old":')
    (workdir / "bad.orld").write_text("\n".join(lines))
    assert main(["filter", "--in", "bad.orld", "--out", "out.orld", "--report", "r.txt"]) == 1
    err = capsys.readouterr().err
    assert "bad.orld:5" in err
    assert not (workdir / "out.orld").exists() and not (workdir / "r.txt").exists()


def test_missing_input_exit_1(workdir, capsys):
    assert main(["score", "--in", "nope.orld"]) == 1
    assert "nope.orld" in capsys.readouterr().err


def test_bad_env_param_exit_1(workdir):
    assert main(["gen", "--env", "gridworld", "-p", "n=99", "--out", "d.orld"]) == 1
    assert not (workdir / "d.orld").exists()


def test_degenerate_filter_exit_1(workdir, capsys):
    assert main(["gen", "--env", "chain", "-p", "small=0", "-p", "large=0", "--mix", "1,0,0",
                 "--episodes", "8", "--out", "flat.orld"]) == 0
    assert main(["filter", "--criterion", "avg", "--in", "flat.orld", "--out", "f.orld", "--report", "r.txt"]) == 1
    assert "score-degenerate" in capsys.readouterr().err
    assert sorted(p.name for p in workdir.iterdir()) == ["flat.orld"]


def test_inputs_not_mutated(workdir):
    assert gen() == 0
    before = (workdir / "d.orld").read_bytes()
    main(["filter", "--in", "d.orld", "--out", "f.orld"])
    main(["train", "--algo", "bc", "--data", "d.orld", "--epochs", "5", "--out", "m.txt"])
    assert (workdir / "d.orld").read_bytes() == before


def test_gen_help_lists_env_params(capsys):
    with pytest.raises(SystemExit) as info:
        main(["gen", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "slip=0.0 [0.0..1.0]" in out and "chain:" in out


def test_report_help_documents_csv(capsys):
    with pytest.raises(SystemExit):
        main(["report", "--help"])
    assert "mean_return" in capsys.readouterr().out


def test_malformed_model_exit_1(workdir, capsys):
    (workdir / "m.txt").write_text('{"model":1}\n')
    assert main(["eval", "--model", "m.txt"]) == 1
    assert "malformed model file" in capsys.readouterr().err
