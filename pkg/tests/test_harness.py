import json

import numpy as np
import pytest
import scipy.stats as st

from cutcopula import cli, harness
from cutcopula.harness import (
    ConfigError,
    ExperimentAborted,
    ExperimentConfig,
    load_config,
    run_experiment,
    sim1_config,
    sim2_config,
    simulate_dgp,
)
from cutcopula.mcmc import MCMCSettings, OptimizationError
from cutcopula.vi import VISettings

TINY = dict(n=60, S=2, mcmc=MCMCSettings(200, 100, 3), vi=VISettings(steps=200), vi_draws=200)
TOML = """
experiment = "sim1"
n = 60
reps = 2
seed = 5
methods = ["cut_mcmc", "ifm"]

[mcmc]
n_draws = 200
burn_in = 100
inner_burn_in = 3
"""


def test_simulate_dgp_deterministic():
    cfg = sim1_config(n=50, seed=3)
    a, b = simulate_dgp(cfg, 4), simulate_dgp(cfg, 4)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, simulate_dgp(cfg, 5).values)


def test_sim1_dgp_margin():
    data = simulate_dgp(sim1_config(n=100_000, seed=1), 0)
    assert abs(np.log(data.values[:, 0]).mean() - 1.0) < 0.02
    assert abs(data.values[:, 1].mean() - 7 / 3) < 0.02


def test_sim2_dgp_kendall_tau():
    data = simulate_dgp(sim2_config(n=100_000, seed=1), 0)
    tau = st.kendalltau(data.values[:, 0], data.values[:, 1]).statistic
    assert abs(tau - 0.7) < 0.01


def test_truth_vectors():
    np.testing.assert_array_equal(sim1_config().truth(), [1.0, 1.0, 7.0, 3.0, 0.7])
    t2 = sim2_config().truth()
    assert np.all(np.isnan(t2[:4])) and t2[4] == 0.7


def test_config_validation():
    with pytest.raises(ConfigError):
        sim1_config(n=5)
    with pytest.raises(ConfigError):
        sim1_config(S=0)
    with pytest.raises(ConfigError):
        sim1_config(methods=("bogus",))
    with pytest.raises(ConfigError):
        sim1_config(methods=("cut_vi_augmented",))


def test_config_dict_round_trip():
    for cfg in (sim1_config(**TINY), sim2_config(seed=9, threads=3)):
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg


def test_load_toml(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(TOML)
    cfg = load_config(p)
    assert (cfg.n, cfg.S, cfg.seed, cfg.methods) == (60, 2, 5, ("cut_mcmc", "ifm"))
    assert cfg.mcmc.inner_burn_in == 3 and cfg.model == sim1_config().model
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("n = [")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    (tmp_path / "bad2.toml").write_text('experiment = "custom"\n')
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad2.toml")


def test_smoke_run_one_row_set_per_method(tmp_path):
    cfg = sim1_config(**(TINY | {"S": 1}), out=str(tmp_path))
    res = run_experiment(cfg)
    methods = {r["method"] for r in res["rows"]}
    assert methods == {harness.METHOD_LABELS[m] for m in cfg.methods}
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert text[0] == "method,parameter,metric,value,n,S,seed"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["reps"] == 1 and "wall_clock_seconds" in manifest


def test_identical_config_identical_csv_any_threads(tmp_path):
    base = sim2_config(**TINY, methods=("cut_mcmc", "cut_vi"))
    a = run_experiment(base.__class__(**{**base.__dict__, "out": str(tmp_path / "a")}))
    b = run_experiment(base.__class__(**{**base.__dict__, "out": str(tmp_path / "b"), "threads": 2}))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a["rows"] == b["rows"]


def test_failures_abort(monkeypatch):
    def boom(config, method, data, rng):
        raise OptimizationError("forced")

    monkeypatch.setattr(harness, "_fit_method", boom)
    with pytest.raises(ExperimentAborted):
        run_experiment(sim1_config(**TINY, methods=("ifm",)))


def test_few_failures_are_skipped(monkeypatch):
    real = harness._fit_method
    seen = []

    def flaky(config, method, data, rng):
        seen.append(1)
        if len(seen) == 1:
            raise OptimizationError("forced once")
        return real(config, method, data, rng)

    monkeypatch.setattr(harness, "_fit_method", flaky)
    res = run_experiment(sim1_config(**(TINY | {"S": 60}), methods=("ifm",)))
    assert res["reports"][0].S == 59
    assert len(res["manifest"]["failures"]["ifm"]) == 1


def test_metrics_from_saved_draws(tmp_path):
    cfg = sim1_config(**TINY, methods=("cut_mcmc", "ifm"), out=str(tmp_path), save_draws=True)
    res = run_experiment(cfg)
    again = harness.metrics_from_draws(tmp_path / "draws")
    assert (tmp_path / "metrics_recomputed.csv").read_bytes() == (tmp_path / "metrics.csv").read_bytes()
    assert again["rows"] == res["rows"]


def test_summary_table_has_all_methods():
    rows = [{"method": m, "parameter": "tau", "metric": "bias", "value": 0.1, "n": 1, "S": 1, "seed": 0}
            for m in ("A", "B")]
    table = harness.summary_table(rows)
    assert "A" in table.splitlines()[0] and "B" in table.splitlines()[0]


# -- command line ------------------------------------------------------------

FAST = ["--draws", "200", "--burn-in", "100", "--inner-burn-in", "3", "--steps", "200"]


def test_cli_sim1_smoke(tmp_path, capsys):
    code = cli.main(["sim1", "--n", "100", "--reps", "1", "--seed", "7", "--out", str(tmp_path), *FAST])
    assert code == 0
    assert list(tmp_path.glob("*.csv")) == [tmp_path / "metrics.csv"]
    assert "Cut/MCMC" in capsys.readouterr().out


def test_cli_missing_config(capsys):
    assert cli.main(["fit", "missing.toml"]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["sim1", "--bogus"], ["nonsense"], []])
def test_cli_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_contract_error_exits_nonzero(capsys):
    assert cli.main(["sim1", "--n", "3"]) == 2
    assert "n must be" in capsys.readouterr().err


def test_cli_sim2_repeatable(tmp_path):
    args = ["sim2", "--n", "60", "--reps", "2", "--seed", "1", "--methods", "cut_mcmc,cut_vi", *FAST]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_cli_fit_and_metrics(tmp_path):
    p = tmp_path / "exp.toml"
    p.write_text(TOML)
    out = tmp_path / "run"
    assert cli.main(["fit", str(p), "--out", str(out), "--save-draws"]) == 0
    assert cli.main(["metrics", str(out)]) == 0
    # the manifest re-runs the experiment bit-identically
    assert cli.main(["fit", str(out / "manifest.json"), "--out", str(tmp_path / "rerun")]) == 0
    assert (tmp_path / "rerun" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
