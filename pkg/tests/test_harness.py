import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from empinn import cli, harness
from empinn.config import (
    AdamPhase,
    CollocationConfig,
    ExperimentConfig,
    LbfgsPhase,
    TrainConfig,
    apply_overrides,
    from_dict,
    load_config,
    preset,
    save_config,
    to_dict,
)
from empinn.diffcore import ConfigurationError
from empinn.harness import (
    METRIC_COLUMNS,
    ablation_combinations,
    apply_toggles,
    evaluate_run,
    export_grid,
    generate_reference,
    parse_grid_spec,
    run_ablation,
    run_experiment,
    run_probe,
)
from empinn.network import EmbeddingSpec, NetworkConfig
from empinn.reference import AllenCahnGridSpec, exact_helmholtz, read_grid, read_grid_raw, reference_grid


def tiny_helmholtz(**train):
    return ExperimentConfig(
        name="tiny",
        problem="helmholtz",
        network=NetworkConfig(width=8, embedding=EmbeddingSpec("gaussian_fourier", 2.0, 4),
                              output_transform="adf_helmholtz"),
        train=TrainConfig(adam=AdamPhase(steps=train.get("adam", 20), lr=5e-3),
                          lbfgs=LbfgsPhase(max_iter=train.get("lbfgs", 5)), log_every=5),
        collocation=CollocationConfig(residual=121, strategy="grid"),
        seeds=[0, 1],
        eval_shape=[11, 11],
    ).validate()


def tiny_advection():
    return ExperimentConfig(
        name="tiny_adv",
        problem="advection",
        network=NetworkConfig(width=6, embedding=EmbeddingSpec("periodic_x_and_t", period_x=2 * np.pi,
                                                               period_t=2 * np.pi)),
        train=TrainConfig(adam=AdamPhase(steps=4, lr=1e-3), log_every=2),
        collocation=CollocationConfig(residual=64, ic=16, bc=16),
        seeds=[0],
        eval_shape=[5, 9],
    ).validate()


# ---------------------------------------------------------------- presets


def test_allen_cahn_full_budget_preset():
    cfg = preset("allen_cahn_paper")
    net, adam = cfg.network, cfg.train.adam
    assert (net.arch, net.num_blocks, net.width, net.activation) == ("em", 4, 185, "tanh")
    assert (net.embedding.kind, net.embedding.m, net.embedding.period_x) == ("periodic_1d_plus_time", 10, 2.0)
    assert (adam.steps, adam.lr, adam.decay_steps, adam.decay_rate) == (300_000, 1e-3, 8000, 0.9)
    assert cfg.collocation.residual == 25_600 and cfg.weights.lambda_ic == 100.0
    assert len(cfg.seeds) == 5


def test_helmholtz_full_budget_preset():
    cfg = preset("helmholtz_paper")
    net = cfg.network
    assert (net.num_blocks, net.width, net.embedding.kind, net.embedding.scale) == (1, 64, "gaussian_fourier", 2.0)
    assert net.output_transform == "adf_helmholtz"
    assert (cfg.train.adam.steps, cfg.train.adam.lr, cfg.train.lbfgs.max_iter) == (500, 0.005, 500)
    assert (cfg.collocation.residual, cfg.collocation.strategy) == (10_201, "grid")


def test_advection_full_budget_preset():
    cfg = preset("advection_paper")
    net = cfg.network
    assert (net.num_blocks, net.width, net.embedding.kind) == (22, 128, "periodic_x_and_t")
    assert net.embedding.period_x == net.embedding.period_t == 2 * np.pi
    assert (cfg.train.adam.steps, cfg.collocation.residual) == (100_000, 20_000)


def test_desk_presets_hold_scaled_budgets():
    ac, adv = preset("allen_cahn_desk"), preset("advection_desk")
    assert (ac.network.num_blocks, ac.network.width, ac.train.adam.steps, ac.collocation.residual) == (2, 128, 50_000, 8192)
    assert ac.network.embedding.m == 10 and ac.weights.lambda_ic == 100.0 and ac.check_rel_l2 == 1e-2
    assert (adv.network.num_blocks, adv.network.width, adv.train.adam.steps, adv.collocation.residual) == (4, 64, 30_000, 20_000)
    assert adv.check_rel_l2 == 5e-2 and preset("helmholtz_desk").check_rel_l2 == 1e-4


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("burgers_desk")


# ---------------------------------------------------------------- config io


@pytest.mark.parametrize("suffix", [".json", ".yaml"])
def test_config_roundtrip(tmp_path, suffix):
    cfg = preset("advection_desk")
    path = tmp_path / f"c{suffix}"
    save_config(cfg, path)
    assert to_dict(load_config(path)) == to_dict(cfg)


def test_overrides():
    cfg = apply_overrides(preset("helmholtz_desk"), ["train.adam.steps=7", "network.embedding.scale=1.5", "seeds=[3]"])
    assert cfg.train.adam.steps == 7 and cfg.network.embedding.scale == 1.5 and cfg.seeds == [3]
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["train.adam.stepz=7"])
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["no_equals_sign"])


def test_unknown_field_rejected():
    data = to_dict(preset("helmholtz_desk"))
    data["network"]["depth"] = 3
    with pytest.raises(ConfigurationError):
        from_dict(data)


def test_invalid_combinations_rejected():
    base = tiny_helmholtz()
    with pytest.raises(ConfigurationError):
        replace(base, problem="advection").validate()
    with pytest.raises(ConfigurationError):
        replace(base, seeds=[]).validate()


# ---------------------------------------------------------------- runs


def test_zero_step_run_is_untrained(tmp_path):
    run = run_experiment(tiny_helmholtz(adam=0, lbfgs=0), tmp_path)
    assert run.status == "ok"
    for s in run.seeds:
        assert 0.1 < s.rel_l2 < 100 and s.steps_completed == 0
        assert [r["step"] for r in s.metrics] == [0]


def test_run_writes_artifacts(tmp_path):
    run = run_experiment(tiny_helmholtz(), tmp_path)
    assert run.mean_rel_l2 == pytest.approx(np.mean([s.rel_l2 for s in run.seeds]), rel=1e-15)
    assert run.best_rel_l2 == min(s.rel_l2 for s in run.seeds)
    seed_dir = tmp_path / "seed_0"
    with open(seed_dir / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    steps = [int(r[0]) for r in rows[1:]]
    assert steps[:4] == [0, 5, 10, 15] and steps[-1] == 20 + run.seeds[0].lbfgs_iterations
    axes, pred = read_grid_raw(seed_dir / "solution.grid")
    _, err = read_grid_raw(seed_dir / "error.grid")
    ref = exact_helmholtz(*np.meshgrid(*axes, indexing="ij"))
    assert np.allclose(err, np.abs(pred - ref), atol=1e-15)
    assert evaluate_run(tmp_path) == pytest.approx(run.rel_l2, rel=1e-12)


def test_snapshot_reruns_exactly(tmp_path):
    first = run_experiment(tiny_helmholtz(), tmp_path / "a", deterministic=True)
    snapshot = from_dict(json.loads((tmp_path / "a" / "run.json").read_text())["config"])
    second = run_experiment(snapshot, tmp_path / "b", deterministic=True)
    assert second.rel_l2 == first.rel_l2
    assert [s.metrics for s in second.seeds] == [s.metrics for s in first.seeds]


def test_deterministic_metrics_bit_identical(tmp_path):
    cfg = tiny_helmholtz()
    run_experiment(cfg, tmp_path / "a", deterministic=True)
    run_experiment(cfg, tmp_path / "b", deterministic=True)
    for seed in cfg.seeds:
        a = (tmp_path / "a" / f"seed_{seed}" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / f"seed_{seed}" / "metrics.csv").read_bytes()
        assert a == b


def poison_seeds(monkeypatch, bad):
    """Seeds in ``bad`` start from NaN weights, so their first loss is non-finite."""
    real = harness.init_params

    def init(cfg, seed):
        p = real(cfg, seed)
        return p.unflatten(np.full(p.size, np.nan)) if seed in bad else p

    monkeypatch.setattr(harness, "init_params", init)


def test_diverged_seed_does_not_abort(tmp_path, monkeypatch):
    poison_seeds(monkeypatch, {1})
    run = run_experiment(replace(tiny_helmholtz(adam=3, lbfgs=0), seeds=[0, 1, 2]), tmp_path)
    status = {s.seed: s.status for s in run.seeds}
    assert status == {0: "ok", 1: "diverged", 2: "ok"}
    assert run.status == "partial"
    assert run.mean_rel_l2 == pytest.approx((run.rel_l2[0] + run.rel_l2[2]) / 2, rel=1e-15)
    assert "step 0" in run.seeds[1].error
    assert (tmp_path / "seed_2" / "solution.grid").exists()
    assert not (tmp_path / "seed_1" / "solution.grid").exists()


def test_all_seeds_diverged(tmp_path, monkeypatch):
    poison_seeds(monkeypatch, {0, 1})
    run = run_experiment(tiny_helmholtz(), tmp_path)
    assert run.status == "diverged" and run.mean_rel_l2 is None and run.best_rel_l2 is None


def test_advection_loss_term_variant_runs(tmp_path):
    cfg = apply_toggles(tiny_advection(), {"periodic_embedding": False})
    run = run_experiment(cfg, tmp_path)
    assert run.status == "ok" and run.seeds[0].final_terms["l_bc"] > 0


# ---------------------------------------------------------------- ablation


def test_helmholtz_combinations_all_on_first():
    combos = ablation_combinations(tiny_helmholtz(), ["adf", "fourier_feature"])
    assert combos == [
        {"fourier_feature": True, "adf": True},
        {"fourier_feature": True, "adf": False},
        {"fourier_feature": False, "adf": True},
        {"fourier_feature": False, "adf": False},
    ]


def test_advection_combinations_skip_time_without_periodic():
    combos = ablation_combinations(tiny_advection(), ["periodic_embedding", "time_embedding"])
    assert {"periodic_embedding": False, "time_embedding": True} not in combos and len(combos) == 3


def test_advection_periodic_toggle_alone_gives_on_and_off():
    combos = ablation_combinations(tiny_advection(), ["periodic_embedding"])
    assert combos == [{"periodic_embedding": True}, {"periodic_embedding": False}]
    off = apply_toggles(tiny_advection(), combos[1])
    assert off.network.embedding.kind == "none"


def test_toggle_variants():
    off = apply_toggles(tiny_helmholtz(), {"fourier_feature": False, "adf": False})
    assert off.network.embedding.kind == "none" and off.network.output_transform == "none"
    no_time = apply_toggles(tiny_advection(), {"time_embedding": False})
    assert no_time.network.embedding.kind == "periodic_1d_plus_time"


def test_inapplicable_toggle():
    with pytest.raises(ConfigurationError):
        ablation_combinations(tiny_helmholtz(), ["time_embedding"])


def test_empty_toggles_single_base_run(tmp_path):
    cfg = replace(tiny_helmholtz(adam=0, lbfgs=0), seeds=[0])
    rows = run_ablation(cfg, [], tmp_path)
    assert len(rows) == 1 and rows[0][0] == {}


def test_ablation_csv(tmp_path):
    cfg = replace(tiny_helmholtz(adam=2, lbfgs=0), seeds=[0])
    run_ablation(cfg, ["adf"], tmp_path)
    with open(tmp_path / "ablation.csv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "adf" and [r[0] for r in rows[1:]] == ["✓", "✗"]


# ---------------------------------------------------------------- probe


def test_probe_status():
    assert run_probe(depths=(2, 4), width=8, seeds=range(3))["status"] == "separated"
    assert run_probe(depths=(2,), width=8, seeds=range(2), zero_second_factor=True)["status"] == "degenerate"


# ---------------------------------------------------------------- grids


def test_grid_spec_parsing():
    assert parse_grid_spec("201x513") == ([201, 513], None)
    assert parse_grid_spec("201x513@2048") == ([201, 513], 2048)
    for bad in ("201", "axb", "1x5"):
        with pytest.raises(ConfigurationError):
            parse_grid_spec(bad)


def test_helmholtz_reference_export_is_exact(tmp_path):
    path = tmp_path / "helm.grid"
    generate_reference("helmholtz", "21x31", path)
    axes, values = read_grid_raw(path)
    assert np.array_equal(values, exact_helmholtz(*np.meshgrid(*axes, indexing="ij")))
    _, err = read_grid_raw(tmp_path / "helm.error.grid")
    assert np.all(err == 0)


def test_export_roundtrip(tmp_path):
    grid = reference_grid("advection", shape=(4, 6))
    grid.u_pred = grid.u_ref + np.random.default_rng(0).standard_normal(grid.u_ref.shape) * 1e-3
    export_grid(grid, tmp_path / "solution.grid")
    loaded = read_grid(tmp_path / "solution.grid", "advection")
    assert np.array_equal(loaded.u_ref, grid.u_pred)
    _, err = read_grid_raw(tmp_path / "error.grid")
    assert np.array_equal(err, grid.error)


def test_allen_cahn_reference_regenerates_bit_identically(tmp_path):
    spec = f"11x65@{256}"
    generate_reference("allen_cahn", spec, tmp_path / "a.grid")
    generate_reference("allen_cahn", spec, tmp_path / "b.grid")
    assert (tmp_path / "a.grid").read_bytes() == (tmp_path / "b.grid").read_bytes()
    assert AllenCahnGridSpec.n_modes == 2048


def test_mode_count_only_for_allen_cahn(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_reference("helmholtz", "5x5@64", tmp_path / "h.grid")


# ---------------------------------------------------------------- cli


def test_cli_train_and_evaluate(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    save_config(tiny_helmholtz(adam=3, lbfgs=0), cfg_path)
    out = tmp_path / "run"
    assert cli.main(["train", str(cfg_path), "--seed", "0", "--out", str(out), "--deterministic"]) == 0
    assert "seed 0: status=ok" in capsys.readouterr().out
    assert cli.main(["evaluate", str(out)]) == 0


def test_cli_check_failure_exit_code(tmp_path):
    cfg = replace(tiny_helmholtz(adam=0, lbfgs=0), check_rel_l2=1e-9)
    save_config(cfg, tmp_path / "c.yaml")
    code = cli.main(["train", str(tmp_path / "c.yaml"), "--seed", "0", "--out", str(tmp_path / "r"), "--check"])
    assert code == 3


def test_cli_all_diverged_exit_code(tmp_path, monkeypatch):
    poison_seeds(monkeypatch, {0})
    save_config(tiny_helmholtz(adam=3, lbfgs=0), tmp_path / "c.json")
    code = cli.main(["train", str(tmp_path / "c.json"), "--seed", "0", "--out", str(tmp_path / "r")])
    assert code == 2


def test_cli_configuration_errors(tmp_path, capsys):
    assert cli.main(["train", "--preset", "nope"]) == 1
    assert cli.main(["train"]) == 1
    assert cli.main(["train", "--preset", "helmholtz_desk", "--override", "train.bogus=1"]) == 1
    assert cli.main(["ablate", "--preset", "helmholtz_desk", "--toggles", "time_embedding"]) == 1
    assert "configuration error" in capsys.readouterr().err


def test_cli_probe_and_gen_ref(tmp_path, capsys):
    report = tmp_path / "probe.json"
    assert cli.main(["probe", "--depths", "2", "--width", "4", "--seed", "0,1", "--out", str(report)]) == 0
    assert json.loads(report.read_text())["status"] == "separated"
    assert cli.main(["gen-ref", "advection", "5x9", "--out", str(tmp_path / "adv.grid")]) == 0
    assert (tmp_path / "adv.error.grid").exists()
