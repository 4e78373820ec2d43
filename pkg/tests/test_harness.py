import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from sagegrpo.errors import ConfigError
from sagegrpo.flownet import load_checkpoint, save_checkpoint
from sagegrpo.harness import runners
from sagegrpo.harness.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_VERIFY, main
from sagegrpo.harness.config import (
    RunConfig,
    apply_setting,
    dump_config,
    load_config,
    parse_config,
    parse_reward,
)
from sagegrpo.harness.metrics import (
    GRADNORM_COLUMNS,
    PRETRAIN_COLUMNS,
    STD_COLUMNS,
    VERIFY_COLUMNS,
    MetricsWriter,
    align_columns,
    format_value,
    read_metrics,
)

GOLDEN = Path(__file__).parent / "golden"
CONFIGS = Path(__file__).parent.parent / "configs"

SMALL = """\
net.hidden = 8,8
pretrain.steps = 40
pretrain.batch_size = 64
grpo.group_size = 4
grpo.updates = 6
trustregion.anchor_interval = 2
controller.warmup_steps = 3
analysis.samples = 400
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def invoke(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    return result


# -- config -----------------------------------------------------------------


def test_default_file_matches_dataclass_defaults():
    assert dump_config(load_config(CONFIGS / "default.cfg")) == dump_config(RunConfig())


def test_dump_round_trips():
    cfg = parse_config(SMALL)
    assert dump_config(parse_config(dump_config(cfg))) == dump_config(cfg)


def test_inline_comments_and_blank_lines():
    cfg = parse_config("\n# full line\ngrpo.updates = 7   # trailing\n\n")
    assert cfg.grpo.updates == 7


@pytest.mark.parametrize("text,field", [
    ("grpo.bogus = 1", "grpo.bogus"),
    ("nosuch.key = 1", "nosuch.key"),
    ("schedule = 3", "schedule"),
    ("grpo.updates = many", "grpo.updates"),
    ("grpo.equalize = maybe", "grpo.equalize"),
    ("strategy.kind = brownian", "strategy"),
    ("schedule.regime = cosine", "schedule"),
    ("trustregion.mode = sometimes", "trustregion.mode"),
    ("controller.observe = both", "controller.observe"),
    ("grpo.sensitivity = partial", "grpo.sensitivity"),
    ("grpo.group_size = 1", "grpo.group_size"),
    ("grpo.updates = -1", "grpo.updates"),
    ("grpo.condition = 8", "grpo.condition"),
    ("net.hidden = 0", "net.hidden"),
    ("controller.lambda_min = 1e-3", "controller.lambda_min"),
    ("reward.components = target_mode:9=1", "reward.components"),
    ("reward.components = custom=1", "reward.components"),
    ("reward.components = target_mode:0", "reward.components"),
    ("seed = -1", "seed"),
    ("just words", "line 1"),
])
def test_bad_settings_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    assert field in str(info.value)


def test_dual_mode_needs_positive_betas_at_run_time():
    cfg = parse_config("trustregion.beta_pos = 0\ngrpo.updates = 1")
    with pytest.raises(ConfigError):
        runners.align(cfg, cfg.build_net())


def test_reward_parsing():
    centers = np.eye(2) * 4
    spec = parse_reward("target_mode:1=2.0; compactness=0.5", centers)
    assert spec.names == ["target_mode_1", "compactness"]
    assert [c.weight for c in spec.components] == [2.0, 0.5]


def test_seed_and_out_overrides(tmp_path):
    cfg = load_config(None, seed=2**64 - 1, out_dir=tmp_path)
    assert cfg.seed == 2**64 - 1
    assert cfg.out_dir == str(tmp_path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_apply_setting_coerces_types():
    cfg = RunConfig()
    apply_setting(cfg, "net.hidden", "16, 32")
    apply_setting(cfg, "grpo.equalize", "false")
    apply_setting(cfg, "controller.d_target", "2e-2")
    assert cfg.net.hidden == (16, 32)
    assert cfg.grpo.equalize is False
    assert cfg.controller.d_target == 0.02


# -- metrics ----------------------------------------------------------------


@pytest.mark.parametrize("name,columns", [
    ("align_header.csv", align_columns(RunConfig().build_reward().names)),
    ("pretrain_header.csv", PRETRAIN_COLUMNS),
    ("std_header.csv", STD_COLUMNS),
    ("gradnorm_header.csv", GRADNORM_COLUMNS),
    ("verify_header.csv", VERIFY_COLUMNS),
])
def test_headers_match_golden(name, columns):
    assert (GOLDEN / name).read_text() == ",".join(columns) + "\n"


def test_format_value():
    assert format_value(True) == "1"
    assert format_value(np.bool_(False)) == "0"
    assert format_value(7) == "7"
    assert format_value(1.0 / 3.0) == "0.333333333333"
    assert format_value(math.nan) == "nan"
    assert format_value(-math.inf) == "-inf"
    assert format_value('a,"b"') == '"a,""b"""'


def test_writer_rejects_mismatched_rows(tmp_path):
    with MetricsWriter(tmp_path / "m.csv", ("a", "b")) as w:
        w.write({"a": 1, "b": 2.5})
        with pytest.raises(KeyError):
            w.write({"a": 1})
        with pytest.raises(KeyError):
            w.write({"a": 1, "b": 2, "c": 3})
    header, cols = read_metrics(tmp_path / "m.csv")
    assert header == ("a", "b")
    np.testing.assert_array_equal(cols["b"], [2.5])


def test_writer_flushes_each_row(tmp_path):
    path = tmp_path / "nested" / "m.csv"
    w = MetricsWriter(path, ("x",))
    w.write({"x": 0.5})
    assert path.read_text() == "x\n0.5\n"
    w.close()


# -- runners ----------------------------------------------------------------


def test_zero_update_nokl_align_keeps_checkpoint(tmp_path):
    cfg = parse_config(SMALL + "grpo.updates = 0\ntrustregion.mode = nokl\n")
    cfg.out_dir = str(tmp_path)
    ckpt = runners.run_pretrain(cfg)
    runners.run_align(cfg, ckpt)
    assert (tmp_path / runners.ALIGN_CKPT).read_bytes() == Path(ckpt).read_bytes()
    header, cols = read_metrics(tmp_path / runners.ALIGN_CSV)
    assert len(cols["step"]) == 0


def test_align_rows_and_lambda_bounds(tmp_path):
    cfg = parse_config(SMALL)
    cfg.out_dir = str(tmp_path)
    result = runners.run_align(cfg)
    header, cols = read_metrics(tmp_path / runners.ALIGN_CSV)
    assert header == align_columns(cfg.build_reward().names)
    assert len(cols["step"]) == cfg.grpo.updates == len(result.rows)
    np.testing.assert_array_equal(cols["step"], np.arange(cfg.grpo.updates))
    lam = cols["lambda_kl"]
    assert np.all((lam >= cfg.controller.lambda_min) & (lam <= cfg.controller.lambda_max))
    # refreshes at completed-step counts 2 and 4
    np.testing.assert_array_equal(cols["anchor_refreshed"], [0, 0, 1, 0, 1, 0])
    assert result.anchor_refreshes == 2


def test_default_align_keeps_lambda_in_bounds(pretrained):
    cfg = RunConfig()
    cfg.grpo.updates = 130
    result = runners.align(cfg, pretrained[0].copy())
    lam = np.array([r["lambda_kl"] for r in result.rows])
    assert np.all((lam >= 1e-7) & (lam <= 1e-5))
    assert lam[0] == 1e-7 and lam[100] == 1e-5


def _default_dual_anchor_kl(net):
    cfg = RunConfig()
    rows = runners.align(cfg, net.copy(), mode="dual").rows
    return cfg, np.array([r["anchor_kl"] for r in rows[cfg.controller.warmup_steps + 1:]])


def test_dual_anchor_kl_within_five_targets(pretrained):
    # lambda_max = 1e-5 leaves the penalty far weaker than the policy
    # gradient, so the controller cannot hold this bound
    cfg, anchor = _default_dual_anchor_kl(pretrained[0])
    assert anchor.max() <= 5 * cfg.controller.d_target


def test_dual_anchor_kl_calibrated_ceiling(pretrained):
    # calibrated maximum after warm-up: 0.187 (seed 0)
    _, anchor = _default_dual_anchor_kl(pretrained[0])
    assert anchor.max() <= 0.25


def test_divergence_writes_nan_row(tmp_path):
    cfg = parse_config(SMALL + "grpo.lr = 1e12\n")
    cfg.out_dir = str(tmp_path)
    with pytest.raises(runners.TrainingDivergedError), np.errstate(all="ignore"):
        runners.run_align(cfg)
    _, cols = read_metrics(tmp_path / runners.ALIGN_CSV)
    assert math.isnan(cols["mean_reward"][-1])


def test_compare_kl_outputs(tmp_path):
    cfg = parse_config(SMALL)
    cfg.out_dir = str(tmp_path)
    runners.run_compare_kl(cfg)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(runners.compare_csv_name(m) for m in runners.COMPARE_MODES)
    firsts = []
    for mode in runners.COMPARE_MODES:
        _, cols = read_metrics(tmp_path / runners.compare_csv_name(mode))
        firsts.append({k: cols[k][0] for k in ("mean_reward", "reward_std", "policy_loss",
                                               "rollout_std")})
    assert all(f == firsts[0] for f in firsts)


def test_std_rows_regimes():
    rows = runners.std_rows(RunConfig())
    by = {}
    for r in rows:
        by.setdefault((r["regime"], r["strategy"]), []).append(r["std"])
    assert by[("a", "precise")][0] == 0.0
    assert by[("b", "flow")][0] >= 2 * by[("b", "precise")][0]
    assert math.isnan(by[("c", "flow")][0])
    for flow, precise in zip(by[("c", "flow")], by[("c", "precise")]):
        if not math.isnan(flow):
            assert precise <= flow


def test_gradnorm_predicted_column(tmp_path):
    cfg = parse_config(SMALL)
    cfg.out_dir = str(tmp_path)
    rows = runners.run_analyze_gradnorm(cfg)
    for r in rows:
        assert r["predicted_norm"] == pytest.approx(math.sqrt(math.pi / 2) / math.sqrt(r["variance"]),
                                                    rel=1e-14)


# -- command line -----------------------------------------------------------


def test_cli_missing_output_dir_is_created(tmp_path, small_cfg):
    out = tmp_path / "a" / "b"
    res = invoke("pretrain", "--config", small_cfg, "--out", out)
    assert res.exit_code == EXIT_OK, res.output
    assert (out / runners.PRETRAIN_CKPT).exists()
    assert (out / runners.PRETRAIN_CSV).exists()


def test_cli_config_error_exit(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("grpo.bogus = 1\n")
    res = invoke("align", "--config", bad, "--out", tmp_path)
    assert res.exit_code == EXIT_CONFIG
    assert "grpo.bogus" in res.output


def test_cli_missing_checkpoint_is_config_error(tmp_path, small_cfg):
    res = invoke("align", "--config", small_cfg, "--out", tmp_path,
                 "--checkpoint", tmp_path / "nope.ckpt")
    assert res.exit_code == EXIT_CONFIG


def test_cli_divergence_exit(tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(SMALL + "grpo.lr = 1e12\n")
    with np.errstate(all="ignore"):
        res = invoke("align", "--config", cfg, "--out", tmp_path)
    assert res.exit_code == EXIT_DIVERGED


def test_cli_verify_passes_and_flipped_sign_fails(tmp_path):
    res = invoke("verify", "--out", tmp_path / "ok")
    assert res.exit_code == EXIT_OK, res.output
    lines = [ln for ln in res.output.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) == 11
    assert all("measured=" in ln and "tolerance=" in ln for ln in lines)
    res = invoke("verify", "--out", tmp_path / "flip", "--flip-ito-sign")
    assert res.exit_code == EXIT_VERIFY
    assert "FAIL  marginal_preservation" in res.output


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir())}


@pytest.mark.parametrize("command,needs_ckpt", [
    ("pretrain", False),
    ("align", True),
    ("analyze-std", False),
    ("analyze-gradnorm", True),
    ("compare-kl", True),
])
def test_cli_reruns_are_byte_identical(tmp_path, small_cfg, command, needs_ckpt):
    extra = []
    if needs_ckpt:
        ckpt_dir = tmp_path / "ckpt"
        assert invoke("pretrain", "--config", small_cfg, "--out", ckpt_dir).exit_code == 0
        extra = ["--checkpoint", ckpt_dir / runners.PRETRAIN_CKPT]
    for run in ("one", "two"):
        res = invoke(command, "--config", small_cfg, "--seed", 5, "--out", tmp_path / run,
                     *extra)
        assert res.exit_code == EXIT_OK, res.output
    first, second = _outputs(tmp_path / "one"), _outputs(tmp_path / "two")
    assert first and first == second


def test_seed_changes_outputs(tmp_path, small_cfg):
    for seed in (1, 2):
        assert invoke("pretrain", "--config", small_cfg, "--seed", seed,
                      "--out", tmp_path / str(seed)).exit_code == 0
    assert _outputs(tmp_path / "1") != _outputs(tmp_path / "2")


def test_checkpoint_round_trip_through_align(tmp_path, small_cfg):
    cfg = load_config(small_cfg, out_dir=tmp_path)
    net = cfg.build_net()
    path = save_checkpoint(net, tmp_path / "start.ckpt")
    runners.run_align(cfg, path)
    aligned = load_checkpoint(tmp_path / runners.ALIGN_CKPT)
    assert aligned.config() == net.config()
    assert not np.array_equal(aligned.get_flat(), net.get_flat())
