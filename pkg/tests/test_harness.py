import json

import numpy as np
import pytest

from hgac.agents import CriticInput, HypergraphCritic, CriticConfig
from hgac.envs import make_env
from hgac.harness import (
    RunConfig,
    dump_incidence,
    eval_baselines,
    greedy_policy,
    load_incidence,
    main,
    metrics_header,
    pairing_report,
    read_metrics,
    smooth,
)
from hgac.errors import ConfigError
from hgac.learner import layout_of

FAST = ["--batch-size", "32", "--steps-per-update", "50", "--updates-per-cycle", "1"]


def _run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["run", "--out", str(out), *FAST, *extra])
    assert code == 0
    return out


def test_run_writes_outputs(tmp_path):
    out = _run(tmp_path, "a", "--scenario", "cn_small", "--algo", "hgac", "--seed", "1", "--episodes", "10",
               "--dump-every", "5")
    lines = (out / "metrics.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == metrics_header(2)
    assert lines[0] == "episode,team_return,agent_return_0,agent_return_1,critic_loss,actor_loss,entropy,seconds"
    assert len(lines) == 11
    assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(10))
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config"]["train"]["seed"] == 1
    assert manifest["checkpoint"]["sha256"] == json.loads((out / "checkpoints" / "final.bin.json").read_text())["sha256"]
    assert manifest["incidence_dumps"] == ["incidence/ep000005", "incidence/ep000010"]
    svg = (out / "curve.svg").read_text(encoding="utf-8")
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("HGAC_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--episodes", "2", "--workers", "1", "--seed", "4"] + FAST) == 0
    assert (tmp_path / "root" / "cn_small_hgac_s4" / "metrics.csv").exists()


def test_deterministic_runs_byte_identical(tmp_path):
    args = ["--scenario", "cn_small", "--algo", "att-hgac", "--seed", "1", "--episodes", "10", "--deterministic"]
    a = _run(tmp_path, "a", *args)
    b = _run(tmp_path, "b", *args)
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoints" / "final.bin").read_bytes() == (b / "checkpoints" / "final.bin").read_bytes()
    assert (a / "curve.svg").read_bytes() == (b / "curve.svg").read_bytes()
    assert main(["replay-check", str(a)]) == 0


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path / "x"), "--gamma", "1.5"]) != 0
    assert "gamma" in capsys.readouterr().err
    cfg = tmp_path / "nogroups.json"
    cfg.write_text(json.dumps({"scenario": "cn", "n_hunters": 2}), encoding="utf-8")
    assert main(["run", "--out", str(tmp_path / "y"), "--scenario-config", str(cfg), "--algo", "hgac-con"]) != 0
    with pytest.raises(SystemExit):
        main(["run", "--algo", "maddpg"])


def test_static_config_required(tmp_path):
    cfg = tmp_path / "cn.json"
    cfg.write_text(json.dumps({"scenario": "cn"}), encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig(scenario_config=str(cfg), algo="hgac-con")
    with pytest.raises(ConfigError):
        RunConfig(algo="maddpg")
    assert RunConfig(scenario="ctc_small", algo="hgac-con", deterministic=True).train.workers == 1


def test_hgac_con_dumps_are_constant_and_binary(tmp_path):
    out = _run(tmp_path, "con", "--scenario", "ctc_small", "--algo", "hgac-con", "--episodes", "12",
               "--dump-every", "4", "--workers", "1")
    expected = np.zeros((4, 3))
    expected[:3, 0] = 1
    expected[3, 1] = 1
    expected[:, 2] = 1
    for d in ("ep000004", "ep000008", "ep000012"):
        for H in load_incidence(out / "incidence" / d):
            assert np.array_equal(H, expected)


def _critic_and_input(name, mode, rng):
    env = make_env(name)
    layout = layout_of(env)
    critic = HypergraphCritic(layout, CriticConfig(mode=mode, n_heads=2))
    params = critic.init_params(rng)
    obs = [rng.normal(size=(6, d)) for d in layout.obs_dims]
    acts = np.stack([rng.integers(0, a, 6) for a in layout.act_dims], axis=1)
    return critic, params, CriticInput.from_indices(obs, acts, layout)


def test_dump_attention_diagonal(tmp_path, rng):
    critic, params, inp = _critic_and_input("rt_small", "attention", rng)
    files = dump_incidence(critic, params, inp, tmp_path)
    for f in files:
        rows = f.read_text(encoding="utf-8").splitlines()
        for i, row in enumerate(rows):
            assert row.split(",")[i] == "1.000000000000"


def test_dump_uniform_mlp_and_roundtrip(tmp_path, rng):
    critic, params, inp = _critic_and_input("cn_3v3", "mlp", rng)
    for k in range(2):
        params[f"head{k}.gen.W1"][...] = 0.0
    dump_incidence(critic, params, inp, tmp_path)
    for H in load_incidence(tmp_path):
        np.testing.assert_allclose(H, 1 / 3, rtol=0, atol=1e-12)
    for name in ("head0.gen.W1", "head1.gen.W1"):
        params[name][...] = rng.normal(size=params[name].shape)
    dump_incidence(critic, params, inp, tmp_path)
    heads = critic.forward(params, inp).incidence_per_head
    for H, back in zip(heads, load_incidence(tmp_path)):
        np.testing.assert_allclose(back, H.mean(axis=0), rtol=1e-11, atol=5e-13)


def test_pairing_report():
    good = np.eye(4)
    good[0, 3] = good[1, 2] = 0.9
    heads = [good, good, good, np.eye(4)]
    rep = pairing_report(heads, 2, true_pairing=[3, 2])
    assert rep["consensus"] == [3, 2]
    assert rep["agreeing_heads"] == 3 and rep["pass"]
    assert rep["heads_matching_truth"] == 3
    bad = np.eye(4)
    bad[0, 2] = bad[1, 2] = 0.9
    rep = pairing_report([bad] * 4, 2)
    assert not rep["pass"] and rep["consensus"] is None


def test_smooth():
    x = np.arange(6.0)
    assert smooth(x, 3).tolist() == [0.0, 0.5, 1.0, 2.0, 3.0, 4.0]


def test_metrics_parse(tmp_path):
    out = _run(tmp_path, "m", "--episodes", "3", "--workers", "1", "--deterministic")
    m = read_metrics(out / "metrics.csv")
    assert m["episode"].tolist() == [0.0, 1.0, 2.0]
    assert np.all(m["seconds"] == 0.0)
    np.testing.assert_allclose(m["team_return"], (m["agent_return_0"] + m["agent_return_1"]) / 2)


def test_baselines_reproducible_and_ordered():
    a = eval_baselines("cn_small", seeds=(0, 1), episodes=40)
    b = eval_baselines("cn_small", seeds=(0, 1), episodes=40)
    assert a == b
    assert a["episodes"] == 40
    assert a["greedy"]["mean"] > a["random"]["mean"]


def test_greedy_dominates_when_hunters_sit_on_landmarks():
    env = make_env("cn_small")
    policy = greedy_policy(env)
    state, obs = env.reset(0)
    state.landmark_pos[:] = [[0.3, 0.3], [-0.6, 0.2]]
    state.agent_pos[:] = state.landmark_pos
    acts, _ = policy(obs, state, None)
    assert acts.tolist() == [0, 0]
    assert env.step(state, acts).rewards[0] == 0.0


def test_greedy_micro_instance_hand_simulation():
    env = make_env({"scenario": "cn", "n_hunters": 1, "n_landmarks": 1})
    policy = greedy_policy(env)
    state, obs = env.reset(0)
    state.agent_pos[:] = [[0.0, 0.0]]
    state.landmark_pos[:] = [[0.25, -0.1]]
    total, moves = 0.0, []
    for _ in range(4):
        acts, _ = policy(obs, state, None)
        res = env.step(state, acts)
        moves.append(int(acts[0]))
        total += res.rewards[0]
        state, obs = res.state, res.obs
    # +x to (0.1, 0), +x to (0.2, 0), -y to (0.2, -0.1), then stay (noop ties +x)
    assert moves == [1, 1, 4, 0]
    hand = -(np.sqrt(0.15**2 + 0.1**2) + np.sqrt(0.05**2 + 0.1**2) + 0.05 + 0.05)
    assert abs(total - hand) <= 1e-12


def test_eval_baselines_cli(tmp_path, capsys):
    out = tmp_path / "b.json"
    assert main(["eval-baselines", "--scenario", "rt_small", "--episodes", "20", "--out", str(out)]) == 0
    rep = json.loads(out.read_text(encoding="utf-8"))
    assert set(rep) >= {"random", "greedy"}
    assert rep["greedy"]["mean"] > rep["random"]["mean"]


def test_dump_incidence_cli_rt(tmp_path, capsys):
    out = _run(tmp_path, "rt", "--scenario", "rt_small", "--algo", "att-hgac", "--episodes", "4", "--workers", "1")
    assert main(["dump-incidence", str(out), "--out", str(tmp_path / "d")]) == 0
    rep = json.loads((tmp_path / "d" / "pairing.json").read_text(encoding="utf-8"))
    assert len(rep["heads"]) == 4
    assert main(["dump-incidence", str(tmp_path / "missing")]) != 0
