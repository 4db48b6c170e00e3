"""Command-line experiment runner.

Subcommands: ``run`` (train and export metrics, checkpoints, incidence dumps
and a reward curve), ``eval-baselines`` (uniform-random and scripted greedy
reference returns), ``dump-incidence`` (heatmap CSVs from a saved run) and
``replay-check`` (re-run a saved config and compare outputs byte for byte).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .agents import ALGO_MODES, CriticInput
from .approximator import ParamStore
from .envs import MOVES, load_scenario_config, make_env
from .errors import ConfigError
from .learner import Learner, TrainConfig, Trainer, critic_config_for, layout_of, run_episode

OUTPUT_ROOT_ENV = "HGAC_OUTPUT_ROOT"
SMOOTH_WINDOW = 100


@dataclass
class RunConfig:
    scenario: str = "cn_small"
    scenario_config: str | None = None
    algo: str = "hgac"
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str | None = None
    dump_every: int = 500
    checkpoint_every: int = 0
    deterministic: bool = False

    def __post_init__(self):
        if self.algo not in ALGO_MODES:
            raise ConfigError(f"unknown algorithm {self.algo!r}; choose from {sorted(ALGO_MODES)}")
        if self.dump_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("dump/checkpoint periods must be non-negative")
        if self.deterministic and self.train.workers != 1:
            self.train = dataclasses.replace(self.train, workers=1)
        if ALGO_MODES[self.algo] == "static" and not self.scenario_dict().get("static_groups"):
            raise ConfigError(f"{self.algo} needs static_groups in the scenario config")

    def scenario_dict(self) -> dict:
        return load_scenario_config(self.scenario_config or self.scenario)

    def resolved_out_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / f"{self.scenario}_{self.algo}_s{self.train.seed}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        d["train"] = TrainConfig(**d.get("train", {}))
        return cls(**d)


# -- csv helpers ------------------------------------------------------------------

def _fmt(x) -> str:
    # repr is locale independent and round-trips exactly
    return repr(float(x))


def metrics_header(n_agents: int) -> str:
    agents = [f"agent_return_{i}" for i in range(n_agents)]
    return ",".join(["episode", "team_return", *agents, "critic_loss", "actor_loss", "entropy", "seconds"])


def metrics_line(row, deterministic: bool) -> str:
    seconds = 0.0 if deterministic else row.seconds
    vals = [str(row.episode), _fmt(row.team_return), *map(_fmt, row.agent_returns),
            _fmt(row.critic_loss), _fmt(row.actor_loss), _fmt(row.entropy), _fmt(seconds)]
    return ",".join(vals)


def read_metrics(path) -> dict:
    """Column name -> float array."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    names = lines[0].split(",")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, len(names))
    return {n: rows[:, j] for j, n in enumerate(names)}


# -- incidence dumps -------------------------------------------------------------

def episode_input(episode, layout) -> CriticInput:
    """Stack an episode's transitions into one critic batch (one row per step)."""
    obs = [np.stack([t.obs[i] for t in episode.transitions]) for i in range(layout.n_agents)]
    actions = np.stack([t.actions for t in episode.transitions])
    return CriticInput.from_indices(obs, actions, layout)


def dump_incidence(critic, critic_params: ParamStore, inp: CriticInput, path) -> list[Path]:
    """Write one CSV per head; cell ``(j, i)`` is agent ``j``'s membership of hyperedge ``i`` averaged over the batch."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = critic.forward(critic_params, inp)
    files = []
    for k, H in enumerate(out.incidence_per_head):
        mean = np.asarray(H).mean(axis=0) if np.ndim(H) == 3 else np.asarray(H)
        f = path / f"head{k}.csv"
        with open(f, "w", encoding="utf-8", newline="\n") as fh:
            for row in mean:
                fh.write(",".join("%.12f" % v for v in row) + "\n")
        files.append(f)
    return files


def load_incidence(path) -> list[np.ndarray]:
    path = Path(path)
    files = sorted(path.glob("head*.csv"), key=lambda p: int(p.stem[4:]))
    return [np.loadtxt(f, delimiter=",", ndmin=2) for f in files]


def pairing_report(heads, n_rovers: int, true_pairing=None) -> dict:
    """Rover -> tower argmax assignment per head, read off averaged incidence matrices.

    Rows ``0..R-1`` are rovers and hyperedges ``R..2R-1`` are centred on towers;
    assignments are reported as tower agent indices.
    ``pass`` means at least 3 heads (or all, when fewer than 3) agree on one
    assignment that is a permutation.
    """
    R = n_rovers
    per_head = []
    for H in heads:
        block = np.asarray(H)[:R, R : 2 * R]
        assign = [R + int(t) for t in block.argmax(axis=1)]
        per_head.append({"assignment": assign, "permutation": sorted(assign) == list(range(R, 2 * R))})
    perms = [tuple(h["assignment"]) for h in per_head if h["permutation"]]
    best, count = None, 0
    for p in set(perms):
        c = perms.count(p)
        if c > count:
            best, count = p, c
    need = min(3, len(heads))
    report = {"heads": per_head, "consensus": list(best) if best else None,
              "agreeing_heads": count, "pass": count >= need}
    if true_pairing is not None:
        truth = [int(t) for t in true_pairing]
        report["true_pairing"] = truth
        report["heads_matching_truth"] = sum(h["assignment"] == truth for h in per_head)
    return report


# -- curve ------------------------------------------------------------------------

def smooth(x, window=SMOOTH_WINDOW):
    """Trailing moving average; the first ``window - 1`` points average what is available."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def write_curve(metrics_path, svg_path, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = read_metrics(metrics_path)
    # fixed salt so element ids, and therefore the file, are reproducible
    plt.rcParams["svg.hashsalt"] = "hgac"
    fig, ax = plt.subplots(figsize=(6, 4))
    if len(m["episode"]):
        ax.plot(m["episode"], m["team_return"], color="0.8", lw=0.5)
        ax.plot(m["episode"], smooth(m["team_return"]), color="C0", lw=1.5)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"team return (mean over {SMOOTH_WINDOW} episodes)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- run ----------------------------------------------------------------------------

def _save_checkpoint(learner, path) -> dict:
    return learner.checkpoint().save(path)


def run(config: RunConfig, log=print) -> Path:
    """Train per ``config``; returns the output directory."""
    env = make_env(config.scenario_dict())
    out = config.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    trainer = Trainer(env, config.train, config.algo, env_factory=lambda: make_env(config.scenario_dict()))
    learner = trainer.learner
    metrics_path = out / "metrics.csv"
    dumps = []
    start = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics_header(env.n_agents) + "\n")
        for row in trainer.run():
            fh.write(metrics_line(row, config.deterministic) + "\n")
            done = row.episode + 1
            if config.dump_every and done % config.dump_every == 0 and trainer.last_episode is not None:
                d = out / "incidence" / f"ep{done:06d}"
                dump_incidence(learner.critic, learner.critic_params,
                               episode_input(trainer.last_episode, trainer.layout), d)
                dumps.append(str(d.relative_to(out)))
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                _save_checkpoint(learner, out / "checkpoints" / f"ep{done:06d}.bin")
            if done % 500 == 0:
                fh.flush()
                log(f"episode {done}: team return {row.team_return:.3f} ({time.perf_counter() - start:.0f}s)")
    ckpt = _save_checkpoint(learner, out / "checkpoints" / "final.bin")
    write_curve(metrics_path, out / "curve.svg", title=f"{config.scenario} {config.algo}")
    manifest = {
        "config": config.to_dict(),
        "scenario_config": config.scenario_dict(),
        "checkpoint": {"path": "checkpoints/final.bin", "sha256": ckpt["sha256"],
                       "git_blob_sha1": ckpt["git_blob_sha1"]},
        "incidence_dumps": dumps,
        "updates": trainer.n_updates,
        "kernel_backend": kernels.BACKEND,
        "hgac_version": __version__,
        "numpy_version": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    if not config.deterministic:
        (out / "timing.txt").write_text(f"{time.perf_counter() - start:.3f}\n", encoding="utf-8")
    return out


def load_run(run_dir):
    """``(RunConfig, env, Learner)`` with the final checkpoint restored."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    config = RunConfig.from_dict(manifest["config"])
    env = make_env(manifest["scenario_config"])
    learner = Learner(layout_of(env), critic_config_for(config.algo, env, config.train), config.train,
                      np.random.default_rng(0))
    learner.restore(ParamStore.load(run_dir / manifest["checkpoint"]["path"]))
    return config, env, learner


def dump_from_run(run_dir, out_dir, episode_seed=0):
    """Roll out one episode with the saved actors and dump its averaged incidence matrices.

    Returns ``(files, pairing report or None)``; the report is produced for
    rover-tower runs.
    """
    config, env, learner = load_run(run_dir)
    rng = np.random.default_rng(episode_seed)

    def policy(obs, state, rng):
        return learner.actors.act(learner.actor_params, obs, rng)

    ep = run_episode(env, policy, rng, episode_seed, env.episode_length)
    files = dump_incidence(learner.critic, learner.critic_params, episode_input(ep, learner.layout), out_dir)
    report = None
    if env.kind == "rt":
        # the state's pairing is rover -> tower index; columns are agent indices
        report = pairing_report(load_incidence(out_dir), env.n_rovers, ep.final_state.pairing + env.n_rovers)
        (Path(out_dir) / "pairing.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return files, report


def replay_check(run_dir) -> dict:
    """Re-run a saved config in a scratch directory and compare metrics and checkpoint."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    config = RunConfig.from_dict(manifest["config"])
    with tempfile.TemporaryDirectory() as tmp:
        # the scenario config comes from the manifest copy, not re-resolved by name
        cfg_path = Path(tmp) / "scenario.json"
        cfg_path.write_text(json.dumps(manifest["scenario_config"]), encoding="utf-8")
        again = dataclasses.replace(config, out_dir=str(Path(tmp) / "run"), scenario_config=str(cfg_path))
        run(again, log=lambda *_: None)
        a = (run_dir / "metrics.csv").read_bytes()
        b = (Path(tmp) / "run" / "metrics.csv").read_bytes()
        if not config.deterministic:
            a, b = _drop_seconds(a), _drop_seconds(b)
        ckpt = json.loads((Path(tmp) / "run" / "checkpoints" / "final.bin.json").read_text(encoding="utf-8"))
    original = ParamStore.load(run_dir / manifest["checkpoint"]["path"])
    return {
        "metrics_identical": a == b,
        "checkpoint_identical": ckpt["sha256"] == manifest["checkpoint"]["sha256"],
        "checkpoint_roundtrip": original.to_bytes() == (run_dir / manifest["checkpoint"]["path"]).read_bytes(),
    }


def _drop_seconds(blob: bytes) -> bytes:
    return b"\n".join(line.rsplit(b",", 1)[0] for line in blob.splitlines())


# -- baselines ------------------------------------------------------------------------

def _toward(pos, target, step):
    """Index of the move that lands closest to ``target`` (ties go to the lower index)."""
    cand = np.clip(pos + step * MOVES, -1.0, 1.0)
    return int(np.argmin(np.linalg.norm(cand - target, axis=1)))


def random_policy(env):
    dims = env.action_spec()

    def policy(obs, state, rng):
        return np.array([rng.integers(n) for n in dims]), 0.0

    return policy


def greedy_policy(env):
    """Scripted reference policy with access to the full world state."""
    step = env.step_size
    if env.kind == "cn":
        def policy(obs, state, rng):
            taken, acts = set(), []
            for p in state.agent_pos:
                d = np.linalg.norm(state.landmark_pos - p, axis=1)
                free = [l for l in np.argsort(d, kind="stable") if l not in taken]
                target = int(free[0]) if free else int(np.argmin(d))
                taken.add(target)
                acts.append(_toward(p, state.landmark_pos[target], step))
            return np.array(acts), 0.0
    elif env.kind == "ctc":
        nh = env.n_hunters

        def policy(obs, state, rng):
            acts = []
            for h in range(nh):
                p = state.agent_pos[h]
                if state.carrying[h] >= 0:
                    target = state.agent_pos[nh + env.carried_color(state, h)]
                else:
                    live = np.flatnonzero(state.treasure_alive)
                    if len(live) == 0:
                        acts.append(0)
                        continue
                    d = np.linalg.norm(state.landmark_pos[live] - p, axis=1)
                    target = state.landmark_pos[live[np.argmin(d)]]
                acts.append(_toward(p, target, step))
            acts += [0] * env.n_banks
            return np.array(acts), 0.0
    elif env.kind == "rt":
        R = env.n_rovers

        def policy(obs, state, rng):
            acts = []
            for r in range(R):
                msg = state.messages[env.tower_of(state, r)]
                acts.append(0 if msg < 0 else _toward(state.agent_pos[r], state.landmark_pos[msg], step))
            for t in range(R):
                acts.append(int(state.goals[env.rover_of(state, t)]))
            return np.array(acts), 0.0
    else:
        raise ConfigError(f"no scripted policy for scenario kind {env.kind!r}")
    return policy


def eval_baselines(scenario, seeds=(0,), episodes=500, horizon=None) -> dict:
    """Mean and std of episodic team return for uniform-random and greedy policies.

    ``episodes`` is the total, split evenly over ``seeds``.
    """
    env = make_env(scenario)
    horizon = horizon or env.episode_length
    per_seed = math.ceil(episodes / len(seeds))
    report = {"scenario": env.name, "episodes": per_seed * len(seeds), "seeds": list(seeds)}
    for name, make in (("random", random_policy), ("greedy", greedy_policy)):
        returns = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for _ in range(per_seed):
                ep = run_episode(env, make(env), rng, int(rng.integers(2**63 - 1)), horizon)
                returns.append(ep.returns.mean())
        returns = np.asarray(returns)
        report[name] = {"mean": float(returns.mean()), "std": float(returns.std())}
    return report


# -- CLI ----------------------------------------------------------------------------------

def _add_train_flags(p):
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "total_episodes":
            p.add_argument("--episodes", "--total-episodes", dest=f.name, type=int, default=default)
        elif default is None:
            p.add_argument(flag, dest=f.name, type=float, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(default), default=default)


def build_parser():
    parser = argparse.ArgumentParser(prog="hgac", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    p.add_argument("--scenario", default="cn_small", help="bundled scenario name")
    p.add_argument("--scenario-config", default=None, help="JSON scenario config (overrides --scenario)")
    p.add_argument("--algo", default="hgac", choices=sorted(ALGO_MODES))
    p.add_argument("--out", dest="out_dir", default=None,
                   help=f"output directory (default ${OUTPUT_ROOT_ENV}/<scenario>_<algo>_s<seed>)")
    p.add_argument("--dump-every", type=int, default=500, help="incidence dump period in episodes (0 = off)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="extra checkpoint period (final one is always written)")
    p.add_argument("--deterministic", action="store_true",
                   help="single worker and a zero seconds column, so metrics.csv is byte-reproducible")
    _add_train_flags(p)

    p = sub.add_parser("eval-baselines", help="random and scripted greedy reference returns")
    p.add_argument("--scenario", default="cn_small")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--out", default=None, help="also write the report to this JSON file")

    p = sub.add_parser("dump-incidence", help="incidence heatmap CSVs from a saved run")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="default <run_dir>/incidence/final")
    p.add_argument("--episode-seed", type=int, default=0)

    p = sub.add_parser("replay-check", help="re-run a saved run and compare its outputs")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            train = TrainConfig(**{f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)})
            config = RunConfig(args.scenario, args.scenario_config, args.algo, train, args.out_dir,
                               args.dump_every, args.checkpoint_every, args.deterministic)
            out = run(config)
            print(f"wrote {out}")
        elif args.command == "eval-baselines":
            report = eval_baselines(args.scenario, tuple(args.seeds), args.episodes)
            text = json.dumps(report, indent=2)
            print(text)
            if args.out:
                Path(args.out).write_text(text + "\n", encoding="utf-8")
        elif args.command == "dump-incidence":
            out = args.out or str(Path(args.run_dir) / "incidence" / "final")
            files, report = dump_from_run(args.run_dir, out, args.episode_seed)
            for f in files:
                print(f)
            if report is not None:
                print(json.dumps(report, indent=2))
        elif args.command == "replay-check":
            result = replay_check(args.run_dir)
            print(json.dumps(result, indent=2))
            return 0 if all(result.values()) else 1
    except (ConfigError, OSError, ValueError) as exc:
        print(f"hgac: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
