"""Command-line front door: config parsing, subcommands, CSV outputs.

Heavy imports happen inside the command handlers so QDIL_THREADS can cap BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:                      # python < 3.11
    import tomli as tomllib

METRICS_HEADER = "iter,qd_score,coverage,best,average,empty_cell_fraction,restart,wall_s"


class ConfigError(Exception):
    pass


@dataclass
class OutputSettings:
    out_dir: str = "runs/latest"
    deterministic_timing: bool = False
    episodes_per_elite: int = 8
    demos_path: str = "demos.jsonl"
    demo_per_dim: int = 5
    demo_count: int = 4
    demo_top_k: int = 500
    demo_obs_only: bool = False
    lemma_seeds: tuple = (0, 1, 2)


# --- schema -------------------------------------------------------------------


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return _is_int(v) or isinstance(v, float)


def _pos_int(v):
    return _is_int(v) and v > 0


def _nonneg_int(v):
    return _is_int(v) and v >= 0


def _pos_num(v):
    return _is_num(v) and v > 0


def _nonneg_num(v):
    return _is_num(v) and v >= 0


def _is_bool(v):
    return isinstance(v, bool)


def _is_str(v):
    return isinstance(v, str)


def _num_list(v):
    return isinstance(v, list) and len(v) >= 1 and all(_is_num(x) for x in v)


def _int_list(v):
    return isinstance(v, list) and len(v) >= 1 and all(_pos_int(x) for x in v)


def _seed_list(v):
    return isinstance(v, list) and len(v) >= 1 and all(_nonneg_int(x) for x in v)


# section -> key -> (validator, human description of legal values)
SCHEMA = {
    "env": {
        "name": (_is_str, "an environment name"),
        "horizon": (_pos_int, "a positive integer"),
        "batch": (_pos_int, "a positive integer"),
    },
    "archive": {
        "lo": (_num_list, "a list of numbers"),
        "hi": (_num_list, "a list of numbers"),
        "cells_per_dim": (_int_list, "a list of positive integers"),
        "alpha": (lambda v: _is_num(v) and 0.0 < v <= 1.0, "a number in (0, 1]"),
        "threshold_floor": (_is_num, "a number"),
        "qd_floor": (_is_num, "a number"),
    },
    "ppo": {
        "clip": (_pos_num, "a positive number"),
        "epochs": (_pos_int, "a positive integer"),
        "minibatches": (_pos_int, "a positive integer"),
        "gamma": (lambda v: _is_num(v) and 0.0 < v <= 1.0, "a number in (0, 1]"),
        "lam": (lambda v: _is_num(v) and 0.0 <= v <= 1.0, "a number in [0, 1]"),
        "lr": (_nonneg_num, "a non-negative number"),
        "entropy_coef": (_nonneg_num, "a non-negative number"),
        "value_coef": (_nonneg_num, "a non-negative number"),
        "normalize_obs": (_is_bool, "a boolean"),
        "normalize_rewards": (_is_bool, "a boolean"),
        "policy_hidden": (_int_list, "a list of positive integers"),
        "critic_hidden": (_int_list, "a list of positive integers"),
    },
    "qd": {
        "n_q": (_pos_int, "a positive integer"),
        "n1": (_nonneg_int, "a non-negative integer"),
        "n2": (_nonneg_int, "a non-negative integer"),
        "lam": (lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
        "sigma_g": (_pos_num, "a positive number"),
        "jacobian_episodes": (_pos_int, "a positive integer"),
        "branch_episodes": (_pos_int, "a positive integer"),
        "walk_episodes": (_pos_int, "a positive integer"),
    },
    "reward_model": {
        "kind": (lambda v: v in ("gail", "vail", "bonus_only"),
                 "one of 'gail', 'vail', 'bonus_only'"),
        "measure_conditioned": (_is_bool, "a boolean"),
        "use_actions": (_is_bool, "a boolean"),
        "hidden": (_int_list, "a list of positive integers"),
        "lr": (_pos_num, "a positive number"),
        "minibatch": (_pos_int, "a positive integer"),
        "vail_latent": (_pos_int, "a positive integer"),
        "vail_ic": (_pos_num, "a positive number"),
        "vail_dual_step": (_nonneg_num, "a non-negative number"),
    },
    "bonus": {
        "p": (_nonneg_num, "a non-negative number"),
        "q": (_nonneg_num, "a non-negative number"),
    },
    "demos": {
        "path": (_is_str, "a file path"),
        "per_dim": (lambda v: _is_int(v) and v >= 2, "an integer >= 2"),
        "count": (_pos_int, "a positive integer"),
        "top_k": (_pos_int, "a positive integer"),
        "observations_only": (_is_bool, "a boolean"),
    },
    "output": {
        "dir": (_is_str, "a directory path"),
        "deterministic_timing": (_is_bool, "a boolean"),
        "episodes_per_elite": (_pos_int, "a positive integer"),
    },
    "seeds": {
        "master": (_nonneg_int, "a non-negative integer"),
        "lemma": (_seed_list, "a list of non-negative integers"),
    },
}


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    """Best-effort 1-based line number of a section header or a key inside it."""
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"\s*\[([^\]]+)\]", line)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(
                rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def parse_config(path: str, seed_override: int | None = None,
                 out_override: str | None = None):
    """Strictly validated TOML -> (QdConfig, OutputSettings)."""
    from .archive import ArchiveConfig
    from .driver import QdConfig
    from .ppo import PpoConfig
    from .rewards import BonusParams

    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from None

    def fail(section, key, message):
        line = _locate(text, section, key)
        where = f"{path}:{line}" if line else path
        raise ConfigError(f"{where}: [{section}] {key}: {message}")

    for section, entries in raw.items():
        if section not in SCHEMA:
            line = _locate(text, section)
            where = f"{path}:{line}" if line else path
            raise ConfigError(f"{where}: unknown section [{section}]; "
                              f"expected one of {sorted(SCHEMA)}")
        if not isinstance(entries, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        for key, value in entries.items():
            if key not in SCHEMA[section]:
                fail(section, key, f"unknown key; section accepts {sorted(SCHEMA[section])}")
            check, wants = SCHEMA[section][key]
            if not check(value):
                fail(section, key, f"value {value!r} out of range; expected {wants}")

    def get(section, key, default):
        return raw.get(section, {}).get(key, default)

    def tup(v):
        return tuple(v) if isinstance(v, list) else v

    try:
        archive = ArchiveConfig(
            lo=tuple(float(x) for x in get("archive", "lo", [0.0, 0.0])),
            hi=tuple(float(x) for x in get("archive", "hi", [1.0, 1.0])),
            cells_per_dim=tup(get("archive", "cells_per_dim", (25, 25))),
            alpha=get("archive", "alpha", 0.1),
            threshold_floor=get("archive", "threshold_floor", 0.0),
            qd_floor=get("archive", "qd_floor", 0.0))
        ppo = PpoConfig(
            clip=get("ppo", "clip", 0.2),
            epochs=get("ppo", "epochs", 4),
            minibatches=get("ppo", "minibatches", 8),
            gamma=get("ppo", "gamma", 0.99),
            lam=get("ppo", "lam", 0.95),
            lr=get("ppo", "lr", 3e-4),
            entropy_coef=get("ppo", "entropy_coef", 0.0),
            value_coef=get("ppo", "value_coef", 0.5),
            normalize_obs=get("ppo", "normalize_obs", True),
            normalize_rewards=get("ppo", "normalize_rewards", True))
        seed = seed_override if seed_override is not None else get("seeds", "master", 0)
        cfg = QdConfig(
            env_name=get("env", "name", "PointFlyer"),
            horizon=get("env", "horizon", 100),
            env_batch=get("env", "batch", 32),
            n_q=get("qd", "n_q", 300),
            n1=get("qd", "n1", 10),
            n2=get("qd", "n2", 10),
            lam=get("qd", "lam", 8),
            sigma_g=get("qd", "sigma_g", 1.0),
            archive=archive,
            ppo=ppo,
            bonus=BonusParams(p=get("bonus", "p", 0.5), q=get("bonus", "q", 0.5)),
            model_kind=get("reward_model", "kind", "gail"),
            measure_conditioned=get("reward_model", "measure_conditioned", True),
            use_actions=get("reward_model", "use_actions", True),
            model_hidden=tup(get("reward_model", "hidden", (32, 32))),
            model_lr=get("reward_model", "lr", 3e-4),
            model_minibatch=get("reward_model", "minibatch", 256),
            vail_latent=get("reward_model", "vail_latent", 50),
            vail_ic=get("reward_model", "vail_ic", 0.5),
            vail_dual_step=get("reward_model", "vail_dual_step", 1e-4),
            policy_hidden=tup(get("ppo", "policy_hidden", (32, 32))),
            critic_hidden=tup(get("ppo", "critic_hidden", (32, 32))),
            jacobian_episodes=get("qd", "jacobian_episodes", None),
            branch_episodes=get("qd", "branch_episodes", None),
            walk_episodes=get("qd", "walk_episodes", None),
            seed=seed)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    out = OutputSettings(
        out_dir=out_override if out_override is not None else get("output", "dir", "runs/latest"),
        deterministic_timing=get("output", "deterministic_timing", False),
        episodes_per_elite=get("output", "episodes_per_elite", 8),
        demos_path=get("demos", "path", "demos.jsonl"),
        demo_per_dim=get("demos", "per_dim", 5),
        demo_count=get("demos", "count", 4),
        demo_top_k=get("demos", "top_k", 500),
        demo_obs_only=get("demos", "observations_only", False),
        lemma_seeds=tuple(get("seeds", "lemma", (0, 1, 2))))
    return cfg, out


# --- config echo ----------------------------------------------------------------


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot echo {type(v)}")


def config_echo(cfg, out: OutputSettings) -> str:
    """Every resolved value, defaults included; re-running on this file reproduces the run."""
    sections = {
        "env": {"name": cfg.env_name, "horizon": cfg.horizon, "batch": cfg.env_batch},
        "archive": {"lo": cfg.archive.lo, "hi": cfg.archive.hi,
                    "cells_per_dim": cfg.archive.cells_per_dim,
                    "alpha": cfg.archive.alpha,
                    "threshold_floor": cfg.archive.threshold_floor,
                    "qd_floor": cfg.archive.qd_floor},
        "ppo": {"clip": cfg.ppo.clip, "epochs": cfg.ppo.epochs,
                "minibatches": cfg.ppo.minibatches, "gamma": cfg.ppo.gamma,
                "lam": cfg.ppo.lam, "lr": cfg.ppo.lr,
                "entropy_coef": cfg.ppo.entropy_coef,
                "value_coef": cfg.ppo.value_coef,
                "normalize_obs": cfg.ppo.normalize_obs,
                "normalize_rewards": cfg.ppo.normalize_rewards,
                "policy_hidden": cfg.policy_hidden,
                "critic_hidden": cfg.critic_hidden},
        "qd": {"n_q": cfg.n_q, "n1": cfg.n1, "n2": cfg.n2, "lam": cfg.lam,
               "sigma_g": cfg.sigma_g,
               **({"jacobian_episodes": cfg.jacobian_episodes}
                  if cfg.jacobian_episodes else {}),
               **({"branch_episodes": cfg.branch_episodes}
                  if cfg.branch_episodes else {}),
               **({"walk_episodes": cfg.walk_episodes}
                  if cfg.walk_episodes else {})},
        "reward_model": {"kind": cfg.model_kind,
                         "measure_conditioned": cfg.measure_conditioned,
                         "use_actions": cfg.use_actions,
                         "hidden": cfg.model_hidden, "lr": cfg.model_lr,
                         "minibatch": cfg.model_minibatch,
                         "vail_latent": cfg.vail_latent, "vail_ic": cfg.vail_ic,
                         "vail_dual_step": cfg.vail_dual_step},
        "bonus": {"p": cfg.bonus.p, "q": cfg.bonus.q},
        "demos": {"path": out.demos_path, "per_dim": out.demo_per_dim,
                  "count": out.demo_count, "top_k": out.demo_top_k,
                  "observations_only": out.demo_obs_only},
        "output": {"dir": out.out_dir,
                   "deterministic_timing": out.deterministic_timing,
                   "episodes_per_elite": out.episodes_per_elite},
        "seeds": {"master": cfg.seed, "lemma": out.lemma_seeds},
    }
    lines = []
    for section, entries in sections.items():
        lines.append(f"[{section}]")
        for key, value in entries.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


# --- metrics CSV ----------------------------------------------------------------


class MetricsWriter:
    """One row per iteration, flushed immediately so aborts keep partial results."""

    def __init__(self, path: str, deterministic_timing: bool = False):
        self.deterministic_timing = deterministic_timing
        self._f = open(path, "w")
        self._f.write(METRICS_HEADER + "\n")
        self._f.flush()

    def write(self, report) -> None:
        m = report.metrics
        wall = 0.0 if self.deterministic_timing else report.wall_s
        row = ",".join([
            str(report.iteration),
            repr(float(m.qd_score)), repr(float(m.coverage)),
            repr(float(m.best)), repr(float(m.average)),
            repr(float(report.empty_cell_fraction)),
            str(int(report.restarted)), repr(float(wall)),
        ])
        self._f.write(row + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


# --- subcommands ----------------------------------------------------------------


def _echo_path(out: OutputSettings) -> str:
    return os.path.join(out.out_dir, "config_echo.toml")


def _write_echo(cfg, out: OutputSettings) -> None:
    os.makedirs(out.out_dir, exist_ok=True)
    with open(_echo_path(out), "w") as f:
        f.write(config_echo(cfg, out))


def cmd_train(args) -> None:
    cfg, out = parse_config(args.config, args.seed, args.out)
    import numpy as np

    from .demos import load_demos
    from .driver import QdDriver

    demos = None
    if cfg.model_kind != "bonus_only":
        if not os.path.exists(out.demos_path):
            raise ConfigError(f"demo file {out.demos_path!r} not found; "
                              f"run `qdil gen-demos` first or set [demos] path")
        demos = load_demos(out.demos_path)
    _write_echo(cfg, out)
    driver = QdDriver(cfg, demos)
    writer = MetricsWriter(os.path.join(out.out_dir, "metrics.csv"),
                           out.deterministic_timing)
    try:
        archive, reports = driver.run(callback=writer.write)
    finally:
        writer.close()
    archive.save(os.path.join(out.out_dir, "archive.npz"))
    norm = driver.engine.obs_norm
    np.savez(os.path.join(out.out_dir, "run_state.npz"),
             obs_count=np.int64(norm.count), obs_mean=norm.mean, obs_m2=norm.m2)
    m = archive.metrics()
    print(f"finished {len(reports)} iterations: qd_score={m.qd_score:.4f} "
          f"coverage={m.coverage:.4f} best={m.best:.4f} "
          f"elites={m.occupied} -> {out.out_dir}")


def cmd_gen_demos(args) -> None:
    cfg, out = parse_config(args.config, args.seed, args.out)
    from .demos import generate_candidates, save_demos, select_demonstrations, target_grid
    from .envs import make_env

    k = make_env(cfg.env_name, horizon=cfg.horizon, batch=1).spec.k
    pool = generate_candidates(cfg.env_name, cfg.horizon, target_grid(k, out.demo_per_dim))
    demos = select_demonstrations(pool, n=out.demo_count, top_k=out.demo_top_k)
    if out.demo_obs_only:
        demos = demos.without_actions()
    save_demos(out.demos_path, demos)
    print(f"wrote {out.demo_count} demonstrations "
          f"({len(pool.episodes)} candidates) -> {out.demos_path}")


def _archive_path(args, out: OutputSettings) -> str:
    if getattr(args, "archive", None):
        return args.archive
    return os.path.join(out.out_dir, "archive.npz")


def cmd_export_heatmap(args) -> None:
    cfg, out = parse_config(args.config, args.seed, args.out)
    from .archive import GridArchive

    archive = GridArchive.load(_archive_path(args, out))
    path = os.path.join(out.out_dir, "heatmap.csv")
    os.makedirs(out.out_dir, exist_ok=True)
    with open(path, "w") as f:
        f.write(archive.heatmap_csv())
    print(f"wrote heatmap -> {path}")


def cmd_verify_lemma(args) -> None:
    cfg, out = parse_config(args.config, args.seed, args.out)
    from .driver import P_UNIFORM_TAIL, verify_lemma1

    results = verify_lemma1(seeds=out.lemma_seeds, n1=cfg.n1)
    os.makedirs(out.out_dir, exist_ok=True)
    path = os.path.join(out.out_dir, "lemma.csv")
    with open(path, "w") as f:
        f.write("seed,p_old,p_new\n")
        for r in results:
            f.write(f"{r.seed},{repr(r.p_old)},{repr(r.p_new)}\n")
    improved = sum(r.p_new >= r.p_old for r in results)
    print(f"uniform-policy reference tail probability: {P_UNIFORM_TAIL:.7f}")
    for r in results:
        print(f"seed {r.seed}: p_old={r.p_old:.6f} p_new={r.p_new:.6f}")
    print(f"p_new >= p_old in {improved}/{len(results)} seeds -> {path}")


def cmd_eval_archive(args) -> None:
    cfg, out = parse_config(args.config, args.seed, args.out)
    import numpy as np

    from .archive import GridArchive
    from .driver import rescore_archive
    from .envs import make_env
    from .ppo import VppoEngine

    archive = GridArchive.load(_archive_path(args, out))
    state_path = getattr(args, "state", None) or os.path.join(out.out_dir, "run_state.npz")
    env = make_env(cfg.env_name, horizon=cfg.horizon, batch=cfg.env_batch)
    engine = VppoEngine(env, cfg.ppo, policy_hidden=cfg.policy_hidden,
                        critic_hidden=cfg.critic_hidden,
                        rng=np.random.default_rng(0))
    with np.load(state_path) as z:
        engine.obs_norm.count = int(z["obs_count"])
        engine.obs_norm.mean = z["obs_mean"]
        engine.obs_norm.m2 = z["obs_m2"]
    metrics, fitness = rescore_archive(archive, engine,
                                       np.random.default_rng(cfg.seed),
                                       episodes_per_elite=out.episodes_per_elite)
    os.makedirs(out.out_dir, exist_ok=True)
    path = os.path.join(out.out_dir, "eval_metrics.csv")
    with open(path, "w") as f:
        f.write("qd_score,coverage,best,average,occupied\n")
        f.write(",".join([repr(float(metrics.qd_score)), repr(float(metrics.coverage)),
                          repr(float(metrics.best)), repr(float(metrics.average)),
                          str(metrics.occupied)]) + "\n")
    print(f"true-reward rescoring over {metrics.occupied} elites: "
          f"qd_score={metrics.qd_score:.4f} coverage={metrics.coverage:.4f} "
          f"best={metrics.best:.4f} -> {path}")


# --- entry ----------------------------------------------------------------------


def _apply_thread_cap() -> None:
    raw = os.environ.get("QDIL_THREADS")
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"QDIL_THREADS must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = raw


COMMANDS = {
    "train": (cmd_train, "run the full quality-diversity imitation loop"),
    "gen-demos": (cmd_gen_demos, "produce a demonstration file with scripted experts"),
    "export-heatmap": (cmd_export_heatmap, "dump a 2-D archive fitness grid as CSV"),
    "verify-lemma": (cmd_verify_lemma, "Monte-Carlo check that reward-gradient steps reach empty cells"),
    "eval-archive": (cmd_eval_archive, "re-score archive elites under the true env reward"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdil",
                                description="quality-diversity imitation learning runner")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (fn, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="override [seeds] master")
        sp.add_argument("--out", default=None, help="override [output] dir")
        if name in ("export-heatmap", "eval-archive"):
            sp.add_argument("--archive", default=None, help="archive .npz path")
        if name == "eval-archive":
            sp.add_argument("--state", default=None, help="run_state .npz path")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
