"""Command-line entry point: gen-data, pretrain, train, sweep, eval, tournament and replay.

Every command writes a ``manifest.json`` into its output directory holding
the resolved configuration, so ``fopo replay <manifest> --out DIR`` reruns it.
Settings can come from a flat ``key = value`` config file (``--config``);
command-line flags override file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import emit_corpus, generate_corpus, load_corpus
from .environments import make_env
from .errors import ConfigError, ContractViolation, DegenerateInstanceError, NumericError
from .evalharness import Entrant, entrant_from_checkpoint, evaluate_players, tournament
from .optim import ALGORITHMS, ORIENTATIONS, UpdateConfig
from .paramcore import Role, SoftmaxPolicy
from .rewards import RewardConfig
from .selfplay import (
    PolicyPlayer,
    TrainRunConfig,
    UniformPlayer,
    action_agreement,
    pretrain,
    scripted_dataset,
    scripted_players,
    train,
)

log = logging.getLogger("fopo")

RUN_SCHEMA = "fopo.run/1"
SWEEPABLE = ("eta", "alpha", "beta", "clip", "group_size", "epochs", "gamma", "epsilon", "delta")


# -- config files and manifests -------------------------------------------------


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; hyphens and underscores are interchangeable."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse once to find the subcommand and config file, then reparse with file values as defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in actions or key in ("command", "config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {args.command}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction | argparse._StoreFalseAction | argparse.BooleanOptionalAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = act.type(raw) if act.type else raw
    sub.set_defaults(**defaults)
    for act in sub._actions:
        if act.dest in defaults:
            act.required = False
    return parser.parse_args(argv)


def _jsonable_args(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config") and not k.startswith("_")}


def write_manifest(out_dir: Path, args, started: str, artifacts: list, extra: dict | None = None) -> Path:
    manifest = {
        "schema": RUN_SCHEMA,
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config": _jsonable_args(args),
        "artifacts": sorted(str(a) for a in artifacts),
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- shared loaders -------------------------------------------------------------


def _instances(corpus, game: str, split: str = "rl"):
    if game == "taboo":
        worlds = corpus.taboo_rl if split == "rl" else corpus.taboo_pretrain
        return list(worlds), [f"taboo-{split}-{i:06d}" for i in range(len(worlds))]
    inst = corpus.rl_instances if split == "rl" else corpus.pretrain_instances
    return list(inst), [f"{split}-{i:06d}" for i in range(len(inst))]


def _env_kwargs(corpus, game: str) -> dict:
    if game != "taboo":
        return {}
    m = corpus.manifest
    return {"n_words": m["n_words"], "n_cues": m["n_cues"], "top_k": m["top_k"]}


def _load_data(args):
    corpus = load_corpus(args.data)
    game = corpus.manifest["game"]
    if args.game and args.game != game:
        raise ConfigError(f"--game {args.game} does not match corpus game {game}")
    return corpus, game


def _check_compatible(policy: SoftmaxPolicy, game: str, n_features: int, path) -> None:
    """Reject checkpoints trained on another game or an older feature layout."""
    if policy.game != game:
        raise ConfigError(f"{path}: checkpoint game {policy.game} does not match corpus game {game}")
    if policy.n_features != n_features:
        raise ConfigError(f"{path}: checkpoint has {policy.n_features} features per action, environment has {n_features}")


def _policy_and_init(args, game: str, env_kwargs: dict):
    env = make_env(game, **env_kwargs)
    if getattr(args, "init", None):
        ckpt = load_checkpoint(args.init)
        _check_compatible(ckpt.policy, game, env.n_features, args.init)
        return ckpt.policy, ckpt.theta
    policy = SoftmaxPolicy(env.n_features, hidden=args.hidden, game=game)
    return policy, policy.init_params(np.random.default_rng([args.seed, 0x1A]))


def _update_config(args) -> UpdateConfig:
    return UpdateConfig(
        alpha=args.alpha,
        beta=args.beta,
        eta=args.eta,
        clip_epsilon=args.clip,
        algorithm=args.algo,
        group_size=args.group_size,
        epochs=args.epochs,
        grad_cap=args.grad_cap if args.grad_cap > 0 else None,
        fopo_orientation=args.orientation,
        advantage_std=args.advantage_std,
    )


def _reward_config(args) -> RewardConfig:
    return RewardConfig(gamma=args.gamma, epsilon=args.epsilon, delta=args.delta)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = _now()
    shapes = None
    if args.shapes:
        shapes = [tuple(int(x) for x in s.lower().split("x")) for s in args.shapes.split(",")]
    corpus = generate_corpus(
        seed=args.seed,
        rl_count=args.rl_count,
        pretrain_count=args.pretrain_count,
        shapes=shapes,
        game=args.game,
        taboo_words=args.words,
        taboo_cues=args.cues,
        taboo_max_turns=args.max_turns,
        taboo_top_k=args.top_k,
    )
    out = emit_corpus(corpus, args.out)
    corpus_manifest = json.loads((out / "manifest.json").read_text())
    write_manifest(out, args, started, list(corpus_manifest["files"]), {"corpus": corpus_manifest})
    log.info("wrote corpus to %s in %.2fs", out, corpus.manifest["elapsed_s"])
    return 0


def cmd_pretrain(args) -> int:
    started = _now()
    corpus, game = _load_data(args)
    env_kwargs = _env_kwargs(corpus, game)
    policy, theta0 = _policy_and_init(args, game, env_kwargs)
    instances, _ = _instances(corpus, game, "pretrain")
    env = make_env(game, **env_kwargs)
    dataset = scripted_dataset(game, env, instances, seed=args.seed)
    cfg = UpdateConfig(alpha=args.alpha, beta=args.beta, eta=0.0, batch_size=args.batch_size, algorithm="ppo")
    result = pretrain(policy, theta0, dataset, cfg, epochs=args.pretrain_epochs, seed=args.seed)
    out = _out_dir(args)
    agreement = action_agreement(policy, result.theta, dataset)
    save_checkpoint(out / "pretrained.ckpt", Checkpoint(policy, result.theta, None, 0, None, {"label": "pretrained", "game": game}))
    summary = {"examples": len(dataset), "mean_log_likelihood": result.mean_log_likelihood, "agreement": agreement}
    (out / "pretrain_metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, args, started, ["pretrained.ckpt", "pretrain_metrics.json"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def _run_training(args, out: Path, label: str) -> dict:
    corpus, game = _load_data(args)
    env_kwargs = _env_kwargs(corpus, game)
    policy, theta0 = _policy_and_init(args, game, env_kwargs)
    instances, ids = _instances(corpus, game, "rl")
    run = TrainRunConfig(
        game=game,
        update=_update_config(args),
        reward=_reward_config(args),
        episodes_per_phase=args.episodes,
        phases=args.phases,
        checkpoint_every=args.checkpoint_every,
        keep_last=args.keep_last,
        seed=args.seed,
        workers=args.workers,
        env_kwargs=env_kwargs,
        dump_trajectories=args.dump_trajectories,
    )

    def progress(m):
        if m["phase"] % max(1, args.phases // 10) == 0:
            log.info("%s phase %d: reward %.3f entropy %.3f", label, m["phase"], m["mean_reward"], m["entropy"])

    result = train(run, policy, theta0, instances, ids, out_dir=out, label=label, on_phase=progress)
    meta = {"label": label, "algorithm": args.algo, "eta": args.eta, "game": game}
    save_checkpoint(out / "final.ckpt", Checkpoint(policy, result.theta, None, args.phases, None, meta))
    return result.metrics[-1] if result.metrics else {}


def cmd_train(args) -> int:
    started = _now()
    out = _out_dir(args)
    final = _run_training(args, out, args.label or args.algo)
    write_manifest(out, args, started, ["metrics.jsonl", "final.ckpt", "checkpoints"])
    print(json.dumps(final, sort_keys=True))
    return 0


def _parse_values(param: str, values: str) -> list:
    caster = int if param in ("group_size", "epochs") else float
    return [caster(v) for v in values.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    started = _now()
    if args.param not in SWEEPABLE:
        raise ConfigError(f"--param must be one of {SWEEPABLE}")
    out = _out_dir(args)
    rows = []
    for value in _parse_values(args.param, args.values):
        sub = argparse.Namespace(**vars(args))
        setattr(sub, args.param, value)
        run_dir = out / f"{args.param}={value}"
        run_dir.mkdir(parents=True, exist_ok=True)
        final = _run_training(sub, run_dir, f"{args.algo}-{args.param}={value}")
        sub.command = "train"
        write_manifest(run_dir, sub, started, ["metrics.jsonl", "final.ckpt", "checkpoints"])
        rows.append({args.param: value, **final})
    with open(out / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    write_manifest(out, args, started, ["sweep.jsonl"] + [f"{args.param}={r[args.param]}" for r in rows])
    return 0


def _partner(spec: str, game: str, n_features: int):
    if spec == "scripted":
        return scripted_players(game)
    if spec == "uniform":
        return {Role.AGENT1: UniformPlayer(), Role.AGENT2: UniformPlayer()}
    e = entrant_from_checkpoint(spec)
    _check_compatible(e.policy, game, n_features, spec)
    p = PolicyPlayer(e.policy, e.theta, greedy=True)
    return {Role.AGENT1: p, Role.AGENT2: p}


def cmd_eval(args) -> int:
    started = _now()
    corpus, game = _load_data(args)
    entrant = entrant_from_checkpoint(args.checkpoint)
    instances, _ = _instances(corpus, game, "rl")
    env = make_env(game, **_env_kwargs(corpus, game))
    _check_compatible(entrant.policy, game, env.n_features, args.checkpoint)
    me = PolicyPlayer(entrant.policy, entrant.theta, greedy=True)
    partner = _partner(args.partner, game, env.n_features) if args.partner != "self" else {Role.AGENT1: me, Role.AGENT2: me}
    roles = [Role.AGENT1, Role.AGENT2] if args.role == "both" else [Role.parse(args.role)]
    reports = []
    for role in roles:
        a1 = me if role is Role.AGENT1 else partner[Role.AGENT1]
        a2 = me if role is Role.AGENT2 else partner[Role.AGENT2]
        labels = (entrant.label, args.partner) if role is Role.AGENT1 else (args.partner, entrant.label)
        reports.append(evaluate_players(env, a1, a2, instances, episodes=args.eval_episodes, seed=args.seed, labels=labels))
    for rep in reports:
        name = "mean_reward_x100" if game == "rsa" else "attacker_win"
        print(f"{rep.agent1} vs {rep.agent2}: {name} = {rep.headline():.4f} over {rep.episodes} episodes")
    if args.out:
        out = _out_dir(args)
        with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
            for rep in reports:
                fh.write(json.dumps(rep.to_record()) + "\n")
        write_manifest(out, args, started, ["eval.jsonl"])
    return 0


def _collect_checkpoints(paths: list[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            finals = sorted(p.glob("**/final.ckpt"))
            found.extend(finals or sorted(p.glob("*.ckpt")))
        elif p.exists():
            found.append(p)
        else:
            raise FileNotFoundError(f"checkpoint path {p} does not exist")
    return found


def cmd_tournament(args) -> int:
    started = _now()
    corpus, game = _load_data(args)
    paths = _collect_checkpoints(args.checkpoints)
    entrants = [entrant_from_checkpoint(p) for p in paths]
    n_features = make_env(game, **_env_kwargs(corpus, game)).n_features
    for e, p in zip(entrants, paths):
        _check_compatible(e.policy, game, n_features, p)
    labels = [e.label for e in entrants]
    if len(set(labels)) != len(labels):
        entrants = [Entrant(f"{e.label}@{p.parent.name}/{p.stem}", e.policy, e.theta, e.algorithm) for e, p in zip(entrants, paths)]
    instances, _ = _instances(corpus, game, "rl")
    result = tournament(entrants, game, instances, seed=args.seed, episodes=args.eval_episodes, **_env_kwargs(corpus, game))
    out = result.write(_out_dir(args))
    write_manifest(out, args, started, ["pairings.csv", "pairings.jsonl", "metrics_long.csv", "aggregates.json"])
    print(json.dumps(result.aggregates(), sort_keys=True))
    return 0


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("schema") != RUN_SCHEMA:
        raise ConfigError(f"{args.manifest} is not a run manifest")
    config = dict(manifest["config"])
    config["out"] = args.out
    config["log_level"] = args.log_level
    ns = argparse.Namespace(**config)
    return COMMANDS[manifest["command"]](ns)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "tournament": cmd_tournament,
}


# -- parser ---------------------------------------------------------------------


def _common(p, out_required=True):
    p.add_argument("--config", help="flat key = value file; flags override its values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--log-level", default="INFO")


def _model_args(p):
    p.add_argument("--data", required=True, help="corpus directory written by gen-data")
    p.add_argument("--game", choices=("rsa", "taboo"), help="checked against the corpus")
    p.add_argument("--init", help="checkpoint to start from (default: fresh parameters)")
    p.add_argument("--hidden", type=int, default=0, help="tanh hidden units for a fresh policy")


def _train_args(p):
    _model_args(p)
    p.add_argument("--algo", choices=ALGORITHMS, default="fopo")
    p.add_argument("--alpha", type=float, default=1e-5)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1, help="ascent steps per collected phase")
    p.add_argument("--grad-cap", type=float, default=10.0, help="gradient norm cap; 0 disables it")
    p.add_argument("--orientation", choices=ORIENTATIONS, default="counterpart")
    p.add_argument("--advantage-std", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.8)
    p.add_argument("--episodes", type=int, default=256, help="episodes per phase")
    p.add_argument("--phases", type=int, default=200)
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--keep-last", type=int, default=5)
    p.add_argument("--dump-trajectories", action="store_true")
    p.add_argument("--label", default="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fopo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an instance corpus")
    _common(p)
    p.add_argument("--game", choices=("rsa", "taboo"), required=True)
    p.add_argument("--rl-count", type=int, default=1000)
    p.add_argument("--pretrain-count", type=int, default=500)
    p.add_argument("--shapes", default="", help="comma-separated MxN shapes (features x objects); default uniform")
    p.add_argument("--words", type=int, default=8)
    p.add_argument("--cues", type=int, default=12)
    p.add_argument("--max-turns", type=int, default=8)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="fit scripted dialogues by maximum likelihood")
    _common(p)
    _model_args(p)
    p.add_argument("--alpha", type=float, default=5e-5)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="self-play RL with PPO, GRPO, FoPO or GR.FoPO")
    _common(p)
    _train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train once per value of one hyperparameter")
    _common(p)
    _train_args(p)
    p.add_argument("--param", required=True, choices=SWEEPABLE)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a partner")
    _common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--game", choices=("rsa", "taboo"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--partner", default="scripted", help="scripted, uniform, self or a checkpoint path")
    p.add_argument("--role", default="both", help="agent1/speaker/attacker, agent2/listener/defender or both")
    p.add_argument("--eval-episodes", type=int, default=None, help="default: one per instance")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tournament", help="cross-play all ordered pairings of checkpoints")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--game", choices=("rsa", "taboo"))
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or run directories")
    p.add_argument("--eval-episodes", type=int, default=None)
    p.set_defaults(func=cmd_tournament)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--log-level", default="INFO")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = apply_config_file(parser, argv)
    except ConfigError as exc:
        print(f"fopo: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"fopo: error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, DegenerateInstanceError, NumericError, OSError, KeyError, ValueError) as exc:
        print(f"fopo: error: {exc}", file=sys.stderr)
        return 1
    log.debug("%s finished in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
