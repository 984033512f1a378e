"""Command-line driver: ``colashape <subcommand> [flags]``.

Subcommands
    train-cola  train a COLA network pair, write checkpoint + trace CSV
    table       consistency (and cosine) table over alphas and fields
    run         learning trajectories, one CSV per seed plus an aggregate
    field       update field on a grid over a 2-parameter game
    selftest    quick oracle checks

Fields are named by rule strings (``naive``, ``lola-exact``, ``hola:6``,
``cgd``, ``plola:0.5``, ...), by ``cola`` (taken from ``--checkpoint``), or
by the closed-form solutions ``consistent``, ``consistent+`` and
``consistent-`` on the Tandem and Hamiltonian games.

``--config FILE`` reads flat ``key = value`` lines (``#`` starts a comment).
Keys are the long flag names with dashes or underscores; training keys
``batch_size``, ``hidden``, ``activation``, ``lr``, ``lr_decay``,
``decay_every`` and ``log_every`` are also accepted. Flags override the file.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from colashape.errors import CheckpointError, DimensionError, NumericError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

TRAIN_KEYS = {
    "batch_size": int,
    "hidden": lambda s: tuple(int(x) for x in s.replace(" ", "").split(",") if x),
    "activation": str,
    "lr": float,
    "lr_decay": float,
    "decay_every": int,
    "log_every": int,
}
FLAG_KEYS = {"game", "rule", "checkpoint", "alpha", "steps", "sigma", "seeds", "samples", "out", "resolution", "svg"}
TRACE_COLUMNS = ("step", "mean_sq_consistency")
AGGREGATE_COLUMNS = ("step", "n_runs", "n_diverged", "loss1_mean", "loss1_std", "loss2_mean", "loss2_std")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse a flat key = value file into a dict of raw strings."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read config {path}: {exc}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FLAG_KEYS and key not in TRAIN_KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def parse_list(text, kind=str) -> list:
    try:
        return [kind(x.strip()) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {text!r} as a list of {kind.__name__}") from None


def parse_seeds(text) -> list[int]:
    """``3`` -> [3]; ``0,2,5`` -> [0, 2, 5]; ``0-9`` -> [0, ..., 9]."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise UsageError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--game")
    common.add_argument("--rule", help="comma-separated field names")
    common.add_argument("--checkpoint", action="append", help="COLA checkpoint (repeatable or comma-separated)")
    common.add_argument("--alpha", help="look-ahead rate, or a comma-separated list")
    common.add_argument("--steps", type=int)
    common.add_argument("--sigma", type=float, help="initial parameter std for run")
    common.add_argument("--seeds", help="e.g. 0, 0,1,2 or 0-9")
    common.add_argument("--samples", type=int, help="parameter samples for table")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="key = value file; flags take precedence")

    parser = _Parser(prog="colashape", description="Consistent opponent shaping experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-cola", parents=[common], help="train a COLA update network pair")
    sub.add_parser("table", parents=[common], help="consistency/cosine table")
    p = sub.add_parser("run", parents=[common], help="learning trajectories")
    p.add_argument("--svg", action="store_true", help="also write a loss plot")
    p = sub.add_parser("field", parents=[common], help="update field on a grid")
    p.add_argument("--resolution", type=int, help="grid nodes per axis (default 21)")
    p.add_argument("--svg", action="store_true", help="also write a quiver plot")
    sub.add_parser("selftest", parents=[common], help="run quick oracle checks")
    return parser


def merge(args: argparse.Namespace) -> dict:
    opts = read_config(args.config) if args.config else {}
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is None or value is False:
            continue
        opts[key] = ",".join(value) if key == "checkpoint" else value
    return opts


def _need(opts, key):
    if opts.get(key) in (None, ""):
        raise UsageError(f"--{key} is required")
    return opts[key]


def _out_dir(opts) -> Path:
    out = Path(opts.get("out") or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK | os.X_OK):
        raise CheckpointError(f"output directory {out} is not writable")
    return out


def _fmt_alpha(a: float) -> str:
    return repr(float(a))


def _write(path: Path, text: str):
    from colashape.cola import atomic_write_text

    atomic_write_text(path, text)
    print(path)


# field resolution


def _checkpoints(opts, game, alpha: Optional[float] = None):
    from colashape.cola import load_checkpoint

    paths = parse_list(opts.get("checkpoint") or "")
    if not paths:
        raise CheckpointError("field 'cola' needs --checkpoint")
    nets = [load_checkpoint(p, game) for p in paths]
    if alpha is not None:
        nets = [n for n in nets if n.alpha is None or np.isclose(n.alpha, alpha)]
        if not nets:
            raise CheckpointError(f"no checkpoint trained at alpha={alpha}")
    return nets


def resolve_fields(name: str, game, alpha: float, opts) -> list:
    """All fields behind a name: one for rules and oracles, one per checkpoint for cola."""
    from colashape import evaluation as ev
    from colashape.shapers import make_field

    if name == "cola":
        return [n.as_field(game, alpha) for n in _checkpoints(opts, game, alpha)]
    if name.startswith("consistent"):
        branch = {"consistent": -1, "consistent-": -1, "consistent+": 1}.get(name)
        if branch is None:
            raise UsageError(f"unknown closed-form field {name!r}")
        if game.name == "tandem":
            return [ev.oracle_tandem_consistent(alpha, branch)]
        if game.name == "hamiltonian" and name == "consistent":
            return [ev.oracle_hamiltonian_consistent(alpha)]
        raise UsageError(f"no closed-form field {name!r} for {game.name}")
    return [make_field(game, alpha, name)]


# subcommands


def cmd_train_cola(opts) -> int:
    from colashape.cola import ColaConfig, save_checkpoint, train_cola
    from colashape.evaluation import to_csv
    from colashape.games import get_game

    game = get_game(_need(opts, "game"))
    alphas = parse_list(_need(opts, "alpha"), float)
    seeds = parse_seeds(opts.get("seeds", "0"))
    extra = {k: TRAIN_KEYS[k](v) for k, v in opts.items() if k in TRAIN_KEYS}
    if opts.get("steps") is not None:
        extra["steps"] = int(opts["steps"])
    out = _out_dir(opts)
    for alpha in alphas:
        for seed in seeds:
            cfg = ColaConfig.for_game(game, alpha, seed=seed, **extra)
            net, trace = train_cola(cfg)
            stem = f"cola_{game.name}_a{_fmt_alpha(alpha)}_s{seed}"
            _write(out / f"{stem}.trace.csv", to_csv(TRACE_COLUMNS, zip(trace.steps, trace.losses)))
            save_checkpoint(net, out / f"{stem}.json")
            print(out / f"{stem}.json")
            print(f"{game.name} alpha={alpha} seed={seed} final loss {trace.losses[-1]:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_table(opts) -> int:
    from colashape import evaluation as ev
    from colashape.games import get_game

    game = get_game(_need(opts, "game"))
    alphas = parse_list(_need(opts, "alpha"), float)
    names = parse_list(_need(opts, "rule"))
    n = int(opts.get("samples") or (250 if game.name == "ipd" else 1000))
    seed = parse_seeds(opts.get("seeds", "0"))[0]
    out = _out_dir(opts)

    cons_rows, cos_rows = [], []
    for alpha in alphas:
        fields = {name: resolve_fields(name, game, alpha, opts) for name in names}
        for name, fs in fields.items():
            reports = [ev.measure_consistency(f, game, alpha, n, seed) for f in fs]
            means = np.array([r.mean_sq for r in reports])
            if len(reports) == 1:
                mean, std = reports[0].mean_sq, reports[0].std_sq
            else:
                mean, std = float(np.mean(means)), float(np.std(means))
            cons_rows.append((game.name, alpha, name, n, mean, std, sum(r.n_diverged for r in reports)))
        if len(names) == 2:
            fa, fb = fields[names[0]], fields[names[1]]
            try:
                stats = [ev.cosine_similarity(a, b, game, n, seed) for a in fa for b in fb]
            except ValueError as exc:
                print(f"alpha={alpha}: cosine undefined ({exc})", file=sys.stderr)
                stats = [(float("nan"), float("nan"))]
            if len(stats) == 1:
                mean, std = stats[0]
            else:
                mean, std = float(np.mean([s[0] for s in stats])), float(np.std([s[0] for s in stats]))
            cos_rows.append((game.name, alpha, names[0], names[1], mean, std))

    _write(out / f"consistency_{game.name}.csv", ev.to_csv(ev.CONSISTENCY_COLUMNS, cons_rows))
    if cos_rows:
        _write(out / f"cosine_{game.name}.csv", ev.to_csv(ev.COSINE_COLUMNS, cos_rows))
    for row in cons_rows:
        print(f"  alpha={row[1]:<8g} {row[2]:<14} {row[4]:.4g} ± {row[5]:.2g}  diverged={row[6]}", file=sys.stderr)
    return EXIT_OK


def _single_field(opts, game, alpha):
    names = parse_list(opts.get("rule") or ("cola" if opts.get("checkpoint") else ""))
    if len(names) != 1:
        raise UsageError("give exactly one --rule (or a --checkpoint)")
    fields = resolve_fields(names[0], game, alpha, opts)
    if len(fields) != 1:
        raise UsageError("give exactly one checkpoint here")
    return names[0], fields[0]


def aggregate_rows(trajs):
    longest = max(len(t) for t in trajs)
    for s in range(longest):
        alive = [t for t in trajs if len(t) > s]
        gone = sum(1 for t in trajs if t.diverged and t.diverged_at is not None and t.diverged_at <= s)
        l1 = np.array([t.loss1[s] for t in alive])
        l2 = np.array([t.loss2[s] for t in alive])
        yield (s, len(alive), gone, float(l1.mean()), float(l1.std()), float(l2.mean()), float(l2.std()))


def cmd_run(opts) -> int:
    from colashape import evaluation as ev
    from colashape.games import get_game
    from colashape.svg import line_plot

    game = get_game(_need(opts, "game"))
    alpha = float(_need(opts, "alpha"))
    name, f = _single_field(opts, game, alpha)
    steps = int(opts.get("steps") or 1000)
    sigma = float(opts["sigma"]) if opts.get("sigma") is not None else None
    seeds = parse_seeds(opts.get("seeds", "0"))
    out = _out_dir(opts)

    trajs = []
    stem = f"run_{game.name}_{name.replace(':', '-')}_a{_fmt_alpha(alpha)}"
    for seed in seeds:
        t = ev.run_learning(game, f, steps=steps, init_sigma=sigma, seed=seed)
        trajs.append(t)
        _write(out / f"{stem}_s{seed}.csv", ev.to_csv(ev.trajectory_columns(game), ev.trajectory_rows(t)))
        if t.diverged:
            print(f"seed {seed}: diverged at step {t.diverged_at}", file=sys.stderr)
    rows = list(aggregate_rows(trajs))
    _write(out / f"{stem}_aggregate.csv", ev.to_csv(AGGREGATE_COLUMNS, rows))
    if opts.get("svg"):
        series = {"loss1": [r[3] for r in rows], "loss2": [r[5] for r in rows]}
        _write(out / f"{stem}.svg", line_plot(series, title=f"{game.name} {name} alpha={alpha}"))
    return EXIT_OK


def cmd_field(opts) -> int:
    from colashape import evaluation as ev
    from colashape.games import get_game
    from colashape.svg import quiver_plot

    game = get_game(_need(opts, "game"))
    if game.dim != 2:
        raise DimensionError(f"{game.name} has {game.dim} parameters; field grids need exactly 2")
    alpha = float(_need(opts, "alpha"))
    name, f = _single_field(opts, game, alpha)
    res = int(opts.get("resolution") or 21)
    out = _out_dir(opts)
    grid = ev.export_field(f, game, res)
    stem = f"field_{game.name}_{name.replace(':', '-')}_a{_fmt_alpha(alpha)}"
    _write(out / f"{stem}.csv", ev.to_csv(ev.FIELD_COLUMNS, grid.rows()))
    if opts.get("svg"):
        _write(out / f"{stem}.svg", quiver_plot(grid, title=f"{game.name} {name} alpha={alpha}"))
    return EXIT_OK


def selftest_checks():
    """(name, passed) pairs for a handful of fast closed-form checks."""
    from colashape import evaluation as ev
    from colashape.autodiff import nest_check
    from colashape.games import get_game
    from colashape.shapers import cgd_update, hola_update, make_field

    tandem, ham = get_game("tandem"), get_game("hamiltonian")
    pts = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    out = [("nested differentiation to depth 9", nest_check(9))]
    ok = all(
        np.allclose(hola_update(tandem, 1.0, n, "exact", p)[0], ev.oracle_tandem_hola(n, p)[0], rtol=0, atol=1e-9)
        for n in range(4) for p in pts
    )
    out.append(("exact HOLA on Tandem matches 2^(n+2) - 2(1+x+y)", ok))
    r = ev.measure_consistency(make_field(tandem, 1.0, "lola-exact"), tandem, 1.0, 200)
    out.append(("LOLA consistency on Tandem at alpha=1 is 128", abs(r.mean_sq - 128.0) < 1e-6))
    ok = all(
        np.allclose(cgd_update(tandem, a, p)[0], -2 * a * (p.sum() - 1) / (1 + 2 * a), atol=1e-9)
        for a in (0.3, 1.0) for p in pts
    )
    out.append(("CGD on Tandem matches its closed form", ok))
    worst = max(
        ev.measure_consistency(ev.oracle_tandem_consistent(a, b), tandem, a, 200).mean_sq
        for a in (0.5, 1.0) for b in (1, -1)
    )
    worst = max(worst, ev.measure_consistency(ev.oracle_hamiltonian_consistent(1.0), ham, 1.0, 200).mean_sq)
    out.append(("closed-form consistent fields have zero residual", worst <= 1e-18))
    t = ev.run_learning(ham, ev.oracle_hamiltonian_consistent(1.0), steps=10, theta0=[1.0, 0.0])
    out.append(("Hamiltonian consistent dynamics contract by 2/9", np.allclose(t.norms**2, (2 / 9) ** np.arange(11), rtol=1e-12)))
    return out


def cmd_selftest(opts) -> int:
    results = selftest_checks()
    for name, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if all(ok for _, ok in results) else EXIT_NUMERIC


COMMANDS = {
    "train-cola": cmd_train_cola,
    "table": cmd_table,
    "run": cmd_run,
    "field": cmd_field,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](merge(args))
    except (UsageError, DimensionError, ValueError) as exc:
        print(f"colashape: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"colashape: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"colashape: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
