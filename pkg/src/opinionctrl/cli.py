"""Command-line front end for the full experiment pipeline.

Subcommands: gen-data, train, grid-search, eval, simulate-binary,
simulate-kinetic, plot. Configuration comes from an INI-style key=value
file with sections mirroring the module names; command-line flags
override file values. Exit codes: 0 success, 1 validation error,
2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from opinionctrl import dataset, kinetic, neural, plots, riccati, sdre
from opinionctrl.errors import SchemaError
from opinionctrl.kinetic import DEFAULT_MIXTURE, KineticConfig, MixtureSpec
from opinionctrl.model import DomainViolation, ModelConfig
from opinionctrl.neural import GridSpec, TrainConfig

METRICS_HEADER = ["target", "mse", "r2", "mre"]
LEADERBOARD_HEADER = ["mu_dV", "width", "depth", "val_mre", "val_mse", "val_r2"]


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


@dataclass
class BinarySimConfig:
    dt: float = 0.01
    horizon: float = 10.0
    xi0: float = -0.5
    xj0: float = 0.5

    def validate(self) -> None:
        if not self.dt > 0 or self.horizon < self.dt:
            raise ConfigError("binary simulation needs dt > 0 and horizon >= dt")
        if max(abs(self.xi0), abs(self.xj0)) > 1.0:
            raise ConfigError("initial opinions must lie in [-1, 1]")


@dataclass
class PmpConfig:
    horizon: float = 100.0
    max_sweeps: int = 200
    tol: float = 1e-6

    def validate(self) -> None:
        if not self.horizon > 0 or self.max_sweeps < 1 or not self.tol > 0:
            raise ConfigError("open-loop settings must be positive")


@dataclass
class RunConfig:
    """Aggregated configuration for every subcommand."""

    model: ModelConfig
    train: TrainConfig
    kinetic: KineticConfig
    binary: BinarySimConfig
    pmp: PmpConfig
    grid: GridSpec
    n_samples: int = 1000
    seed: int = 7
    out_dir: Path = Path("out")
    eval_grid_n: int = 316
    threads: int = 0

    def validate(self) -> None:
        if self.n_samples < 5:
            raise ConfigError("dataset n_samples must be at least 5")
        if self.eval_grid_n < 2:
            raise ConfigError("eval grid_n must be at least 2")
        self.binary.validate()
        self.pmp.validate()

    def workers(self) -> int:
        return self.threads if self.threads > 0 else (os.cpu_count() or 1)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _get(parser: configparser.ConfigParser, section: str, key: str, cast, default):
    if parser.has_option(section, key):
        raw = parser.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}={raw!r}: {exc}") from exc
    return default


def _parse_batch(text: str):
    return None if text.strip().lower() in ("full", "none", "") else int(text)


def load_config(path: str | None, args) -> RunConfig:
    """Merge defaults, the optional config file, and flag overrides."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} does not exist")
        parser.read(path)
    try:
        model_cfg = ModelConfig(
            beta=_get(parser, "model", "beta", float, -1.0),
            gamma=_get(parser, "model", "gamma", float, 0.025),
        )
        train_cfg = TrainConfig(
            mu_dv=_get(parser, "train", "mu_dv", float, 0.05),
            learning_rate=_get(parser, "train", "learning_rate", float, 1e-3),
            epochs=_get(parser, "train", "epochs", int, 5000),
            batch_size=_get(parser, "train", "batch_size", _parse_batch, None),
            seed=_get(parser, "train", "seed", int, 0),
            optimizer=_get(parser, "train", "optimizer", str, "adam"),
            hidden_width=_get(parser, "train", "hidden_width", int, 100),
            hidden_depth=_get(parser, "train", "hidden_depth", int, 2),
        )
        f0 = MixtureSpec(
            weights=_get(parser, "kinetic", "f0_weights", _floats, DEFAULT_MIXTURE.weights),
            means=_get(parser, "kinetic", "f0_means", _floats, DEFAULT_MIXTURE.means),
            stds=_get(parser, "kinetic", "f0_stds", _floats, DEFAULT_MIXTURE.stds),
        )
        kin_cfg = KineticConfig(
            n_agents=_get(parser, "kinetic", "n_agents", int, 100_000),
            eps=_get(parser, "kinetic", "eps", float, 0.01),
            n_steps=_get(parser, "kinetic", "n_steps", int, 10),
            controller=_get(parser, "kinetic", "controller", str, "sdre"),
            f0=f0,
            histogram_bins=_get(parser, "kinetic", "histogram_bins", int, 100),
            seed=_get(parser, "kinetic", "seed", int, 0),
        )
        binary_cfg = BinarySimConfig(
            dt=_get(parser, "binary", "dt", float, 0.01),
            horizon=_get(parser, "binary", "horizon", float, 10.0),
            xi0=_get(parser, "binary", "xi0", float, -0.5),
            xj0=_get(parser, "binary", "xj0", float, 0.5),
        )
        pmp_cfg = PmpConfig(
            horizon=_get(parser, "pmp", "horizon", float, 100.0),
            max_sweeps=_get(parser, "pmp", "max_sweeps", int, 200),
            tol=_get(parser, "pmp", "tol", float, 1e-6),
        )
        grid_cfg = GridSpec(
            mu_dv=_get(parser, "grid", "mu_dv", _floats, (0.0, 0.05)),
            widths=_get(parser, "grid", "widths", _ints, (100,)),
            depths=_get(parser, "grid", "depths", _ints, (2,)),
        )
        cfg = RunConfig(
            model=model_cfg,
            train=train_cfg,
            kinetic=kin_cfg,
            binary=binary_cfg,
            pmp=pmp_cfg,
            grid=grid_cfg,
            n_samples=_get(parser, "dataset", "n_samples", int, 1000),
            seed=_get(parser, "dataset", "seed", int, 7),
            out_dir=Path(_get(parser, "paths", "out_dir", str, "out")),
            eval_grid_n=_get(parser, "eval", "grid_n", int, 316),
            threads=0,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    # flag overrides
    if getattr(args, "gamma", None) is not None or getattr(args, "beta", None) is not None:
        cfg.model = ModelConfig(
            beta=args.beta if args.beta is not None else cfg.model.beta,
            gamma=args.gamma if args.gamma is not None else cfg.model.gamma,
        )
    if getattr(args, "mu_dv", None) is not None:
        cfg.train = replace(cfg.train, mu_dv=args.mu_dv)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "eps", None) is not None:
        cfg.kinetic = replace(cfg.kinetic, eps=args.eps)
    if getattr(args, "n_agents", None) is not None:
        cfg.kinetic = replace(cfg.kinetic, n_agents=args.n_agents)
    if getattr(args, "n_steps", None) is not None:
        cfg.kinetic = replace(cfg.kinetic, n_steps=args.n_steps)
    if getattr(args, "controller", None) is not None:
        cfg.kinetic = replace(cfg.kinetic, controller=args.controller)
    if getattr(args, "grid_n", None) is not None:
        cfg.eval_grid_n = args.grid_n
    if getattr(args, "n_samples", None) is not None:
        cfg.n_samples = args.n_samples
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.kinetic = replace(cfg.kinetic, seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = Path(args.out_dir)
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def _write_atomic(path: Path, text: str) -> None:
    """Write via a temp file and rename so failures leave no partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = dataset.generate(cfg.n_samples, cfg.seed, cfg.model)
    out = cfg.out_dir / "dataset.csv"
    _write_atomic(out.with_suffix(".meta"), dataset.to_meta_text(ds))
    _write_atomic(out, dataset.to_csv_text(ds))
    print(f"wrote {out} and {out.with_suffix('.meta')}")
    print(f"samples={ds.n} train={len(ds.train_idx)} val={len(ds.val_idx)}")
    print(
        f"ranges: V [{ds.V.min():.3e}, {ds.V.max():.3e}]  "
        f"|dV| max {np.abs(ds.gradV).max():.3e}  |u| max {np.abs(ds.u).max():.3e}"
    )
    return 0


def _load_dataset(cfg: RunConfig, args) -> dataset.Dataset:
    path = Path(args.data) if args.data else cfg.out_dir / "dataset.csv"
    return dataset.load(path)


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg, args)
    net, history = neural.train(ds, args.target, cfg.train)
    model_path = Path(args.out_model) if args.out_model else (
        cfg.out_dir / f"model_{args.target}.json"
    )
    model_path.parent.mkdir(parents=True, exist_ok=True)
    neural.save_model(net, model_path)
    hist_path = model_path.with_name(model_path.stem + "_history.csv")
    neural.save_history(history, hist_path)
    print(f"wrote {model_path} and {hist_path}")
    print(f"final val loss {history[-1][2]:.6e} (best {min(h[2] for h in history):.6e})")
    return 0


def cmd_grid_search(cfg: RunConfig, args) -> int:
    ds = _load_dataset(cfg, args)
    best, rows = neural.grid_search(
        ds, cfg.grid, cfg.train, target=args.target, workers=cfg.workers()
    )
    lines = [",".join(LEADERBOARD_HEADER)]
    for row in rows:
        lines.append(
            f"{row.mu_dv!r},{row.width},{row.depth},"
            f"{row.val_mre!r},{row.val_mse!r},{row.val_r2!r}"
        )
    out = cfg.out_dir / "leaderboard.csv"
    _write_atomic(out, "\n".join(lines) + "\n")
    print(f"wrote {out}")
    print(
        f"winner: mu_dv={best.mu_dv} width={best.hidden_width} "
        f"depth={best.hidden_depth} val_mre={rows[0].val_mre:.4e}"
    )
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.value_model and not args.control_model:
        raise ConfigError("eval needs --value-model and/or --control-model")
    grid = neural.evaluation_grid(cfg.eval_grid_n)
    rows = []
    if args.value_model:
        net = neural.load_model(args.value_model)
        metrics = neural.evaluate(net, grid, cfg.model, "value")
        for name in ("V_theta", "dV_theta", "u_V"):
            m = metrics[name]
            rows.append((name, m.mse, m.r2, m.mre))
    if args.control_model:
        net = neural.load_model(args.control_model)
        m = neural.evaluate(net, grid, cfg.model, "control")["u_theta"]
        rows.append(("u_theta", m.mse, m.r2, m.mre))
    lines = [",".join(METRICS_HEADER)]
    for name, mse, r2, mre in rows:
        lines.append(f"{name},{mse!r},{r2!r},{mre!r}")
        print(f"{name}: mse={mse:.4e} r2={r2:.5f} mre={mre:.4f}")
    out = cfg.out_dir / "fit_metrics.csv"
    _write_atomic(out, "\n".join(lines) + "\n")
    print(f"wrote {out}")
    return 0


def _load_nets(args):
    net_value = neural.load_model(args.value_model) if getattr(args, "value_model", None) else None
    net_control = neural.load_model(args.control_model) if getattr(args, "control_model", None) else None
    return net_value, net_control


def cmd_simulate_binary(cfg: RunConfig, args) -> int:
    controller = args.controller or "sdre"
    net_value, net_control = _load_nets(args)
    record = sdre.integrate_closed_loop(
        (cfg.binary.xi0, cfg.binary.xj0),
        controller,
        cfg.binary.dt,
        cfg.pmp.horizon if controller == "openloop" else cfg.binary.horizon,
        cfg.model,
        net_value=net_value,
        net_control=net_control,
        max_sweeps=cfg.pmp.max_sweeps,
        sweep_tol=cfg.pmp.tol,
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.out_dir / f"trajectory_{controller}.csv"
    record.to_csv(out)
    plot = plots.plot_trajectory_gap([out], cfg.out_dir / f"gap_{controller}.svg")
    print(f"wrote {out} and {plot}")
    print(
        f"final gap {record.gap[-1]:.4e}, accumulated cost {record.total_cost():.4e}"
    )
    return 0


def cmd_simulate_kinetic(cfg: RunConfig, args) -> int:
    controller = args.controller or cfg.kinetic.controller
    kc = replace(cfg.kinetic, controller=controller)
    net_value, net_control = _load_nets(args)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    prefix = f"kinetic_{controller}"
    series = kinetic.run(
        kc, cfg.model, net_value=net_value, net_control=net_control,
        out_dir=cfg.out_dir, prefix=prefix,
    )
    hist_paths = sorted(cfg.out_dir.glob(f"{prefix}_hist_*.csv"))
    plots.plot_kinetic_series(cfg.out_dir / f"{prefix}.csv", cfg.out_dir / f"{prefix}.svg")
    plots.plot_histogram_overlay(hist_paths, cfg.out_dir / f"{prefix}_densities.svg")
    plots.plot_density_surface(hist_paths, cfg.out_dir / f"{prefix}_surface.svg")
    print(f"wrote {cfg.out_dir / (prefix + '.csv')} and {len(hist_paths)} histograms")
    print(
        f"variance: initial {series.variances[0]:.4e} final {series.variances[-1]:.4e}"
    )
    return 0


def cmd_plot(cfg: RunConfig, args) -> int:
    produced = plots.render(args.csvs, cfg.out_dir)
    for p in produced:
        print(f"wrote {p}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style configuration file")
    common.add_argument("--seed", type=int, help="override every module seed")
    common.add_argument("--threads", type=int, help="worker bound for parallel sections")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--gamma", type=float, help="control penalty")
    common.add_argument("--beta", type=float, help="kernel strength")

    parser = argparse.ArgumentParser(
        prog="opinionctrl",
        description="consensus control of opinion dynamics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the labeled dataset")
    p.add_argument("--n-samples", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--data", help="dataset CSV (default <out-dir>/dataset.csv)")
    p.add_argument("--target", choices=("value", "control"), default="value")
    p.add_argument("--out-model")
    p.add_argument("--mu-dv", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", parents=[common], help="hyperparameter search")
    p.add_argument("--data")
    p.add_argument("--target", choices=("value", "control"), default="value")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("eval", parents=[common], help="grid evaluation against the Riccati truth")
    p.add_argument("--value-model")
    p.add_argument("--control-model")
    p.add_argument("--grid-n", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate-binary", parents=[common], help="one controlled pair")
    p.add_argument("--controller", choices=sdre.CONTROLLER_TAGS)
    p.add_argument("--value-model")
    p.add_argument("--control-model")
    p.set_defaults(func=cmd_simulate_binary)

    p = sub.add_parser("simulate-kinetic", parents=[common], help="population Monte Carlo")
    p.add_argument("--controller", choices=("none", "sdre", "nn_value", "nn_direct"))
    p.add_argument("--value-model")
    p.add_argument("--control-model")
    p.add_argument("--eps", type=float)
    p.add_argument("--n-agents", type=int)
    p.add_argument("--n-steps", type=int)
    p.set_defaults(func=cmd_simulate_kinetic)

    p = sub.add_parser("plot", parents=[common], help="render CSV artifacts to SVG")
    p.add_argument("csvs", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        return args.func(cfg, args)
    except (ConfigError, DomainViolation, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (riccati.RiccatiError, neural.DivergedTraining,
            sdre.NonFiniteState, kinetic.RejectionStall) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
