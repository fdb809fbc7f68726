"""Monte Carlo simulation of binary-collision opinion dynamics.

A population of agents evolves by random pairwise interactions. Under
the weak-interaction scaling used here the step size equals the
interaction strength and the interaction rate is its inverse, so their
product is one: every agent collides exactly once per step through a
uniformly random perfect matching. Collisions reuse the pair update of
:mod:`opinionctrl.model`, so a two-agent run reproduces the pair
integrator bit for bit.

Collisions within one step are data independent; they are evaluated as
vectorized array operations after all random draws for the step have
been made, so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from opinionctrl import model, sdre
from opinionctrl.model import ModelConfig

__all__ = [
    "RejectionStall",
    "MixtureSpec",
    "Population",
    "KineticConfig",
    "KineticSeries",
    "DEFAULT_MIXTURE",
    "sample_initial",
    "collide_pair",
    "step",
    "run",
    "SERIES_HEADER",
    "HIST_HEADER",
]

SERIES_HEADER = ["step", "mean", "variance"]
HIST_HEADER = ["bin_center", "density"]


class RejectionStall(RuntimeError):
    """Rejection sampling of the initial density accepts almost nothing."""


@dataclass(frozen=True)
class MixtureSpec:
    """Normal mixture truncated to the opinion interval."""

    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.means) == len(self.stds)) or not self.weights:
            raise ValueError("mixture components must align and be nonempty")
        if abs(sum(self.weights) - 1.0) > 1e-12 or any(w < 0 for w in self.weights):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if any(not model.OPINION_MIN <= m <= model.OPINION_MAX for m in self.means):
            raise ValueError("mixture means must lie in the opinion interval")
        if any(not s > 0 for s in self.stds):
            raise ValueError("mixture stds must be positive")


# Double-peaked default: the two components are arbitrary but documented
# choices, equal weight at +-0.5 with std 0.15.
DEFAULT_MIXTURE = MixtureSpec(weights=(0.5, 0.5), means=(-0.5, 0.5), stds=(0.15, 0.15))


@dataclass
class Population:
    """Opinion samples plus the generator driving their interactions."""

    opinions: np.ndarray
    step_count: int
    rng_seed: int
    rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)
        n = len(self.opinions)
        if n < 2 or n % 2:
            raise ValueError("population size must be even and at least 2")
        if np.abs(self.opinions).max() > model.OPINION_MAX:
            raise ValueError("opinions must lie in [-1, 1]")

    @property
    def n_agents(self) -> int:
        return len(self.opinions)


@dataclass(frozen=True)
class KineticConfig:
    """Simulation parameters.

    ``eps`` is both the interaction strength and the time step; the
    interaction rate defaults to 1/eps so that every agent collides once
    per step (rate * step = 1). Other rates are accepted in the config
    but the stepper only implements the everyone-collides regime.
    """

    n_agents: int = 100_000
    eps: float = 0.01
    n_steps: int = 10
    controller: str = "sdre"
    f0: MixtureSpec = DEFAULT_MIXTURE
    histogram_bins: int = 100
    seed: int = 0
    interaction_rate: float | None = None

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.n_agents < 2 or self.n_agents % 2:
            raise ValueError("n_agents must be even and at least 2")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.histogram_bins < 1:
            raise ValueError("histogram_bins must be positive")
        if not (callable(self.controller) or self.controller in ("none", "sdre", "nn_value", "nn_direct")):
            raise ValueError(f"unknown controller {self.controller!r}")

    def rate(self) -> float:
        return 1.0 / self.eps if self.interaction_rate is None else self.interaction_rate


def sample_initial(spec: MixtureSpec, n: int, seed: int) -> Population:
    """Draw n opinions from the truncated mixture by rejection;
    deterministic given the seed."""
    if n < 2 or n % 2:
        raise ValueError("n must be even and at least 2")
    rng = np.random.default_rng(seed)
    weights = np.asarray(spec.weights)
    means = np.asarray(spec.means)
    stds = np.asarray(spec.stds)
    out = np.empty(n)
    filled = 0
    attempts = 0
    drawn = 0
    while filled < n:
        pending = n - filled
        comp = rng.choice(len(weights), size=pending, p=weights)
        draws = rng.normal(means[comp], stds[comp])
        keep = draws[(draws >= model.OPINION_MIN) & (draws <= model.OPINION_MAX)]
        out[filled:filled + len(keep)] = keep
        filled += len(keep)
        drawn += pending
        attempts += 1
        if attempts >= 100 and filled < max(1, drawn // 100):
            raise RejectionStall(
                f"acceptance rate {filled / drawn:.2%} after {drawn} draws"
            )
    return Population(opinions=out, step_count=0, rng_seed=seed)


def collide_pair(xi, xj, eta: float, controller, cfg: ModelConfig):
    """Post-interaction opinions of one pair (vectorized over arrays).

    Moves each agent by eta times (drift + control) and clamps to the
    opinion interval; ``controller`` is a pair-control callable or None.
    """
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    if controller is None:
        ui = np.zeros_like(xi)
        uj = np.zeros_like(xj)
    else:
        ui, uj = controller(xi, xj)
    new_i, new_j, _ = model.pair_step(xi, xj, ui, uj, eta, cfg)
    return new_i, new_j


def step(pop: Population, kc: KineticConfig, cfg: ModelConfig,
         net_value=None, net_control=None, controller=None) -> Population:
    """One collision round: draw a uniform random perfect matching, then
    update every pair. Mutates and returns the population.

    ``controller`` overrides the tag in ``kc`` when given (a callable).
    """
    if abs(kc.eps * kc.rate() - 1.0) > 1e-12:
        raise ValueError(
            "stepper requires step * interaction rate == 1 (every agent collides once)"
        )
    if controller is None:
        controller = sdre.make_pair_controller(kc.controller, cfg, net_value, net_control)
    perm = pop.rng.permutation(pop.n_agents)
    left = perm[0::2]
    right = perm[1::2]
    new_l, new_r = collide_pair(pop.opinions[left], pop.opinions[right],
                                kc.eps, controller, cfg)
    pop.opinions[left] = new_l
    pop.opinions[right] = new_r
    pop.step_count += 1
    if np.abs(pop.opinions).max() > model.OPINION_MAX:
        raise AssertionError("opinion left [-1, 1] after a collision step")
    return pop


@dataclass
class KineticSeries:
    """Per-step population statistics and histograms.

    ``densities[k]`` is the normalized histogram after k steps
    (bin sums times bin width equal 1).
    """

    steps: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    densities: np.ndarray
    bin_centers: np.ndarray

    def save(self, out_dir, prefix: str = "kinetic") -> list[Path]:
        """Write ``<prefix>.csv`` (step, mean, variance) and one histogram
        CSV per recorded step."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        lines = [",".join(SERIES_HEADER)]
        for k in range(len(self.steps)):
            lines.append(f"{int(self.steps[k])},{self.means[k]!r},{self.variances[k]!r}")
        series_path = out_dir / f"{prefix}.csv"
        series_path.write_text("\n".join(lines) + "\n")
        paths.append(series_path)
        for k in range(len(self.steps)):
            hist_lines = [",".join(HIST_HEADER)]
            for c, d in zip(self.bin_centers, self.densities[k]):
                hist_lines.append(f"{c!r},{d!r}")
            hp = out_dir / f"{prefix}_hist_{int(self.steps[k]):03d}.csv"
            hp.write_text("\n".join(hist_lines) + "\n")
            paths.append(hp)
        return paths


def _record(opinions: np.ndarray, bins: int):
    density, edges = np.histogram(
        opinions, bins=bins, range=(model.OPINION_MIN, model.OPINION_MAX), density=True
    )
    centers = 0.5 * (edges[:-1] + edges[1:])
    return float(np.mean(opinions)), float(np.var(opinions)), density, centers


def run(kc: KineticConfig, cfg: ModelConfig, net_value=None, net_control=None,
        out_dir=None, prefix: str = "kinetic") -> KineticSeries:
    """Simulate the configured population and record mean, variance, and
    histogram at step 0 and after every collision round. Writes CSVs when
    ``out_dir`` is given."""
    controller = sdre.make_pair_controller(kc.controller, cfg, net_value, net_control)
    pop = sample_initial(kc.f0, kc.n_agents, kc.seed)
    means = np.empty(kc.n_steps + 1)
    variances = np.empty(kc.n_steps + 1)
    densities = np.empty((kc.n_steps + 1, kc.histogram_bins))
    means[0], variances[0], densities[0], centers = _record(pop.opinions, kc.histogram_bins)
    for k in range(1, kc.n_steps + 1):
        step(pop, kc, cfg, controller=controller)
        means[k], variances[k], densities[k], _ = _record(pop.opinions, kc.histogram_bins)
    series = KineticSeries(
        steps=np.arange(kc.n_steps + 1),
        means=means,
        variances=variances,
        densities=densities,
        bin_centers=centers,
    )
    if out_dir is not None:
        series.save(out_dir, prefix=prefix)
    return series
