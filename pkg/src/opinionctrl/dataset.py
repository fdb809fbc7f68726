"""Supervised-learning datasets labeled by the frozen Riccati feedback.

States are sampled as uniform pairs (x_i, x_j) on [-1, 1]^2 (so both
opinions are guaranteed to be admissible) and stored in transformed
coordinates (x_i, xbar). Each sample carries the value V, its gradient,
and the feedback control u produced by the frozen Riccati solution at
that state. Persistence is a CSV plus a flat key=value metadata file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from opinionctrl import riccati, sdre
from opinionctrl.errors import SchemaError
from opinionctrl.model import ModelConfig, cost_weights, semilinear_A

__all__ = [
    "LabeledSample",
    "Dataset",
    "sample_states",
    "generate",
    "split_sizes",
    "save",
    "load",
    "CSV_HEADER",
]

CSV_HEADER = ["xi", "xbar", "V", "dV1", "dV2", "u1", "u2"]
_META_SUFFIX = ".meta"
_LABEL_CHECK_ROWS = 10
_LABEL_CHECK_TOL = 1e-9


@dataclass
class LabeledSample:
    """One labeled state: (x_i, xbar), value, value gradient, control."""

    xi: float
    xbar: float
    V: float
    gradV: np.ndarray
    u: np.ndarray


@dataclass
class Dataset:
    """Column arrays of labeled samples plus the train/validation split.

    ``states`` has shape (n, 2); ``train_idx`` and ``val_idx`` are a
    disjoint cover of range(n) with roughly an 80/20 ratio.
    """

    states: np.ndarray
    V: np.ndarray
    gradV: np.ndarray
    u: np.ndarray
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    gamma: float
    beta: float

    @property
    def n(self) -> int:
        return len(self.states)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(
            xi=float(self.states[i, 0]),
            xbar=float(self.states[i, 1]),
            V=float(self.V[i]),
            gradV=self.gradV[i].copy(),
            u=self.u[i].copy(),
        )

    def config(self) -> ModelConfig:
        return ModelConfig(beta=self.beta, gamma=self.gamma)

    def train_arrays(self):
        idx = self.train_idx
        return self.states[idx], self.V[idx], self.gradV[idx], self.u[idx]

    def val_arrays(self):
        idx = self.val_idx
        return self.states[idx], self.V[idx], self.gradV[idx], self.u[idx]


def sample_states(n: int, seed: int) -> np.ndarray:
    """Uniformly sample n pairs on [-1, 1]^2 and transform to (x_i, xbar).
    Deterministic given the seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    pairs = rng.uniform(-1.0, 1.0, size=(n, 2))
    xbar = 0.5 * (pairs[:, 0] + pairs[:, 1])
    return np.column_stack([pairs[:, 0], xbar])


def split_sizes(n: int) -> tuple[int, int]:
    """(train, validation) sizes: validation gets floor(n/5), at least one
    sample; training keeps the remainder."""
    n_val = max(1, n // 5) if n >= 2 else 0
    return n - n_val, n_val


def generate(n: int, seed: int, cfg: ModelConfig) -> Dataset:
    """Sample n states, solve the frozen Riccati problem at each, and
    label with (V, grad V, u). Shuffles once and splits 80/20, all
    deterministic from the seed."""
    if n < 5:
        raise ValueError("need at least 5 samples so both splits are nonempty")
    rng = np.random.default_rng(seed)
    pairs = rng.uniform(-1.0, 1.0, size=(n, 2))
    xi = pairs[:, 0]
    xbar = 0.5 * (pairs[:, 0] + pairs[:, 1])
    _, value, (g1, g2), (u1, u2) = sdre.feedback_arrays(xi, xbar, cfg)
    perm = rng.permutation(n)
    n_train, _ = split_sizes(n)
    return Dataset(
        states=np.column_stack([xi, xbar]),
        V=value,
        gradV=np.column_stack([g1, g2]),
        u=np.column_stack([u1, u2]),
        seed=seed,
        train_idx=perm[:n_train],
        val_idx=perm[n_train:],
        gamma=cfg.gamma,
        beta=cfg.beta,
    )


def _meta_path(path) -> Path:
    return Path(path).with_suffix(_META_SUFFIX)


def to_csv_text(ds: Dataset) -> str:
    """CSV serialization; floats use repr so a round trip reproduces
    every field exactly."""
    lines = [",".join(CSV_HEADER)]
    for i in range(ds.n):
        row = (
            ds.states[i, 0], ds.states[i, 1], ds.V[i],
            ds.gradV[i, 0], ds.gradV[i, 1], ds.u[i, 0], ds.u[i, 1],
        )
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def to_meta_text(ds: Dataset) -> str:
    meta = [
        "format=dataset-v1",
        f"n={ds.n}",
        f"seed={ds.seed}",
        f"gamma={ds.gamma!r}",
        f"beta={ds.beta!r}",
        "train_indices=" + ",".join(str(i) for i in ds.train_idx),
        "val_indices=" + ",".join(str(i) for i in ds.val_idx),
    ]
    return "\n".join(meta) + "\n"


def save(ds: Dataset, path) -> None:
    """Write the CSV and its metadata sidecar."""
    path = Path(path)
    _meta_path(path).write_text(to_meta_text(ds))
    path.write_text(to_csv_text(ds))


def _parse_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise SchemaError(f"{path}: malformed metadata line {line!r}")
        key, _, val = line.partition("=")
        meta[key] = val
    for key in ("format", "n", "seed", "gamma", "beta", "train_indices", "val_indices"):
        if key not in meta:
            raise SchemaError(f"{path}: missing metadata key {key!r}")
    if meta["format"] != "dataset-v1":
        raise SchemaError(f"{path}: unknown format {meta['format']!r}")
    return meta


def _recheck_labels(ds: Dataset) -> None:
    """Re-solve the Riccati problem for a few rows and confirm the stored
    labels; guards against the config drifting between generation and
    training. Uses the generic solver, independent of the labeling path."""
    cfg = ds.config()
    q, r, b = cost_weights(cfg)
    rng = np.random.default_rng(ds.seed)
    rows = rng.choice(ds.n, size=min(_LABEL_CHECK_ROWS, ds.n), replace=False)
    for i in rows:
        xi, xbar = ds.states[i]
        problem = riccati.RiccatiProblem(A=semilinear_A(xi, xbar, cfg), B=b, Q=q, R=r)
        pi = riccati.solve_care_hamiltonian(problem).Pi
        z = np.array([xi, xbar])
        value = float(z @ pi @ z)
        grad = 2.0 * (pi @ z)
        u = -np.linalg.solve(r, b.T @ pi @ z)
        if (
            abs(value - ds.V[i]) > _LABEL_CHECK_TOL
            or np.abs(grad - ds.gradV[i]).max() > _LABEL_CHECK_TOL
            or np.abs(u - ds.u[i]).max() > _LABEL_CHECK_TOL
        ):
            raise SchemaError(
                f"stored labels for row {i} disagree with a fresh Riccati solve; "
                "dataset and configuration are out of sync"
            )


def load(path, check_labels: bool = True) -> Dataset:
    """Read a dataset CSV plus metadata back into memory.

    Raises SchemaError for a malformed header, inconsistent split, or
    (when ``check_labels``) labels that no longer match a fresh solve.
    """
    path = Path(path)
    text = path.read_text()
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0].split(",") != CSV_HEADER:
        raise SchemaError(f"{path}: expected header {','.join(CSV_HEADER)}")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    if data.ndim != 2 or data.shape[1] != len(CSV_HEADER):
        raise SchemaError(f"{path}: malformed data rows")
    meta = _parse_meta(_meta_path(path))
    n = int(meta["n"])
    if n != len(data):
        raise SchemaError(f"{path}: metadata n={n} but {len(data)} rows")
    train_idx = np.array([int(v) for v in meta["train_indices"].split(",") if v], dtype=int)
    val_idx = np.array([int(v) for v in meta["val_indices"].split(",") if v], dtype=int)
    if sorted(np.concatenate([train_idx, val_idx]).tolist()) != list(range(n)):
        raise SchemaError(f"{path}: split is not a disjoint cover of the rows")
    ds = Dataset(
        states=data[:, 0:2],
        V=data[:, 2],
        gradV=data[:, 3:5],
        u=data[:, 5:7],
        seed=int(meta["seed"]),
        train_idx=train_idx,
        val_idx=val_idx,
        gamma=float(meta["gamma"]),
        beta=float(meta["beta"]),
    )
    if check_labels:
        _recheck_labels(ds)
    return ds
