"""Feed-forward networks with hand-written backpropagation.

Scalar value networks are trained with a gradient-augmented loss,

    loss = MSE(V, V_net) + mu_dv * MSE(grad V, grad V_net),

whose parameter gradient includes the second-order contribution that
arises because the loss contains the network's own input gradient
(double backpropagation). Two-output control networks are trained with
plain MSE. All gradients are exact and are checked against central
finite differences in the test suite.

The default architecture has four affine layers: a width-preserving
input layer and the output layer use the identity activation, the two
hidden layers (100 units each) use the logistic sigmoid.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from opinionctrl import sdre
from opinionctrl.dataset import Dataset
from opinionctrl.errors import SchemaError
from opinionctrl.model import ModelConfig

__all__ = [
    "DivergedTraining",
    "Mlp",
    "TrainConfig",
    "FitMetrics",
    "GridSpec",
    "LeaderboardRow",
    "forward",
    "input_gradient",
    "loss_and_param_grad",
    "loss_only",
    "sobolev_loss_parts",
    "train",
    "evaluate",
    "evaluation_grid",
    "fit_metrics",
    "grid_search",
    "save_model",
    "load_model",
    "save_history",
    "HISTORY_HEADER",
]

_ACTIVATIONS = ("identity", "sigmoid")
MODEL_FORMAT = "mlp-v1"
HISTORY_HEADER = ["epoch", "train_loss", "val_loss"]
_MRE_FLOOR = 1e-12


class DivergedTraining(RuntimeError):
    """Training loss became non-finite; carries the history so far."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


def _act_eval(z: np.ndarray, tag: str):
    """Activation value and its first two derivatives."""
    if tag == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    if tag == "sigmoid":
        s = expit(z)
        d1 = s * (1.0 - s)
        return s, d1, d1 * (1.0 - 2.0 * s)
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class Mlp:
    """Fixed-topology multilayer perceptron.

    ``layer_dims`` lists the output width of each affine layer; the first
    entry doubles as the input width (the input layer is a same-width
    affine map). ``weights[m]`` has shape (layer_dims[m], previous width).
    """

    layer_dims: list[int]
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        if len(self.activations) != len(dims):
            raise ValueError("need one activation tag per layer")
        for tag in self.activations:
            if tag not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        chain = [dims[0], *dims]
        for m, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (chain[m + 1], chain[m]) or b.shape != (chain[m + 1],):
                raise ValueError(f"layer {m} has inconsistent shapes")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {m} has non-finite parameters")

    @classmethod
    def create(cls, layer_dims, seed: int, activations=None) -> "Mlp":
        """Fresh network with fan-in scaled uniform weights and zero
        biases; deterministic given the seed."""
        layer_dims = list(layer_dims)
        if activations is None:
            activations = (
                ["identity"]
                + ["sigmoid"] * (len(layer_dims) - 2)
                + ["identity"]
            )
        rng = np.random.default_rng(seed)
        chain = [layer_dims[0], *layer_dims]
        weights, biases = [], []
        for m in range(len(layer_dims)):
            bound = 1.0 / np.sqrt(chain[m])
            weights.append(rng.uniform(-bound, bound, size=(chain[m + 1], chain[m])))
            biases.append(np.zeros(chain[m + 1]))
        return cls(layer_dims, list(activations), weights, biases)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        return Mlp(
            list(self.layer_dims),
            list(self.activations),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Outputs for a batch of rows, shape (n, out_dim)."""
        y = np.asarray(x, dtype=float)
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            y = _act_eval(y @ w.T + b, tag)[0]
        return y

    def forward(self, x) -> np.ndarray:
        return self.forward_batch(np.asarray(x, dtype=float)[None, :])[0]

    def value_and_grad_batch(self, x: np.ndarray):
        """Scalar outputs and their input gradients, shapes (n,), (n, in_dim).
        Reverse-mode chain through the stored layer derivatives."""
        if self.out_dim != 1:
            raise ValueError("input gradients are defined for scalar outputs")
        y = np.asarray(x, dtype=float)
        d1s = []
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            y, d1, _ = _act_eval(y @ w.T + b, tag)
            d1s.append(d1)
        p = d1s[-1]
        for m in range(len(self.weights) - 2, -1, -1):
            p = d1s[m] * (p @ self.weights[m + 1])
        return y[:, 0], p @ self.weights[0]

    # flat parameter views, used by the finite-difference oracles
    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [w.ravel() for w in self.weights] + [b.ravel() for b in self.biases]
        )

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for w in self.weights:
            w[...] = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
        for b in self.biases:
            b[...] = vec[pos:pos + b.size]
            pos += b.size


def forward(net: Mlp, x) -> np.ndarray:
    """Network output at a single input."""
    return net.forward(x)


def input_gradient(net: Mlp, x) -> tuple[float, np.ndarray]:
    """Scalar output and its exact gradient with respect to the input."""
    v, g = net.value_and_grad_batch(np.asarray(x, dtype=float)[None, :])
    return float(v[0]), g[0]


def _forward_full(net: Mlp, x: np.ndarray):
    """Forward pass keeping per-layer inputs and activation derivatives."""
    inputs, d1s, d2s = [], [], []
    y = x
    for w, b, tag in zip(net.weights, net.biases, net.activations):
        inputs.append(y)
        y, d1, d2 = _act_eval(y @ w.T + b, tag)
        d1s.append(d1)
        d2s.append(d2)
    return y, inputs, d1s, d2s


def _grad_chain(net: Mlp, d1s):
    """Per-layer output sensitivities p_m = d(out)/d(z_m) and the factors
    mvec_m they were built from; returns (p_list, mvec_list, input_grad)."""
    last = len(net.weights) - 1
    ps = [None] * len(net.weights)
    mvecs = [None] * len(net.weights)
    mvecs[last] = np.ones_like(d1s[last])
    ps[last] = d1s[last]
    for m in range(last - 1, -1, -1):
        mvecs[m] = ps[m + 1] @ net.weights[m + 1]
        ps[m] = d1s[m] * mvecs[m]
    return ps, mvecs, ps[0] @ net.weights[0]


def sobolev_loss_parts(net: Mlp, x, values, grads):
    """(value MSE, gradient MSE) of a scalar network on a batch."""
    out, _, d1s, _ = _forward_full(net, np.asarray(x, dtype=float))
    _, _, g = _grad_chain(net, d1s)
    rv = out[:, 0] - values
    rg = g - grads
    return float(np.mean(rv * rv)), float(np.mean(np.sum(rg * rg, axis=1)))


def loss_only(net: Mlp, x, *, values=None, grads=None, controls=None,
              mu_dv: float = 0.0) -> float:
    """Training loss without parameter gradients."""
    if net.out_dim == 1:
        if mu_dv == 0.0:
            out = net.forward_batch(x)
            rv = out[:, 0] - values
            return float(np.mean(rv * rv))
        lv, lg = sobolev_loss_parts(net, x, values, grads)
        return lv + mu_dv * lg
    ru = net.forward_batch(x) - controls
    return float(np.mean(np.sum(ru * ru, axis=1)))


def loss_and_param_grad(net: Mlp, x, *, values=None, grads=None,
                        controls=None, mu_dv: float = 0.0):
    """Loss and exact parameter gradients on a batch.

    For scalar networks the loss is the gradient-augmented objective; the
    returned gradients include the double-backpropagation term from the
    input-gradient factor. For two-output networks ``mu_dv`` is ignored
    and the target is the control vector.

    Returns (loss, (weight_grads, bias_grads)).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    n_layers = len(net.weights)
    last = n_layers - 1
    d_w = [np.zeros_like(w) for w in net.weights]
    d_b = [np.zeros_like(b) for b in net.biases]
    out, inputs, d1s, d2s = _forward_full(net, x)

    if net.out_dim == 1:
        if values is None:
            raise ValueError("value targets required for a scalar network")
        use_grad_term = mu_dv != 0.0
        if use_grad_term and grads is None:
            raise ValueError("gradient targets required when mu_dv > 0")
        rv = out[:, 0] - values
        loss = float(np.mean(rv * rv))
        zbars = [None] * n_layers
        if use_grad_term:
            ps, mvecs, g = _grad_chain(net, d1s)
            rg = g - grads
            loss += mu_dv * float(np.mean(np.sum(rg * rg, axis=1)))
            gbar = (2.0 * mu_dv / n) * rg
            # reverse pass over the input-gradient chain; the weight
            # terms here are the second-order contributions
            d_w[0] += ps[0].T @ gbar
            pbar = gbar @ net.weights[0].T
            for m in range(n_layers):
                zbars[m] = d2s[m] * (pbar * mvecs[m])
                if m < last:
                    mbar = pbar * d1s[m]
                    d_w[m + 1] += ps[m + 1].T @ mbar
                    pbar = mbar @ net.weights[m + 1].T
        ybar = (2.0 / n) * rv[:, None]
    else:
        if controls is None:
            raise ValueError("control targets required for a vector network")
        ru = out - controls
        loss = float(np.mean(np.sum(ru * ru, axis=1)))
        zbars = [None] * n_layers
        ybar = (2.0 / n) * ru

    for m in range(last, -1, -1):
        zb = d1s[m] * ybar
        if zbars[m] is not None:
            zb = zb + zbars[m]
        d_w[m] += zb.T @ inputs[m]
        d_b[m] += zb.sum(axis=0)
        ybar = zb @ net.weights[m]
    return loss, (d_w, d_b)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``batch_size`` of None means full batch (the deterministic default).
    ``hidden_width``/``hidden_depth`` shape the sigmoid layers; the
    affine input and output layers are implied.
    """

    mu_dv: float = 0.05
    learning_rate: float = 1e-3
    epochs: int = 5000
    batch_size: int | None = None
    seed: int = 0
    optimizer: str = "adam"
    hidden_width: int = 100
    hidden_depth: int = 2

    def __post_init__(self) -> None:
        if self.mu_dv < 0.0:
            raise ValueError("mu_dv must be nonnegative")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hidden_width < 1 or self.hidden_depth < 1:
            raise ValueError("hidden layers must be nonempty")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def layer_dims(self, out_dim: int) -> list[int]:
        return [2] + [self.hidden_width] * self.hidden_depth + [out_dim]


class _Adam:
    def __init__(self, net: Mlp, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in net.weights]
        self.v_w = [np.zeros_like(w) for w in net.weights]
        self.m_b = [np.zeros_like(b) for b in net.biases]
        self.v_b = [np.zeros_like(b) for b in net.biases]

    def step(self, net: Mlp, d_w, d_b) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for m, (gw, gb) in enumerate(zip(d_w, d_b)):
            self.m_w[m] = self.b1 * self.m_w[m] + (1.0 - self.b1) * gw
            self.v_w[m] = self.b2 * self.v_w[m] + (1.0 - self.b2) * gw * gw
            net.weights[m] -= self.lr * (self.m_w[m] / c1) / (
                np.sqrt(self.v_w[m] / c2) + self.eps
            )
            self.m_b[m] = self.b1 * self.m_b[m] + (1.0 - self.b1) * gb
            self.v_b[m] = self.b2 * self.v_b[m] + (1.0 - self.b2) * gb * gb
            net.biases[m] -= self.lr * (self.m_b[m] / c1) / (
                np.sqrt(self.v_b[m] / c2) + self.eps
            )


class _Sgd:
    def __init__(self, net: Mlp, lr: float):
        self.lr = lr

    def step(self, net: Mlp, d_w, d_b) -> None:
        for m, (gw, gb) in enumerate(zip(d_w, d_b)):
            net.weights[m] -= self.lr * gw
            net.biases[m] -= self.lr * gb


def train(ds: Dataset, target: str, tc: TrainConfig):
    """Train a network on the dataset's training split.

    ``target`` is 'value' (scalar net, gradient-augmented loss) or
    'control' (two-output net, plain MSE). Records (epoch, train loss,
    val loss) per epoch, both evaluated at that epoch's parameters, and
    returns the parameters with the best validation loss.
    """
    if target not in ("value", "control"):
        raise ValueError(f"unknown training target {target!r}")
    out_dim = 1 if target == "value" else 2
    net = Mlp.create(tc.layer_dims(out_dim), seed=tc.seed)
    rng = np.random.default_rng(tc.seed)

    x_tr, v_tr, g_tr, u_tr = ds.train_arrays()
    x_va, v_va, g_va, u_va = ds.val_arrays()
    if target == "value":
        tr_kw = dict(values=v_tr, grads=g_tr, mu_dv=tc.mu_dv)
        va_kw = dict(values=v_va, grads=g_va, mu_dv=tc.mu_dv)
    else:
        tr_kw = dict(controls=u_tr)
        va_kw = dict(controls=u_va)

    opt = (_Adam if tc.optimizer == "adam" else _Sgd)(net, tc.learning_rate)
    history: list[tuple[int, float, float]] = []

    val0 = loss_only(net, x_va, **va_kw)
    best_val, best_net = val0, net.copy()

    def _note(epoch: int, tr_loss: float, va_loss: float) -> None:
        nonlocal best_val, best_net
        if not (np.isfinite(tr_loss) and np.isfinite(va_loss)):
            raise DivergedTraining(
                f"loss became non-finite at epoch {epoch}", history=history
            )
        history.append((epoch, tr_loss, va_loss))
        if va_loss < best_val:
            best_val, best_net = va_loss, net.copy()

    if tc.batch_size is None:
        last_val = val0
        for epoch in range(tc.epochs):
            tr_loss, (d_w, d_b) = loss_and_param_grad(net, x_tr, **tr_kw)
            _note(epoch, tr_loss, last_val)
            opt.step(net, d_w, d_b)
            last_val = loss_only(net, x_va, **va_kw)
        _note(tc.epochs, loss_only(net, x_tr, **tr_kw), last_val)
    else:
        _note(0, loss_only(net, x_tr, **tr_kw), val0)
        n_tr = len(x_tr)
        for epoch in range(1, tc.epochs + 1):
            perm = rng.permutation(n_tr)
            for start in range(0, n_tr, tc.batch_size):
                sel = perm[start:start + tc.batch_size]
                kw = {
                    k: (v[sel] if isinstance(v, np.ndarray) else v)
                    for k, v in tr_kw.items()
                }
                _, (d_w, d_b) = loss_and_param_grad(net, x_tr[sel], **kw)
                opt.step(net, d_w, d_b)
            _note(epoch, loss_only(net, x_tr, **tr_kw), loss_only(net, x_va, **va_kw))

    return best_net, history


@dataclass(frozen=True)
class FitMetrics:
    """Goodness of fit: mean squared error, coefficient of determination
    over flattened components, and mean relative error over points."""

    mse: float
    r2: float
    mre: float


def fit_metrics(pred: np.ndarray, truth: np.ndarray) -> FitMetrics:
    """Metrics for predictions against ground truth, both shaped (n, k).

    The MSE is the mean squared Euclidean error per point; r^2 pools all
    components; the MRE averages ||err|| / ||truth|| over points, skipping
    points whose truth norm is below 1e-12.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    err = pred - truth
    mse = float(np.mean(np.sum(err * err, axis=1)))
    ss_res = float(np.sum(err * err))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    err_norm = np.linalg.norm(err, axis=1)
    truth_norm = np.linalg.norm(truth, axis=1)
    mask = truth_norm > _MRE_FLOOR
    mre = float(np.mean(err_norm[mask] / truth_norm[mask])) if np.any(mask) else 0.0
    return FitMetrics(mse=mse, r2=r2, mre=mre)


def evaluation_grid(n_axis: int = 316) -> np.ndarray:
    """Uniform grid over admissible pairs, transformed; 316 points per
    axis gives just under 1e5 states."""
    xs = np.linspace(-1.0, 1.0, n_axis)
    xi, xj = np.meshgrid(xs, xs, indexing="ij")
    xi = xi.ravel()
    xbar = 0.5 * (xi + xj.ravel())
    return np.column_stack([xi, xbar])


def evaluate(net, states: np.ndarray, cfg: ModelConfig, target: str):
    """Compare a network with the pointwise Riccati solution on a grid.

    Returns FitMetrics per quantity: {'V_theta', 'dV_theta', 'u_V'} for a
    value network, {'u_theta'} for a control network. The u_V row follows
    from the dV row by the exact uniform-scaling identity
    u_V = -(1/(2r)) grad V, so its r^2 and MRE coincide with dV's and its
    MSE scales by (1/(2r))^2.
    """
    xi = states[:, 0]
    xbar = states[:, 1]
    _, v_true, (g1, g2), (u1, u2) = sdre.feedback_arrays(xi, xbar, cfg)
    if target == "value":
        v_pred, g_pred = net.value_and_grad_batch(states)
        dv = fit_metrics(g_pred, np.column_stack([g1, g2]))
        scale = 0.5 / cfg.r
        return {
            "V_theta": fit_metrics(v_pred[:, None], v_true[:, None]),
            "dV_theta": dv,
            "u_V": FitMetrics(mse=scale * scale * dv.mse, r2=dv.r2, mre=dv.mre),
        }
    if target == "control":
        u_pred = net.forward_batch(states)
        return {"u_theta": fit_metrics(u_pred, np.column_stack([u1, u2]))}
    raise ValueError(f"unknown evaluation target {target!r}")


@dataclass(frozen=True)
class GridSpec:
    """Hyperparameter grid; loss weights must lie in [0, 2]."""

    mu_dv: tuple = (0.0, 0.05)
    widths: tuple = (100,)
    depths: tuple = (2,)

    def __post_init__(self) -> None:
        if not (self.mu_dv and self.widths and self.depths):
            raise ValueError("grid must be nonempty")
        if any(not 0.0 <= m <= 2.0 for m in self.mu_dv):
            raise ValueError("mu_dv grid values must lie in [0, 2]")


@dataclass
class LeaderboardRow:
    mu_dv: float
    width: int
    depth: int
    val_mre: float
    val_mse: float
    val_r2: float
    error: str = ""


def _val_control_metrics(net: Mlp, ds: Dataset, target: str) -> FitMetrics:
    """Control-approximation metrics on the validation split; the ranking
    quantity for the grid search."""
    x_va, _, _, u_va = ds.val_arrays()
    cfg = ds.config()
    if target == "value":
        _, g = net.value_and_grad_batch(x_va)
        pred = sdre.control_from_grad(g, cfg)
    else:
        pred = net.forward_batch(x_va)
    return fit_metrics(pred, u_va)


def _grid_task(args) -> LeaderboardRow:
    ds, tc, target = args
    try:
        net, _ = train(ds, target, tc)
        m = _val_control_metrics(net, ds, target)
        return LeaderboardRow(tc.mu_dv, tc.hidden_width, tc.hidden_depth,
                              m.mre, m.mse, m.r2)
    except DivergedTraining as exc:
        return LeaderboardRow(tc.mu_dv, tc.hidden_width, tc.hidden_depth,
                              float("inf"), float("inf"), float("-inf"),
                              error=str(exc))


def grid_search(ds: Dataset, spec: GridSpec, base: TrainConfig,
                target: str = "value", workers: int = 1):
    """Train one model per grid point and rank by validation MRE of the
    control approximation.

    Individual training failures are recorded (infinite MRE) and the
    search continues. Returns (best TrainConfig, rows sorted by MRE).
    """
    combos = [
        replace(base, mu_dv=mu, hidden_width=w, hidden_depth=d)
        for mu in spec.mu_dv
        for w in spec.widths
        for d in spec.depths
    ]
    tasks = [(ds, tc, target) for tc in combos]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_task, tasks))
    else:
        rows = [_grid_task(t) for t in tasks]
    rows.sort(key=lambda r: (r.val_mre, r.mu_dv, r.width, r.depth))
    top = rows[0]
    if not np.isfinite(top.val_mre):
        raise DivergedTraining("every grid configuration failed to train")
    best = replace(base, mu_dv=top.mu_dv, hidden_width=top.width,
                   hidden_depth=top.depth)
    return best, rows


def save_model(net: Mlp, path) -> None:
    """Versioned JSON record of dims, activation tags, and row-major
    parameters; byte-identical across runs for identical networks."""
    payload = {
        "format": MODEL_FORMAT,
        "layer_dims": list(net.layer_dims),
        "activations": list(net.activations),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_model(path) -> Mlp:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not a valid model file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != MODEL_FORMAT:
        raise SchemaError(f"{path}: unsupported model format")
    try:
        net = Mlp(
            layer_dims=[int(d) for d in payload["layer_dims"]],
            activations=list(payload["activations"]),
            weights=[np.array(w, dtype=float) for w in payload["weights"]],
            biases=[np.array(b, dtype=float) for b in payload["biases"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: inconsistent model record: {exc}") from exc
    return net


def save_history(history, path) -> None:
    lines = [",".join(HISTORY_HEADER)]
    for epoch, tr, va in history:
        lines.append(f"{epoch},{tr!r},{va!r}")
    Path(path).write_text("\n".join(lines) + "\n")
