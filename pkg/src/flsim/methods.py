"""The eight client/server optimization methods.

Every client optimizer runs L epochs of shuffled minibatch steps
theta <- theta - lr * d, differing only in the per-step direction d and
in what per-client state it carries across rounds. Server optimizers
fold results in ascending client id; three of them (fedcm, fedgamma,
fedsmoo) also update a server-side state vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .models import Batch, ParamVector, loss_and_grad

METHOD_NAMES = (
    "fedavg",
    "fedprox",
    "feddyn",
    "fedcm",
    "fedsam",
    "fedgamma",
    "fedspeed",
    "fedsmoo",
)

# which hyperparameter keys each method accepts (config key names)
ALLOWED_HPARAMS = {
    "fedavg": frozenset(),
    "fedprox": frozenset({"lambda"}),
    "feddyn": frozenset({"beta"}),
    "fedcm": frozenset({"mu"}),
    "fedsam": frozenset({"rho", "xi"}),
    "fedgamma": frozenset({"rho", "xi"}),
    "fedspeed": frozenset({"rho", "gamma", "xi"}),
    "fedsmoo": frozenset({"rho", "beta", "xi"}),
}

SAM_FAMILY = frozenset({"fedsam", "fedgamma", "fedspeed", "fedsmoo"})

# per-client state vector names, by method
CLIENT_STATE_KEYS = {
    "feddyn": ("h",),
    "fedgamma": ("c_m",),
    "fedspeed": ("g_hat",),
    "fedsmoo": ("h", "u"),
}

# the single server state field a method may mutate (ServerState attribute)
SERVER_STATE_FIELD = {
    "fedcm": "momentum",
    "fedgamma": "global_control",
    "fedsmoo": "global_perturb",
}


@dataclass(frozen=True)
class HyperParams:
    lam: float = 0.0  # fedprox proximal weight
    beta: float = 0.0  # feddyn / fedsmoo dual weight
    mu: float = 0.1  # fedcm momentum mixing
    rho: float = 0.0  # SAM perturbation radius
    gamma: float = 0.1  # fedspeed proximal weight
    xi: float = 1e-12  # SAM zero-gradient guard

    def validate(self):
        if self.lam < 0 or self.beta < 0 or self.rho < 0 or self.gamma < 0:
            raise ConfigError("lambda/beta/rho/gamma must be non-negative")
        if not (0.0 <= self.mu <= 1.0):
            raise ConfigError("mu must be in [0, 1]")
        if self.xi <= 0:
            raise ConfigError("xi must be positive")

    @classmethod
    def for_method(cls, method: str, values: dict) -> "HyperParams":
        if method not in METHOD_NAMES:
            raise ConfigError(f"unknown method '{method}'")
        allowed = ALLOWED_HPARAMS[method]
        for key in values:
            if key not in allowed:
                raise ConfigError(f"hyperparameter '{key}' is illegal for {method}")
        kwargs = {("lam" if k == "lambda" else k): float(v) for k, v in values.items()}
        hp = cls(**kwargs)
        hp.validate()
        return hp


@dataclass
class ClientState:
    client_id: int
    payload: dict = field(default_factory=dict)  # name -> ParamVector


def init_client_state(method: str, client_id: int, template: ParamVector) -> ClientState:
    keys = CLIENT_STATE_KEYS.get(method, ())
    return ClientState(client_id, {k: template.zeros_like() for k in keys})


@dataclass
class ClientResult:
    client_id: int
    final_params: ParamVector
    steps_taken: int
    mean_loss: float
    grad_evals: int
    num_samples: int
    aux: ParamVector | None = None


def _local_loop(theta_r: ParamVector, shard, cfg, rng, local_epochs: int, step_fn):
    """Run L epochs of shuffled minibatch SGD; step_fn gives the direction.

    step_fn(theta_values, batch) -> (direction, loss, n_grad_evals).
    Returns (final ParamVector, mean step loss, steps, grad evals).
    """
    theta = theta_r.copy()
    n = len(shard)
    losses = []
    evals = 0
    for _ in range(local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(shard.features[idx], shard.labels[idx])
            d, loss, ne = step_fn(theta.values, batch)
            theta.values = theta.values - cfg.client_lr * d
            losses.append(loss)
            evals += ne
    return theta, float(np.mean(losses)), len(losses), evals


def _grad(cfg, theta_values, layout, batch):
    loss, g = loss_and_grad(cfg.model, ParamVector(theta_values, layout), batch)
    return g.values, loss


def _sam_grad(cfg, theta_values, layout, batch, hp: HyperParams, shift=None):
    """Gradient at the perturbed point theta + rho * raw/||raw||.

    raw is the plain gradient unless ``shift`` adds correction vectors
    (fedsmoo). Always two gradient evaluations, even at rho=0.
    """
    g1, loss = _grad(cfg, theta_values, layout, batch)
    raw = g1 if shift is None else g1 + shift
    eps = hp.rho * raw / (np.linalg.norm(raw) + hp.xi)
    g2, _ = _grad(cfg, theta_values + eps, layout, batch)
    return g2, loss, eps


def _run_client(method, theta_r, server, shard, state, hp, cfg, rng, local_epochs):
    """Dispatch per-method step function and end-of-round state update."""
    layout = theta_r.layout
    last_eps = [None]

    if method == "fedavg":

        def step(tv, batch):
            g, loss = _grad(cfg, tv, layout, batch)
            return g, loss, 1

    elif method == "fedprox":

        def step(tv, batch):
            g, loss = _grad(cfg, tv, layout, batch)
            return g + hp.lam * (tv - theta_r.values), loss, 1

    elif method == "feddyn":
        h = state.payload["h"].values

        def step(tv, batch):
            g, loss = _grad(cfg, tv, layout, batch)
            return g - h + hp.beta * (tv - theta_r.values), loss, 1

    elif method == "fedcm":
        delta = server.momentum.values

        def step(tv, batch):
            g, loss = _grad(cfg, tv, layout, batch)
            return hp.mu * g + (1.0 - hp.mu) * delta, loss, 1

    elif method == "fedsam":

        def step(tv, batch):
            g2, loss, _ = _sam_grad(cfg, tv, layout, batch, hp)
            return g2, loss, 2

    elif method == "fedgamma":
        c_m = state.payload["c_m"].values
        c = server.global_control.values

        def step(tv, batch):
            g2, loss, _ = _sam_grad(cfg, tv, layout, batch, hp)
            return g2 - c_m + c, loss, 2

    elif method == "fedspeed":
        g_hat = state.payload["g_hat"].values

        def step(tv, batch):
            g2, loss, _ = _sam_grad(cfg, tv, layout, batch, hp)
            return g2 - g_hat + hp.gamma * (tv - theta_r.values), loss, 2

    elif method == "fedsmoo":
        h = state.payload["h"].values
        u = state.payload["u"].values
        s = server.global_perturb.values

        def step(tv, batch):
            g2, loss, eps = _sam_grad(cfg, tv, layout, batch, hp, shift=s - u)
            last_eps[0] = eps
            return g2 - h + hp.beta * (tv - theta_r.values), loss, 2

    else:
        raise ConfigError(f"unknown method '{method}'")

    theta_f, mean_loss, steps, evals = _local_loop(
        theta_r, shard, cfg, rng, local_epochs, step
    )

    new_state = ClientState(state.client_id, {k: v.copy() for k, v in state.payload.items()})
    aux = None
    if method == "feddyn":
        new_state.payload["h"].values -= hp.beta * (theta_f.values - theta_r.values)
    elif method == "fedgamma":
        denom = cfg.client_lr * steps
        # lr=0 leaves theta unmoved; define the 0/0 displacement rate as 0
        rate = (theta_r.values - theta_f.values) / denom if denom > 0 else 0.0
        c_m_new = state.payload["c_m"].values - server.global_control.values + rate
        aux = ParamVector(c_m_new - state.payload["c_m"].values, layout)
        new_state.payload["c_m"] = ParamVector(c_m_new, layout)
    elif method == "fedspeed":
        new_state.payload["g_hat"].values -= hp.gamma * (theta_f.values - theta_r.values)
    elif method == "fedsmoo":
        new_state.payload["h"].values -= hp.beta * (theta_f.values - theta_r.values)
        new_state.payload["u"].values += last_eps[0] - server.global_perturb.values
        aux = ParamVector(last_eps[0].copy(), layout)

    result = ClientResult(
        client_id=state.client_id,
        final_params=theta_f,
        steps_taken=steps,
        mean_loss=mean_loss,
        grad_evals=evals,
        num_samples=len(shard),
        aux=aux,
    )
    return result, new_state


def client_opt(method, theta_r, server, shard, state, hp, cfg, rng, local_epochs):
    """Public entry used by the round engine."""
    return _run_client(method, theta_r, server, shard, state, hp, cfg, rng, local_epochs)


def mean_params(results, weighted: bool = False) -> ParamVector:
    """Deterministic fold in ascending client id (uniform mean by default)."""
    ordered = sorted(results, key=lambda r: r.client_id)
    stack = np.stack([r.final_params.values for r in ordered])
    if weighted:
        w = np.array([r.num_samples for r in ordered], dtype=np.float64)
        vals = (w[:, None] * stack).sum(axis=0) / w.sum()
    else:
        vals = stack.mean(axis=0)
    return ParamVector(vals, ordered[0].final_params.layout)


def server_opt(method, server, results, hp, cfg):
    """Aggregate client results into the next server state.

    Returns a new ServerState with round incremented; only the method's
    declared server field (if any) is updated.
    """
    ordered = sorted(results, key=lambda r: r.client_id)
    theta_new = mean_params(ordered, weighted=cfg.weighted_avg)
    new = replace(server, round=server.round + 1, global_params=theta_new)

    if method == "fedcm":
        tau_bar = float(np.mean([r.steps_taken for r in ordered]))
        denom = cfg.client_lr * tau_bar
        if denom > 0:
            delta = (server.global_params.values - theta_new.values) / denom
        else:
            delta = np.zeros_like(theta_new.values)
        new = replace(new, momentum=ParamVector(delta, theta_new.layout))
    elif method == "fedgamma":
        aux_sum = np.sum([r.aux.values for r in ordered], axis=0)
        c_new = server.global_control.values + aux_sum / cfg.n_clients
        new = replace(new, global_control=ParamVector(c_new, theta_new.layout))
    elif method == "fedsmoo":
        m_bar = np.mean([r.aux.values for r in ordered], axis=0)
        s_new = hp.rho * m_bar / (np.linalg.norm(m_bar) + hp.xi)
        new = replace(new, global_perturb=ParamVector(s_new, theta_new.layout))
    return new
