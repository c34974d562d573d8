"""Federated protocol engine: FedMac client updates, baselines, aggregation and the round loop.

Randomness is split into independent streams derived from the run seed:
``(0,)`` initial model, ``(1, t)`` client sampling in round ``t``,
``(2, i)`` mini-batch order of client ``i``, ``(3, t, i)`` evaluation-time
batches (Per-FedAvg adaptation and fresh personalized models). Every run is
therefore reproducible bit for bit from ``(seed, config)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datagen import ClientData, FederatedDataset
from .models import Batch, ModelSpec, ParamVector, init_params, loss_grad_array
from .sparsity import DEFAULT_RHO, DEFAULT_ZERO_TOL, CommCostModel, SmoothL1Config, phi_rho


class DivergenceError(RuntimeError):
    """A parameter became non-finite; carries the round and strategy when known."""

    def __init__(self, message: str, round: int | None = None, strategy: str | None = None):
        self.detail = message
        self.round = round
        self.strategy = strategy
        where = []
        if strategy is not None:
            where.append(f"strategy {strategy}")
        if round is not None:
            where.append(f"round {round}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class StrategyKind(str, enum.Enum):
    FEDMAC = "FedMac"
    FEDAVG = "FedAvg"
    FEDPROX = "FedProx"
    PFEDME = "pFedMe"
    PERFEDAVG = "PerFedAvg"


@dataclass(frozen=True)
class Strategy:
    """Which local update to run, with its strategy-specific constants.

    ``mu``: FedProx proximal weight. ``lam``/``K``: pFedMe Moreau-envelope
    weight and inner steps. ``alpha``/``beta_ml``: Per-FedAvg inner and outer
    step sizes (``None`` means use ``eta_p``).
    """

    kind: StrategyKind
    mu: float = 0.0
    lam: float = 15.0
    K: int = 1
    alpha: float | None = None
    beta_ml: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        for name in ("mu", "lam", "alpha", "beta_ml"):
            v = getattr(self, name)
            if v is not None and not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"strategy parameter {name} must be finite and nonnegative, got {v!r}")
        if self.K < 1:
            raise ValueError("pFedMe K must be >= 1")

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def has_personal_model(self) -> bool:
        return self.kind not in (StrategyKind.FEDAVG, StrategyKind.FEDPROX)


@dataclass(frozen=True)
class HyperParams:
    T: int
    R: int
    S: int
    lam: float = 1e-4
    eta: float = 3000.0
    eta_p: float = 0.05
    gamma: float = 0.0
    gamma_w: float = 0.0
    beta: float = 1.0
    rho: float = DEFAULT_RHO
    nu: float = 0.0
    batch_size: int = 20
    inner_steps: int = 1
    nu_max_iters: int = 100
    compute_only_sampled: bool = False

    def __post_init__(self):
        if self.T < 0 or self.R < 1:
            raise ValueError("need T >= 0 and R >= 1")
        if self.S < 1:
            raise ValueError("need S >= 1")
        if self.batch_size < 1 or self.inner_steps < 1 or self.nu_max_iters < 1:
            raise ValueError("batch_size, inner_steps and nu_max_iters must be >= 1")
        for name in ("lam", "gamma", "gamma_w", "nu", "beta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("eta", "eta_p", "rho"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


class ClientState:
    """Per-client working state: personalized model, local global model, data and batch cursor."""

    def __init__(self, index: int, data: ClientData, rng: np.random.Generator):
        self.index = index
        self.data = data
        self.rng = rng
        self.theta: ParamVector | None = None
        self.w_local: ParamVector | None = None
        self._perm = np.empty(0, dtype=np.int64)
        self._cursor = 0

    @property
    def train(self) -> Batch:
        return self.data.train

    @property
    def test(self) -> Batch:
        return self.data.test

    def next_batch_indices(self, size: int) -> np.ndarray:
        """Next ``size`` rows of an epoch-wise shuffled pass over the train set."""
        n = len(self.data.train)
        if size >= n:
            return self.rng.permutation(n)
        out = []
        need = size
        while need:
            if self._cursor >= self._perm.size:
                self._perm = self.rng.permutation(n)
                self._cursor = 0
            take = self._perm[self._cursor:self._cursor + need]
            self._cursor += take.size
            need -= take.size
            out.append(take)
        return out[0] if len(out) == 1 else np.concatenate(out)

    def next_batch(self, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.next_batch_indices(size)
        return self.data.train.inputs[idx], self.data.train.labels[idx]


@dataclass
class ServerState:
    w: ParamVector
    round: int = 0
    cum_comm_bits: int = 0
    history: list = field(default_factory=list)


def _check(ok: bool, what: str, hint: str):
    if not ok:
        raise DivergenceError(f"non-finite {what}; step too large, reduce {hint}")


def theta_objective(spec: ModelSpec, theta: np.ndarray, w_local: np.ndarray, x, y, hp: HyperParams) -> float:
    """Batch personalized objective ``l(theta; D) + gamma*phi_rho(theta) - lam*<theta, w_local>``."""
    loss, _ = loss_grad_array(spec, theta, x, y)
    return loss + hp.gamma * phi_rho(theta, SmoothL1Config(hp.rho)) - hp.lam * float(theta @ w_local)


def theta_grad(spec: ModelSpec, theta: np.ndarray, w_local: np.ndarray, x, y, hp: HyperParams) -> np.ndarray:
    """Full gradient of :func:`theta_objective` with respect to ``theta``."""
    _, g = loss_grad_array(spec, theta, x, y)
    if hp.gamma != 0.0:
        g += hp.gamma * kernels.tanh_scaled(theta, hp.rho)
    if hp.lam != 0.0:
        g -= hp.lam * w_local
    return g


def w_objective(w: np.ndarray, theta_tilde: np.ndarray, hp: HyperParams) -> float:
    """Local global-model objective ``-lam*<theta, w> + lam/2*||w||^2 + gamma_w*phi_rho(w)``."""
    return -hp.lam * float(theta_tilde @ w) + 0.5 * hp.lam * float(w @ w) + hp.gamma_w * phi_rho(w, SmoothL1Config(hp.rho))


def w_grad(w: np.ndarray, theta_tilde: np.ndarray, hp: HyperParams) -> np.ndarray:
    return hp.lam * (w - theta_tilde) + hp.gamma_w * kernels.tanh_scaled(w, hp.rho)


def _theta_steps(spec: ModelSpec, theta: np.ndarray, w_local: np.ndarray, x, y, hp: HyperParams):
    """In-place SGD on ``l(theta; D) + gamma*phi_rho(theta) - lam*<theta, w_local>`` over one batch."""
    grad = np.empty_like(theta)
    if hp.nu > 0.0:
        for _ in range(hp.nu_max_iters):
            g = theta_grad(spec, theta, w_local, x, y, hp)
            if float(g @ g) <= hp.nu:
                return
            theta -= hp.eta_p * g
            _check(bool(np.isfinite(theta).all()), "personalized model", "eta_p")
        return
    for _ in range(hp.inner_steps):
        loss_grad_array(spec, theta, x, y, grad)
        _check(kernels.theta_step(theta, grad, w_local, hp.eta_p, hp.gamma, hp.lam, hp.rho),
               "personalized model", "eta_p")


def theta_step_fedmac(theta: ParamVector, w_local: ParamVector, batch: Batch, hp: HyperParams) -> ParamVector:
    """Personalized-model update on one mini-batch; returns a new vector."""
    if theta.spec != w_local.spec:
        raise ValueError("theta and w_local have different model specs")
    out = theta.values.copy()
    _theta_steps(theta.spec, out, w_local.values, batch.inputs, batch.labels, hp)
    return ParamVector(out, theta.spec)


def w_step_fedmac(w_local: ParamVector, theta_tilde: ParamVector, hp: HyperParams) -> ParamVector:
    """``w <- w - eta*[lam*(w - theta_tilde) + gamma_w*tanh(w/rho)]``; returns a new vector."""
    if theta_tilde.spec != w_local.spec:
        raise ValueError("theta_tilde and w_local have different model specs")
    out = w_local.values.copy()
    _check(kernels.w_step(out, theta_tilde.values, hp.eta, hp.lam, hp.gamma_w, hp.rho),
           "local global model", "eta")
    return ParamVector(out, w_local.spec)


def _local_sgd(spec, client: ClientState, w0: np.ndarray, hp: HyperParams, mu: float) -> np.ndarray:
    # FedAvg is exactly the mu == 0 case: the proximal term is skipped, not multiplied by zero
    x_loc = w0.copy()
    grad = np.empty_like(x_loc)
    for _ in range(hp.R):
        x, y = client.next_batch(hp.batch_size)
        loss_grad_array(spec, x_loc, x, y, grad)
        _check(kernels.prox_step(x_loc, grad, w0, hp.eta_p, hp.gamma, mu, hp.rho), "local model", "eta_p")
    return x_loc


def _pfedme(spec, client: ClientState, w0: np.ndarray, hp: HyperParams, st: Strategy):
    theta = w0.copy()
    w = w0.copy()
    grad = np.empty_like(w)
    for _ in range(hp.R):
        x, y = client.next_batch(hp.batch_size)
        for _ in range(st.K):
            loss_grad_array(spec, theta, x, y, grad)
            _check(kernels.prox_step(theta, grad, w, hp.eta_p, hp.gamma, st.lam, hp.rho),
                   "personalized model", "eta_p")
        _check(kernels.w_step(w, theta, hp.eta, st.lam, 0.0, hp.rho), "local model", "eta")
    return theta, w


def _perfedavg_adapt(spec, w: np.ndarray, x, y, alpha: float, hp: HyperParams) -> np.ndarray:
    tmp = w.copy()
    _, grad = loss_grad_array(spec, tmp, x, y)
    _check(kernels.prox_step(tmp, grad, w, alpha, hp.gamma, 0.0, hp.rho), "adapted model", "alpha")
    return tmp


def _perfedavg(spec, client: ClientState, w0: np.ndarray, hp: HyperParams, st: Strategy):
    alpha = hp.eta_p if st.alpha is None else st.alpha
    beta = hp.eta_p if st.beta_ml is None else st.beta_ml
    w = w0.copy()
    for _ in range(hp.R):
        x1, y1 = client.next_batch(hp.batch_size)
        x2, y2 = client.next_batch(hp.batch_size)
        tmp = _perfedavg_adapt(spec, w, x1, y1, alpha, hp)
        # first-order meta-gradient: gradient of the augmented loss at the adapted point
        _, grad = loss_grad_array(spec, tmp, x2, y2)
        if hp.gamma != 0.0:
            grad += hp.gamma * kernels.tanh_scaled(tmp, hp.rho)
        _check(kernels.prox_step(w, grad, w, beta, 0.0, 0.0, hp.rho), "local model", "beta_ml")
    return w


def client_update(client: ClientState, w_global: ParamVector, hp: HyperParams, strategy: Strategy) -> ParamVector:
    """Run R local rounds from ``w_global``; returns the upload and stores the personalized model.

    After the call ``client.theta`` holds the personalized model (``None``
    for FedAvg/FedProx) and ``client.w_local`` the uploaded vector.
    """
    spec = w_global.spec
    w0 = w_global.values
    kind = strategy.kind
    theta = None
    if kind is StrategyKind.FEDMAC:
        theta = w0.copy()
        w = w0.copy()
        for _ in range(hp.R):
            x, y = client.next_batch(hp.batch_size)
            _theta_steps(spec, theta, w, x, y, hp)
            _check(kernels.w_step(w, theta, hp.eta, hp.lam, hp.gamma_w, hp.rho), "local global model", "eta")
    elif kind is StrategyKind.FEDAVG:
        if strategy.mu != 0.0:
            raise ValueError("FedAvg takes no proximal weight; use FedProx")
        w = _local_sgd(spec, client, w0, hp, 0.0)
    elif kind is StrategyKind.FEDPROX:
        w = _local_sgd(spec, client, w0, hp, strategy.mu)
    elif kind is StrategyKind.PFEDME:
        theta, w = _pfedme(spec, client, w0, hp, strategy)
    elif kind is StrategyKind.PERFEDAVG:
        w = _perfedavg(spec, client, w0, hp, strategy)
    else:  # pragma: no cover
        raise ValueError(f"unknown strategy {kind}")
    client.theta = None if theta is None else ParamVector(theta, spec)
    client.w_local = ParamVector(w, spec)
    return client.w_local


def aggregate(w_prev: ParamVector, uploads: list[ParamVector], hp: HyperParams) -> ParamVector:
    """``(1 - beta) * w_prev + beta * mean(uploads)``, summed in the given (ascending client) order.

    The mean is accumulated as ``u_0 + sum_k (u_k - u_0) / S`` so identical
    uploads come back exactly.
    """
    if not uploads:
        raise ValueError("aggregate needs at least one upload")
    for u in uploads:
        if u.spec != w_prev.spec:
            raise ValueError("upload model spec differs from the global model")
    base = uploads[0].values
    acc = np.zeros_like(base)
    for u in uploads[1:]:
        acc += u.values - base
    mean = base + acc / len(uploads)
    if hp.beta == 1.0:
        out = mean
    else:
        out = (1.0 - hp.beta) * w_prev.values + hp.beta * mean
    return ParamVector(out, w_prev.spec)


def sample_clients(n_clients: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``S`` distinct client indices, sorted ascending."""
    if not 1 <= S <= n_clients:
        raise ValueError(f"S={S} must lie in [1, {n_clients}]")
    if S == n_clients:
        return np.arange(n_clients)
    return np.sort(rng.choice(n_clients, size=S, replace=False))


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def make_clients(data: FederatedDataset, seed: int) -> list[ClientState]:
    return [ClientState(i, c, stream(seed, 2, i)) for i, c in enumerate(data.clients)]


def personalized_models(clients: list[ClientState], w: ParamVector, hp: HyperParams, strategy: Strategy,
                        seed: int, round: int, pm_mode: str = "last") -> list[ParamVector] | None:
    """Models evaluated as "PM" for each client, or ``None`` when the strategy has none.

    ``pm_mode="last"`` uses the personalized model left by the latest local
    training (the global model before any training). ``"fresh"`` takes one
    personalized step from the current global model on a train batch. Per-FedAvg
    always adapts once from the global model.
    """
    if not strategy.has_personal_model:
        return None
    spec = w.spec
    out = []
    for c in clients:
        if strategy.kind is StrategyKind.PERFEDAVG or pm_mode == "fresh":
            ev = stream(seed, 3, round, c.index)
            n = len(c.train)
            idx = ev.permutation(n)[:min(hp.batch_size, n)]
            x, y = c.train.inputs[idx], c.train.labels[idx]
            if strategy.kind is StrategyKind.PERFEDAVG:
                alpha = hp.eta_p if strategy.alpha is None else strategy.alpha
                out.append(ParamVector(_perfedavg_adapt(spec, w.values, x, y, alpha, hp), spec))
            elif strategy.kind is StrategyKind.PFEDME:
                theta = w.values.copy()
                _, grad = loss_grad_array(spec, theta, x, y)
                _check(kernels.prox_step(theta, grad, w.values, hp.eta_p, hp.gamma, strategy.lam, hp.rho),
                       "personalized model", "eta_p")
                out.append(ParamVector(theta, spec))
            else:
                theta = w.values.copy()
                _theta_steps(spec, theta, w.values, x, y, hp)
                out.append(ParamVector(theta, spec))
        elif c.theta is None:
            out.append(w)
        else:
            out.append(c.theta)
    return out


def run_experiment(data: FederatedDataset, spec: ModelSpec, hp: HyperParams, strategy: Strategy, seed: int,
                   *, comm: CommCostModel = CommCostModel(), zero_tol: float = DEFAULT_ZERO_TOL,
                   weighted: bool = False, pm_mode: str = "last", callback=None) -> list:
    """Run ``hp.T`` rounds and return the per-round metrics history (round 0 included).

    Every round, all clients train (or only the sampled ones when
    ``hp.compute_only_sampled``); the server aggregates the uploads of the
    ``S`` sampled clients in ascending index order. Upload bits are counted
    for sampled clients only.
    """
    from .metrics import eval_round, upload_bits

    if pm_mode not in ("last", "fresh"):
        raise ValueError(f"pm_mode must be 'last' or 'fresh', got {pm_mode!r}")
    if hp.S > data.n_clients:
        raise ValueError(f"S={hp.S} exceeds the {data.n_clients} clients")
    if data.input_dim != spec.input_dim or data.num_classes != spec.num_classes:
        raise ValueError("dataset dimensions do not match the model spec")
    server = ServerState(init_params(spec, stream(seed, 0)))
    clients = make_clients(data, seed)
    server.cum_comm_bits = upload_bits([server.w], comm, zero_tol)

    def record():
        pms = personalized_models(clients, server.w, hp, strategy, seed, server.round, pm_mode)
        rec = eval_round(server, clients, comm, zero_tol, pms=pms, weighted=weighted)
        server.history.append(rec)
        if callback is not None:
            callback(rec)

    record()
    for t in range(1, hp.T + 1):
        sampled = sample_clients(data.n_clients, hp.S, stream(seed, 1, t))
        chosen = set(sampled.tolist())
        uploads = {}
        try:
            for c in clients:
                if hp.compute_only_sampled and c.index not in chosen:
                    continue
                up = client_update(c, server.w, hp, strategy)
                if c.index in chosen:
                    uploads[c.index] = up
            server.w = aggregate(server.w, [uploads[i] for i in sampled], hp)
            if not np.isfinite(server.w.values).all():
                raise DivergenceError("non-finite global model; reduce eta, eta_p or beta")
        except DivergenceError as err:
            raise DivergenceError(err.detail, round=t, strategy=strategy.name) from None
        server.round = t
        server.cum_comm_bits += upload_bits([uploads[i] for i in sampled], comm, zero_tol)
        record()
    return server.history
