"""Linear sparse recovery with side information.

Compares two priors for ``min ||y - X theta||^2 + gamma * f(theta)``:

* ``F1_MaxCorr``: ``f1(theta) = ||theta||_1 - zeta * <theta, w>``
* ``F2_L2Dist``: ``f2(theta) = ||theta||_1 + zeta/2 * ||theta - w||^2``

Provides instance generation, a proximal-gradient solver, the v_zeta scalars
that govern the measurement bounds, a Monte-Carlo Gaussian squared distance
to ``gamma * subdiff f(theta*)``, and phase-transition sweeps.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

BOUNDARY_TOL = 1e-12
DEFAULT_ZETA_GRID = tuple(np.geomspace(1e-3, 10.0, 13).tolist())


class PriorKind(str, enum.Enum):
    F1_MAXCORR = "F1_MaxCorr"
    F2_L2DIST = "F2_L2Dist"


@dataclass(frozen=True)
class PriorConfig:
    """Prior choice and weights. ``gamma=None`` means ``0.1 / sqrt(N_D)``."""

    kind: PriorKind
    gamma: float | None = None
    zeta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PriorKind(self.kind))
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.zeta >= 0:
            raise ValueError("zeta must be nonnegative")

    def gamma_for(self, n_d: int) -> float:
        return 0.1 / math.sqrt(n_d) if self.gamma is None else self.gamma


@dataclass(frozen=True)
class SideModel:
    """How the side information relates to the true signal.

    ``exact``: ``w = theta*``. ``noisy``: ``theta*`` plus N(0, sigma_w^2) on the
    support. ``shifted_support``: ``theta*`` with ``k`` support entries moved to
    off-support positions.
    """

    kind: str = "exact"
    sigma_w: float = 0.0
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("exact", "noisy", "shifted_support"):
            raise ValueError(f"unknown side model {self.kind!r}")
        if self.sigma_w < 0 or self.k < 0:
            raise ValueError("sigma_w and k must be nonnegative")


@dataclass
class RecoveryInstance:
    X: np.ndarray
    y: np.ndarray
    theta_star: np.ndarray
    w_side: np.ndarray
    s: int
    seed: int

    @property
    def n_i(self) -> int:
        return self.X.shape[1]

    @property
    def n_d(self) -> int:
        return self.X.shape[0]


def _stream(seed, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def gen_signal(n_i: int, s: int, side: SideModel, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(theta*, w)``: ``s`` nonzeros at uniform positions with values +-U(0.5, 1.5)."""
    if not 0 <= s <= n_i:
        raise ValueError("need 0 <= s <= N_I")
    rng = _stream(seed, 0)
    theta = np.zeros(n_i)
    support = np.sort(rng.choice(n_i, size=s, replace=False))
    theta[support] = rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.5, 1.5, size=s)
    srng = _stream(seed, 1)
    w = theta.copy()
    if side.kind == "noisy":
        w[support] += side.sigma_w * srng.standard_normal(s)
    elif side.kind == "shifted_support":
        if side.k > min(s, n_i - s):
            raise ValueError("cannot move more support entries than exist (or than free slots)")
        moved = np.sort(srng.choice(support, size=side.k, replace=False))
        free = np.setdiff1d(np.arange(n_i), support)
        dest = np.sort(srng.choice(free, size=side.k, replace=False))
        w[dest] = theta[moved]
        w[moved] = 0.0
    return theta, w


def gen_design(n_d: int, n_i: int, seed: int) -> np.ndarray:
    """Standard normal design; rows are drawn in order so smaller ``N_D`` is a row prefix."""
    if n_d < 1:
        raise ValueError("N_D must be >= 1")
    return _stream(seed, 2).standard_normal((n_d, n_i))


def gen_instance(n_i: int, n_d: int, s: int, side_model: SideModel = SideModel(), seed: int = 0) -> RecoveryInstance:
    theta, w = gen_signal(n_i, s, side_model, seed)
    X = gen_design(n_d, n_i, seed)
    return RecoveryInstance(X, X @ theta, theta, w, s, seed)


# ---------------------------------------------------------------- solver


def objective(inst: RecoveryInstance, cfg: PriorConfig, theta: np.ndarray) -> float:
    gamma = cfg.gamma_for(inst.n_d)
    r = inst.y - inst.X @ theta
    f = float(np.abs(theta).sum())
    if cfg.kind is PriorKind.F1_MAXCORR:
        f -= cfg.zeta * float(theta @ inst.w_side)
    else:
        d = theta - inst.w_side
        f += 0.5 * cfg.zeta * float(d @ d)
    return float(r @ r) + gamma * f


def lipschitz(X: np.ndarray, cfg: PriorConfig, gamma: float) -> float:
    """Lipschitz constant of the smooth part's gradient."""
    sig = np.linalg.norm(X, 2)
    extra = gamma * cfg.zeta if cfg.kind is PriorKind.F2_L2DIST else 0.0
    return 2.0 * sig * sig + extra


@dataclass
class PriorSolution:
    theta_hat: np.ndarray
    objective: float
    iterations: int
    objective_trace: list[float] = field(default_factory=list)


def _smooth_grad(X, y, w, theta, gamma, cfg, out):
    np.dot(X.T, X @ theta - y, out=out)
    out *= 2.0
    # zeta == 0 skips the side term entirely so both priors reduce to the same arithmetic
    if cfg.zeta != 0.0:
        if cfg.kind is PriorKind.F1_MAXCORR:
            out -= (gamma * cfg.zeta) * w
        else:
            out += (gamma * cfg.zeta) * (theta - w)
    return out


def solve_prior(inst: RecoveryInstance, cfg: PriorConfig, iters: int = 5000, step: float | None = None,
                tol: float = 0.0, trace: bool = False) -> PriorSolution:
    """Proximal gradient (ISTA) with soft-threshold at ``gamma * step``.

    ``step`` defaults to ``1 / L`` with ``L = 2 sigma_max(X)^2 (+ gamma*zeta
    for f2)``, which never exceeds ``1 / (2 sigma_max^2)``. Stops early once
    ``||theta_{k+1} - theta_k|| <= tol * ||theta_{k+1}||``.
    """
    gamma = cfg.gamma_for(inst.n_d)
    if step is None:
        step = 1.0 / lipschitz(inst.X, cfg, gamma)
    if not step > 0:
        raise ValueError("step must be positive")
    X, y, w = inst.X, inst.y, inst.w_side
    theta = np.zeros(inst.n_i)
    grad = np.empty_like(theta)
    prev = np.empty_like(theta)
    tr = [objective(inst, cfg, theta)] if trace else []
    k = 0
    for k in range(1, iters + 1):
        prev[:] = theta
        _smooth_grad(X, y, w, theta, gamma, cfg, grad)
        if not kernels.ista_step(theta, grad, step, gamma * step):
            raise FloatingPointError(f"non-finite iterate at iteration {k}")
        if trace:
            tr.append(objective(inst, cfg, theta))
        if tol > 0:
            d = theta - prev
            if math.sqrt(float(d @ d)) <= tol * math.sqrt(float(theta @ theta)):
                break
    return PriorSolution(theta, objective(inst, cfg, theta), k, tr)


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _batch_penalty(th, w, cfg):
    f = np.abs(th).sum(axis=1)
    if cfg.zeta != 0.0:
        if cfg.kind is PriorKind.F1_MAXCORR:
            f = f - cfg.zeta * np.einsum("bi,bi->b", th, w)
        else:
            d = th - w
            f = f + 0.5 * cfg.zeta * np.einsum("bi,bi->b", d, d)
    return f


def _bmv(A, v):
    return np.matmul(A, v[:, :, None])[:, :, 0]


def solve_batch(X: np.ndarray, y: np.ndarray, w: np.ndarray, cfg: PriorConfig, gamma: float,
                iters: int = 5000, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Monotone FISTA on a stack of problems ``X[b], y[b], w[b]``.

    Returns ``(theta_hat, converged, iterations)``. Each problem keeps the
    better of the new proximal point and its previous iterate, so objectives
    never increase. A problem stops once its proximal-gradient step is no
    longer than ``tol * ||theta||``. Non-finite iterates give ``nan`` rows.
    """
    B, _, n = X.shape
    L = 2.0 * np.linalg.svd(X, compute_uv=False)[:, 0] ** 2
    if cfg.kind is PriorKind.F2_L2DIST:
        L = L + gamma * cfg.zeta
    step = (1.0 / L)[:, None]
    Xt = np.ascontiguousarray(np.transpose(X, (0, 2, 1)))
    gz = gamma * cfg.zeta

    x = np.zeros((B, n))
    z = np.zeros((B, n))
    Xx = np.zeros_like(y)
    Xz = np.zeros_like(y)
    fx = np.einsum("bi,bi->b", y, y) + gamma * _batch_penalty(x, w, cfg)
    t = 1.0
    active = np.arange(B)
    done = np.zeros(B, dtype=bool)
    used = np.full(B, iters, dtype=np.int64)
    for k in range(1, iters + 1):
        xa, za, wa, ya = x[active], z[active], w[active], y[active]
        g = 2.0 * _bmv(Xt[active], Xz[active] - ya)
        if cfg.zeta != 0.0:
            if cfg.kind is PriorKind.F1_MAXCORR:
                g -= gz * wa
            else:
                g += gz * (za - wa)
        sa = step[active]
        u = _soft(za - sa * g, gamma * sa)
        Xu = _bmv(X[active], u)
        r = ya - Xu
        fu = np.einsum("bi,bi->b", r, r) + gamma * _batch_penalty(u, wa, cfg)
        better = fu <= fx[active]
        xn = np.where(better[:, None], u, xa)
        Xxa = Xx[active]
        Xxn = np.where(better[:, None], Xu, Xxa)
        fx[active] = np.where(better, fu, fx[active])
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        c1, c2 = t / t_next, (t - 1.0) / t_next
        x[active] = xn
        Xx[active] = Xxn
        z[active] = xn + c1 * (u - xn) + c2 * (xn - xa)
        Xz[active] = Xxn + c1 * (Xu - Xxn) + c2 * (Xxn - Xxa)
        t = t_next
        fin = np.isfinite(u).all(axis=1)
        gm = np.sqrt(((u - za) ** 2).sum(axis=1))
        stop = (gm <= tol * np.sqrt((xn * xn).sum(axis=1))) | ~fin
        if stop.any():
            done[active[stop & fin]] = True
            used[active[stop]] = k
            x[active[~fin]] = np.nan
            active = active[~stop]
            if active.size == 0:
                break
    return x, done, used


# ---------------------------------------------------------------- v_zeta and squared distances


@dataclass(frozen=True)
class IndexSets:
    """``I`` support, ``J`` disagreement, ``K_ne`` off-support large side entries, ``K_eq`` boundary."""

    I: np.ndarray
    J: np.ndarray
    K_ne: np.ndarray
    K_eq: np.ndarray
    q: int


def index_sets(theta_star, w_side, zeta: float) -> IndexSets:
    """Sets entering v_zeta. Boundary entries (``||w_i| - 1/zeta| < 1e-12``) are merged into ``K_ne``."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    w_side = np.asarray(w_side, dtype=np.float64)
    if theta_star.shape != w_side.shape:
        raise ValueError("theta_star and w_side must have the same shape")
    I = np.flatnonzero(theta_star != 0)
    J = np.flatnonzero(theta_star != w_side)
    q = int(np.union1d(I, J).size)
    if zeta <= 0:
        empty = np.empty(0, dtype=np.int64)
        return IndexSets(I, J, empty, empty, q)
    off = np.setdiff1d(J, I)
    aw = np.abs(w_side[off])
    inv = 1.0 / zeta
    K = off[(aw > inv) | (np.abs(aw - inv) < BOUNDARY_TOL)]
    return IndexSets(I, J, K, np.empty(0, dtype=np.int64), q)


def _v_zeta(theta_star, w_side, zeta, on_support) -> float:
    if zeta < 0:
        raise ValueError("zeta must be nonnegative")
    theta_star = np.asarray(theta_star, dtype=np.float64)
    w_side = np.asarray(w_side, dtype=np.float64)
    sets = index_sets(theta_star, w_side, zeta)
    terms = on_support(np.sign(theta_star[sets.I]), theta_star[sets.I], w_side[sets.I]) ** 2
    tail = (zeta * np.abs(w_side[sets.K_ne]) - 1.0) ** 2
    return math.fsum(terms) + math.fsum(tail)


def v_zeta1(theta_star, w_side, zeta1: float) -> float:
    """``sum_I (sign(theta*_i) - zeta1 w_i)^2 + sum_{K_ne} (zeta1 |w_i| - 1)^2``."""
    if zeta1 == 0:
        return _v_zeta(theta_star, w_side, 0.0, lambda sg, th, w: sg)
    return _v_zeta(theta_star, w_side, zeta1, lambda sg, th, w: sg - zeta1 * w)


def v_zeta2(theta_star, w_side, zeta2: float) -> float:
    """``sum_I (sign(theta*_i) + zeta2 (theta*_i - w_i))^2 + sum_{K_ne} (zeta2 |w_i| - 1)^2``."""
    if zeta2 == 0:
        return _v_zeta(theta_star, w_side, 0.0, lambda sg, th, w: sg)
    return _v_zeta(theta_star, w_side, zeta2, lambda sg, th, w: sg + zeta2 * (th - w))


def subdiff_box(theta_star, w_side, prior: PriorConfig, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate interval ``[lo, hi]`` of ``gamma * subdiff f(theta*)`` (points on the support)."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    w_side = np.asarray(w_side, dtype=np.float64)
    if prior.kind is PriorKind.F1_MAXCORR:
        shift = -prior.zeta * w_side
    else:
        shift = prior.zeta * (theta_star - w_side)
    on = theta_star != 0
    lo = np.where(on, np.sign(theta_star), -1.0) + shift
    hi = np.where(on, np.sign(theta_star), 1.0) + shift
    return np.ascontiguousarray(gamma * lo), np.ascontiguousarray(gamma * hi)


def eta_sq_mc(theta_star, w_side, prior: PriorConfig, n_samples: int, seed: int,
              gamma: float | None = None) -> tuple[float, float]:
    """Monte-Carlo ``E dist(g, gamma * subdiff f(theta*))^2`` for ``g ~ N(0, I)``.

    The set is a box (degenerate on the support), so each sample's distance is
    a per-coordinate closed form. Returns ``(mean, standard error)``. ``gamma``
    overrides ``prior.gamma`` (which must otherwise be set).
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    g_scale = prior.gamma if gamma is None else gamma
    if g_scale is None or g_scale < 0:
        raise ValueError("a nonnegative gamma is required")
    lo, hi = subdiff_box(theta_star, w_side, prior, g_scale)
    rng = _stream(seed, 3)
    vals = []
    chunk = max(1, 2_000_000 // max(lo.size, 1))
    left = n_samples
    while left:
        m = min(chunk, left)
        vals.append(kernels.box_sq_dist(rng.standard_normal((m, lo.size)), lo, hi))
        left -= m
    d = np.concatenate(vals)
    return float(d.mean()), float(d.std(ddof=1) / math.sqrt(n_samples))


def eta_sq_min(theta_star, w_side, prior: PriorConfig, gammas, n_samples: int, seed: int) -> tuple[float, float, float]:
    """Smallest Monte-Carlo estimate over ``gammas``: ``(estimate, std_err, gamma)``.

    All grid points share the same Gaussian draws.
    """
    best = None
    for g in gammas:
        est, se = eta_sq_mc(theta_star, w_side, prior, n_samples, seed, gamma=g)
        if best is None or est < best[0]:
            best = (est, se, float(g))
    return best


def w_bar(theta_star, w_side, zeta: float) -> float | None:
    """``|w_k|`` for the off-support disagreement entry closest to ``1/zeta`` (``None`` if there is none)."""
    sets = index_sets(theta_star, w_side, zeta)
    off = np.setdiff1d(sets.J, sets.I)
    if off.size == 0:
        return None
    aw = np.abs(np.asarray(w_side, dtype=np.float64)[off])
    if zeta <= 0:
        return float(aw.max())
    return float(aw[np.argmin(np.abs(aw - 1.0 / zeta))])


def lemma_precondition(theta_star, w_side, zeta: float) -> bool:
    """``(q-s)/(N_I-q) <= |1 - zeta*wbar| * exp(((zeta*wbar)^2 - 2*zeta*wbar) * log(N_I/q))``.

    With no off-support disagreements the left side is 0 and the condition holds.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    n_i = theta_star.size
    sets = index_sets(theta_star, w_side, zeta)
    s, q = sets.I.size, sets.q
    if q >= n_i:
        return False
    lhs = (q - s) / (n_i - q)
    wb = w_bar(theta_star, w_side, zeta)
    if wb is None:
        return True
    zw = zeta * wb
    rhs = abs(1.0 - zw) * math.exp((zw * zw - 2.0 * zw) * math.log(n_i / q))
    return lhs <= rhs


def lemma_bound(theta_star, w_side, prior: PriorConfig) -> float:
    """``2 v log(N_I/q) + s + |K_ne| + |K_eq|/2 + 0.8 q`` for the prior's ``v_zeta``."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    sets = index_sets(theta_star, w_side, prior.zeta)
    if sets.q == 0:
        raise ValueError("bound undefined for theta* = w = 0")
    vf = v_zeta1 if prior.kind is PriorKind.F1_MAXCORR else v_zeta2
    v = vf(theta_star, w_side, prior.zeta)
    return (2.0 * v * math.log(theta_star.size / sets.q) + sets.I.size + sets.K_ne.size
            + 0.5 * sets.K_eq.size + 0.8 * sets.q)


# ---------------------------------------------------------------- phase transitions


@dataclass
class SweepRow:
    prior: str
    zeta: float
    n_d: int
    success_rate: float
    mean_error: float
    v_zeta: float
    eta_sq_estimate: float


@dataclass
class PhaseResult:
    threshold: int | None
    rows: list[SweepRow]


class TrialBank:
    """Shared-seed trials: trial ``j`` has a fixed signal and a row-nested design."""

    def __init__(self, n_i: int, s: int, side: SideModel, trials: int, max_n_d: int, seed: int):
        seeds = np.random.SeedSequence(seed).generate_state(trials)
        sig = [gen_signal(n_i, s, side, int(sd)) for sd in seeds]
        self.theta = np.stack([t for t, _ in sig])
        self.w = np.stack([w for _, w in sig])
        self.X = np.stack([gen_design(max_n_d, n_i, int(sd)) for sd in seeds])
        self.seeds = seeds

    def run(self, prior: PriorConfig, n_d: int, success_tol: float, iters: int, tol: float):
        X = np.ascontiguousarray(self.X[:, :n_d, :])
        y = np.einsum("bij,bj->bi", X, self.theta)
        theta_hat, _, self.last_iters = solve_batch(X, y, self.w, prior, prior.gamma_for(n_d), iters=iters, tol=tol)
        err = np.linalg.norm(theta_hat - self.theta, axis=1)
        ref = np.linalg.norm(self.theta, axis=1)
        rel = np.where(np.isfinite(err), err / np.where(ref > 0, ref, 1.0), np.inf)
        ok = np.where(ref > 0, err <= success_tol * ref, err == 0.0)
        return float(ok.mean()), float(np.mean(np.minimum(rel, 1e300)))


def _summaries(bank: TrialBank, prior: PriorConfig, n_d: int, mc_samples: int, seed: int):
    vf = v_zeta1 if prior.kind is PriorKind.F1_MAXCORR else v_zeta2
    v = float(np.mean([vf(t, w, prior.zeta) for t, w in zip(bank.theta, bank.w)]))
    if mc_samples <= 0:
        return v, float("nan")
    est, _ = eta_sq_mc(bank.theta[0], bank.w[0], prior, mc_samples, seed, gamma=prior.gamma_for(n_d))
    return v, est


def phase_transition(N_I: int, s: int, side_model: SideModel, prior: PriorConfig, N_D_grid, trials: int,
                     success_tol: float = 1e-2, seed: int = 0, *, iters: int = 4000, tol: float = 1e-7,
                     stop_at_first: bool = True, mc_samples: int = 0, bank: TrialBank | None = None) -> PhaseResult:
    """Smallest grid ``N_D`` whose success rate is at least 0.5 (``None`` if no grid point reaches it).

    Success means ``||theta_hat - theta*|| <= success_tol * ||theta*||``. The
    grid is scanned in ascending order over shared-seed trials (same signals,
    nested designs), stopping at the first success unless ``stop_at_first``
    is false.
    """
    grid = [int(n) for n in N_D_grid]
    if not grid:
        raise ValueError("empty N_D grid")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
        raise ValueError("N_D grid must be positive and strictly ascending")
    if trials < 10:
        raise ValueError("trials must be >= 10")
    if bank is None:
        bank = TrialBank(N_I, s, side_model, trials, grid[-1], seed)
    rows, threshold = [], None
    for n_d in grid:
        rate, err = bank.run(prior, n_d, success_tol, iters, tol)
        v, eta = _summaries(bank, prior, n_d, mc_samples, seed)
        rows.append(SweepRow(prior.kind.value, prior.zeta, n_d, rate, err, v, eta))
        if rate >= 0.5 and threshold is None:
            threshold = n_d
            if stop_at_first:
                break
    return PhaseResult(threshold, rows)


@dataclass
class OptimalZetaResult:
    prior: str
    threshold: int | None
    zeta: float | None
    rows: list[SweepRow]


def best_zeta_threshold(N_I: int, s: int, side_model: SideModel, kind: PriorKind, zeta_grid, N_D_grid,
                        trials: int, success_tol: float = 1e-2, seed: int = 0, *, gamma: float | None = None,
                        iters: int = 4000, tol: float = 1e-7, mc_samples: int = 0) -> OptimalZetaResult:
    """Per-prior optimal ``zeta``: the grid value with the smallest phase-transition ``N_D``.

    The first ``zeta`` is scanned in ascending ``N_D``. Each later ``zeta`` is
    probed just below the best threshold so far and walks down while trials
    keep succeeding, which relies on success being monotone in ``N_D`` under
    the shared-seed coupling. Ties keep the earlier ``zeta``.
    """
    grid = [int(n) for n in N_D_grid]
    if not grid:
        raise ValueError("empty N_D grid")
    bank = TrialBank(N_I, s, side_model, trials, grid[-1], seed)
    best_i, best_z, rows = None, None, []

    def probe(prior, i):
        rate, err = bank.run(prior, grid[i], success_tol, iters, tol)
        v, eta = _summaries(bank, prior, grid[i], mc_samples, seed)
        rows.append(SweepRow(prior.kind.value, prior.zeta, grid[i], rate, err, v, eta))
        return rate >= 0.5

    for z in zeta_grid:
        prior = PriorConfig(kind, gamma, float(z))
        if best_i is None:
            for i in range(len(grid)):
                if probe(prior, i):
                    best_i, best_z = i, float(z)
                    break
            continue
        i = best_i - 1
        while i >= 0 and probe(prior, i):
            best_i, best_z = i, float(z)
            i -= 1
    threshold = None if best_i is None else grid[best_i]
    return OptimalZetaResult(PriorKind(kind).value, threshold, best_z, rows)
