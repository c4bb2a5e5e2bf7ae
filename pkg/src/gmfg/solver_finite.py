"""Backward-recursive equilibrium computation for finite horizons.

At every time ``t`` (from ``T`` down to 1) and every node of the mean-field
grid, the stage prescription solves a fixed point: each (group, state) row
maximizes ``R + delta * E[V_{t+1}(phi(mu, gamma), X')]`` where the next
population state ``phi(mu, gamma)`` is driven by the solution itself.  The
stage value ``V_t`` is then the expectation of the same objective under the
solution.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import root

from .dynamics import state_action_flow
from .grid import MeanFieldGrid
from .model import DEFAULT_TIE_TOL, aggregate, kernel, rewards


class FixedPointError(RuntimeError):
    """No restart reached the stage fixed point within ``max_iters``."""

    def __init__(self, message, residual=None, last_iterate=None, point=None, t=None):
        super().__init__(message)
        self.residual = residual
        self.last_iterate = last_iterate
        self.point = point
        self.t = t


@dataclass(frozen=True)
class FixedPointConfig:
    max_iters: int = 500
    tol: float = 1e-8
    damping: float = 0.5
    tie_tolerance: float = DEFAULT_TIE_TOL
    restarts: int = 4
    seed: int = 0
    purify: bool = True
    dedupe_tol: float = 1e-6
    threads: int = 1
    lookup: str = "resolve"
    enumerate_pure: int = 64
    polish: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1 or self.restarts < 1:
            raise ValueError("max_iters and restarts must be positive")
        if self.lookup not in ("resolve", "interpolate"):
            raise ValueError("lookup must be 'resolve' or 'interpolate'")

    def to_dict(self):
        return asdict(self)


@dataclass
class StageProblem:
    """Quantities at a batch of population states that do not depend on the prescription."""

    model: object
    structure: object
    mu: np.ndarray  # (P, K, N_x)
    Q: np.ndarray  # (P, K, N_x, N_a, N_x)
    R: np.ndarray  # (P, K, N_x, N_a)
    continuation: object

    @classmethod
    def build(cls, model, structure, mu, continuation=None):
        mu = np.asarray(mu, dtype=float)
        drive = aggregate(model, structure, mu)
        return cls(model, structure, mu, kernel(model, structure, mu, drive), rewards(model, structure, mu, drive), continuation)

    def subset(self, idx):
        return StageProblem(self.model, self.structure, self.mu[idx], self.Q[idx], self.R[idx], self.continuation)

    def next_state(self, gamma):
        nxt = state_action_flow(self.mu, gamma, self.Q)
        return nxt / nxt.sum(-1, keepdims=True)

    def qvalues(self, gamma):
        """Objective of every pure action given that the population plays ``gamma``."""
        if self.continuation is None or self.model.discount == 0:
            return self.R.copy()
        W = self.continuation(self.next_state(gamma))
        return self.R + self.model.discount * np.einsum("...kxay,...ky->...kxa", self.Q, W)


def stage_qvalues(model, structure, mu, gamma, continuation=None):
    """``R(x, a, mu) + delta * sum_y Q(y|x,a,mu) V_next(phi(mu, gamma), y)`` for every (k, x, a)."""
    return StageProblem.build(model, structure, mu, continuation).qvalues(np.asarray(gamma, dtype=float))


def best_response(qv, tie_tol=DEFAULT_TIE_TOL):
    """Pure argmax with the lowest action index among near-ties."""
    best = qv.max(-1, keepdims=True)
    first = np.argmax(qv >= best - tie_tol, axis=-1)
    return np.eye(qv.shape[-1])[first]


def deviation_gain(gamma, qv):
    """Largest improvement any (group, state) row gets by switching to a pure best action."""
    g = qv.max(-1) - (gamma * qv).sum(-1)
    return g.reshape(g.shape[0], -1).max(-1) if g.ndim > 2 else g.max()


def argmax_ties(qv, tie_tol=DEFAULT_TIE_TOL):
    """Boolean ``(..., K, N_x)``: more than one action within ``tie_tol`` of the max."""
    if qv.shape[-1] < 2:
        return np.zeros(qv.shape[:-1], dtype=bool)
    s = np.sort(qv, axis=-1)
    return s[..., -1] - s[..., -2] <= tie_tol


@dataclass
class StageResult:
    gamma: np.ndarray  # (P, K, N_x, N_a)
    qvalues: np.ndarray
    value: np.ndarray  # (P, K, N_x)
    residual: np.ndarray  # (P,)
    iterations: np.ndarray  # (P,)
    n_distinct: np.ndarray  # (P,)
    ties: np.ndarray  # (P, K, N_x) bool

    @property
    def multiple(self):
        return self.n_distinct > 1


def _initial_prescriptions(shape, cfg, rng_key, init):
    starts = []
    if init is not None:
        starts.append(np.broadcast_to(np.asarray(init, dtype=float), shape).copy())
    starts.append(np.full(shape, 1.0 / shape[-1]))
    rng = np.random.default_rng([cfg.seed, rng_key])
    for _ in range(cfg.restarts - 1):
        starts.append(rng.dirichlet(np.ones(shape[-1]), size=shape[:-1]))
    return starts


def _iterate(prob: StageProblem, gamma, cfg: FixedPointConfig):
    """Damped best-response from one batch of starting prescriptions.

    The step size of a point is halved whenever its pure best response
    changes, which lets the iteration settle on mixed fixed points.
    """
    B = gamma.shape[0]
    gamma = gamma.copy()
    lam = np.full(B, cfg.damping)
    residual = np.full(B, np.inf)
    iterations = np.zeros(B, dtype=int)
    switches = np.zeros(B, dtype=int)
    done = np.zeros(B, dtype=bool)
    prev_br = None
    for it in range(1, cfg.max_iters + 1):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        sub = prob.subset(act)
        g = gamma[act]
        qv = sub.qvalues(g)
        gain = deviation_gain(g, qv)
        br = best_response(qv, cfg.tie_tolerance)
        residual[act] = gain
        iterations[act] = it
        conv = gain <= cfg.tol
        if cfg.purify:
            cand = ~conv
            if np.any(cand):
                c = np.flatnonzero(cand)
                gain_br = deviation_gain(br[c], sub.subset(c).qvalues(br[c]))
                ok = gain_br <= cfg.tol
                gamma[act[c[ok]]] = br[c[ok]]
                residual[act[c[ok]]] = gain_br[ok]
                conv[c[ok]] = True
        done[act[conv]] = True
        move = ~conv
        if prev_br is not None:
            changed = np.any(br != prev_br[act], axis=(1, 2, 3)) & move
            lam[act[changed]] *= 0.5
            switches[act[changed]] += 1
        full_br = np.zeros_like(gamma) if prev_br is None else prev_br
        full_br[act] = br
        prev_br = full_br
        m = act[move]
        step = lam[m][:, None, None, None]
        gamma[m] = (1.0 - step) * gamma[m] + step * br[move]
    return gamma, residual, iterations, done, switches


def pure_prescriptions(K, n_states, n_actions, limit):
    """Every pure prescription ``(n, K, N_x, N_a)`` if there are at most ``limit`` of them, else None."""
    rows = K * n_states
    if n_actions**rows > limit:
        return None
    choice = np.indices((n_actions,) * rows).reshape(rows, -1).T
    return np.eye(n_actions)[choice].reshape(-1, K, n_states, n_actions)


def _check_pure(prob: StageProblem, pure, cfg):
    """Pure candidates need no iteration: each is a fixed point iff its own deviation gain is within tol."""
    P = prob.mu.shape[0]
    n = len(pure)
    rep = prob.subset(np.tile(np.arange(P), n))
    gamma = np.repeat(pure, P, axis=0)
    residual = deviation_gain(gamma, rep.qvalues(gamma))
    ones = np.ones(n * P, dtype=int)
    return gamma, residual, ones, residual <= cfg.tol, 0 * ones


def _polish(prob: StageProblem, gamma0, cfg: FixedPointConfig, support_tol=1e-3, tries=6):
    """Newton polish of a stalled iterate at one point.

    Best-response dynamics can chatter around a mixed fixed point.  With the
    support fixed, the fixed point solves a square system (each row sums to
    one, supported actions are indifferent), handed to MINPACK.  The support
    is then corrected (negative weights dropped, profitable deviations added)
    and the solve repeated.  Returns ``(gamma, residual)``; ``gamma`` is None on failure.
    """
    g = gamma0.copy()
    supp = g > support_tol
    gain = np.inf
    for _ in range(tries):
        rows = [(k, x, np.flatnonzero(supp[k, x])) for k in range(g.shape[0]) for x in range(g.shape[1])]

        def build(z):
            out = np.zeros_like(g)
            out[supp] = z
            return out

        def feasible(gm):
            gm = np.clip(gm, 0.0, None)
            return gm / np.maximum(gm.sum(-1, keepdims=True), 1e-300)

        def F(z):
            gm = build(z)
            qv = prob.qvalues(feasible(gm)[None])[0]
            res = list(gm.sum(-1).ravel() - 1.0)
            for k, x, acts in rows:
                res.extend(qv[k, x, acts[1:]] - qv[k, x, acts[0]])
            return np.array(res)

        sol = root(F, g[supp], method="hybr", options={"xtol": 1e-14})
        gm = feasible(build(sol.x))
        qv = prob.qvalues(gm[None])[0]
        gain = float(deviation_gain(gm[None], qv[None])[0])
        if gain <= cfg.tol and sol.x.min() > -1e-9:
            return gm, gain
        new = supp.copy()
        new[supp] = sol.x > 1e-12
        best = qv >= qv.max(-1, keepdims=True)
        new |= best & (qv.max(-1, keepdims=True) - (gm * qv).sum(-1, keepdims=True) > cfg.tol)
        empty = ~new.any(-1)
        new[empty, np.argmax(qv[empty], -1)] = True
        g = np.where(new, np.maximum(gm, support_tol), 0.0)
        g /= g.sum(-1, keepdims=True)
        supp = new
    return None, gain


def _solve_chunk(prob: StageProblem, starts, cfg: FixedPointConfig, point_offset=0, pure=None):
    S = len(starts)
    P = prob.mu.shape[0]
    rep = prob.subset(np.tile(np.arange(P), S))
    parts = [_iterate(rep, np.concatenate(starts, axis=0), cfg)]
    if pure is not None:
        parts.append(_check_pure(prob, pure, cfg))
        S += len(pure)
        rep = prob.subset(np.tile(np.arange(P), S))
    gamma, residual, iterations, done, switches = (np.concatenate(a) for a in zip(*parts))
    shape = (S, P)
    gamma = gamma.reshape((S, P) + gamma.shape[1:])
    residual, iterations, done, switches = (a.reshape(shape) for a in (residual, iterations, done, switches))

    for p in np.flatnonzero(~done.any(axis=0)) if cfg.polish else ():
        point = prob.subset([p])
        for s_ in np.argsort(residual[:, p], kind="stable"):
            gm, res = _polish(point, gamma[s_, p], cfg)
            if gm is not None:
                gamma[s_, p], residual[s_, p], done[s_, p] = gm, res, True
                break

    if not np.all(done.any(axis=0)):
        p = int(np.flatnonzero(~done.any(axis=0))[0])
        s = int(np.argmin(residual[:, p]))
        cyc = f"; best response switched {switches[s, p]} times (oscillation)" if switches[s, p] > 2 else ""
        raise FixedPointError(
            f"stage fixed point not reached at grid point {p + point_offset}: best residual {residual[s, p]:.3g} "
            f"after {cfg.max_iters} iterations over {S} candidates{cyc}",
            residual=float(residual[s, p]),
            last_iterate=gamma[s, p],
            point=p + point_offset,
        )

    qv = rep.qvalues(gamma.reshape((S * P,) + gamma.shape[2:])).reshape(gamma.shape)
    value = (gamma * qv).sum(-1)  # (S, P, K, N_x)
    weights = prob.structure.weights
    score = np.einsum("spkx,k->sp", value, weights)
    score = np.where(done, score, -np.inf)
    choice = np.argmax(score, axis=0)  # first maximum: deterministic
    cols = np.arange(P)
    # count genuinely different converged solutions
    n_distinct = np.zeros(P, dtype=int)
    reps = []
    for s in range(S):
        new = done[s].copy()
        for r in reps:
            same = np.max(np.abs(gamma[s] - gamma[r]), axis=(1, 2, 3)) <= cfg.dedupe_tol
            new &= ~(same & done[r])
        n_distinct += new
        reps.append(s)
    sel_q = qv[choice, cols]
    return StageResult(
        gamma=gamma[choice, cols],
        qvalues=sel_q,
        value=value[choice, cols],
        residual=residual[choice, cols],
        iterations=iterations.max(axis=0),
        n_distinct=n_distinct,
        ties=argmax_ties(sel_q, cfg.tie_tolerance),
    )


def stage_fixed_point(model, structure, mu, continuation=None, cfg: FixedPointConfig | None = None, init=None, rng_key=0):
    """Solve the stage fixed point at one state ``(K, N_x)`` or a batch ``(P, K, N_x)``.

    ``continuation`` maps next states ``(..., K, N_x)`` to values ``(..., K, N_x)``;
    ``None`` means a zero continuation (myopic stage).  Restarts are the
    optional ``init``, the uniform prescription and ``restarts - 1`` random
    prescriptions; when there are at most ``cfg.enumerate_pure`` pure
    prescriptions each is also checked directly.  Points where every
    candidate stalls get a Newton polish on the support-indifference system
    (``cfg.polish``) before failure is declared.  Among converged distinct
    solutions the one with the highest class-weighted value is kept.
    """
    cfg = cfg or FixedPointConfig()
    mu = np.asarray(mu, dtype=float)
    single = mu.ndim == 2
    if single:
        mu = mu[None]
        if init is not None:
            init = np.asarray(init)[None]
    prob = StageProblem.build(model, structure, mu, continuation)
    P = mu.shape[0]
    shape = (P, structure.K, model.n_states, model.n_actions)
    starts = _initial_prescriptions(shape, cfg, rng_key, init)
    pure = pure_prescriptions(structure.K, model.n_states, model.n_actions, cfg.enumerate_pure)
    if cfg.threads > 1 and P > 1:
        chunks = np.array_split(np.arange(P), min(cfg.threads, P))
        with ThreadPoolExecutor(cfg.threads) as ex:
            parts = list(ex.map(lambda c: _solve_chunk(prob.subset(c), [s[c] for s in starts], cfg, int(c[0]), pure), chunks))
        res = StageResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in StageResult.__dataclass_fields__))
    else:
        res = _solve_chunk(prob, starts, cfg, pure=pure)
    if single:
        res = StageResult(*(getattr(res, f)[0] for f in StageResult.__dataclass_fields__))
    return res


def value_bound(reward_bound, discount, steps):
    """Sup bound on a ``steps``-period discounted reward-to-go."""
    if discount == 1:
        return steps * reward_bound
    return reward_bound * (1 - discount**steps) / (1 - discount)


@dataclass
class PolicyTable:
    """Equilibrium-generating function and reward-to-go on the mean-field grid.

    ``gammas[t - 1]`` holds the prescriptions at decision time ``t`` and
    ``values[t - 1]`` the value ``V_t``; ``values[T]`` is the terminal value.
    """

    model: object
    structure: object
    grid: MeanFieldGrid
    cfg: FixedPointConfig
    gammas: np.ndarray  # (T, P, K, N_x, N_a)
    values: np.ndarray  # (T + 1, P, K, N_x)
    diagnostics: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.gammas.shape[0]

    @property
    def infinite(self) -> bool:
        return False

    def value(self, t, mu):
        return self.grid.interpolate(self.values[t - 1], mu)

    def continuation(self, t):
        """Interpolated ``V_{t+1}`` as a function of the next population state."""
        table = self.values[t]
        return lambda m: self.grid.interpolate(table, m)

    def prescription(self, t, mu):
        if not 1 <= t <= self.horizon:
            raise ValueError(f"decision time {t} outside 1..{self.horizon}")
        mu = np.asarray(mu, dtype=float)
        node = self.grid.node_index(mu)
        if node is not None:
            return self.gammas[t - 1, node]
        if self.cfg.lookup == "interpolate":
            return self.grid.interpolate(self.gammas[t - 1], mu)
        return stage_fixed_point(self.model, self.structure, mu, self.continuation(t), self.cfg, rng_key=t).gamma


def solve_finite(model, structure, mf_grid: MeanFieldGrid | None = None, cfg: FixedPointConfig | None = None,
                 horizon=None, terminal_value=None) -> PolicyTable:
    """Backward recursion from ``V_{T+1}`` (zero unless ``terminal_value`` is given) down to ``t = 1``."""
    cfg = cfg or FixedPointConfig()
    T = horizon if horizon is not None else model.horizon
    if T is None:
        raise ValueError("solve_finite needs a finite horizon")
    mf_grid = mf_grid or MeanFieldGrid.for_model(model, structure)
    nodes = mf_grid.nodes
    P, K, nx, na = nodes.shape[0], structure.K, model.n_states, model.n_actions
    gammas = np.empty((T, P, K, nx, na))
    values = np.empty((T + 1, P, K, nx))
    values[T] = 0.0 if terminal_value is None else np.asarray(terminal_value, dtype=float)
    per_stage = []
    ties = []
    for t in range(T, 0, -1):
        table = values[t]
        cont = None if (terminal_value is None and t == T) else (lambda m, table=table: mf_grid.interpolate(table, m))
        try:
            res = stage_fixed_point(model, structure, nodes, cont, cfg, rng_key=t)
        except FixedPointError as exc:
            exc.t = t
            raise FixedPointError(f"t={t}: {exc}", exc.residual, exc.last_iterate, exc.point, t) from exc
        gammas[t - 1] = res.gamma
        values[t - 1] = res.value
        per_stage.append({
            "t": t,
            "max_residual": float(res.residual.max()),
            "max_iterations": int(res.iterations.max()),
            "multiple_equilibria_points": int(res.multiple.sum()),
            "tie_points": int(res.ties.any(axis=(1, 2)).sum()),
        })
        for p, k, x in np.argwhere(res.ties):
            ties.append({"t": t, "node": int(p), "class": int(k), "state": int(x)})
    per_stage.reverse()
    diag = {
        "stages": per_stage,
        "max_residual": max(s["max_residual"] for s in per_stage),
        "max_iterations": max(s["max_iterations"] for s in per_stage),
        "multiple_equilibria_points": sum(s["multiple_equilibria_points"] for s in per_stage),
        "a5_ties": ties,
    }
    return PolicyTable(model, structure, mf_grid, cfg, gammas, values, diag)
