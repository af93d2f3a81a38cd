"""Numerical checks on the fine-tuning analysis.

Dense-Jacobian gradient oracles, Jacobian-norm profiles along a trajectory,
graph-size sweeps over T, and descent traces under a step-size schedule.
Everything here is read-only on the caller's parameters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import make_schedule, reverse_step, step_from_eps
from .finetune import FineTuner, StrategyConfig, easytune_step_loss
from .models import LRSchedule

MAX_ORACLE_STATE = 64
MAX_ORACLE_PARAMS = 50_000


def _dense_jacobians(out, wrt):
    """Jacobians of ``out`` (flattened) w.r.t. each Value in ``wrt``."""
    m = out.size
    mats = [np.zeros((m, w.size)) for w in wrt]
    basis = np.zeros(m)
    for i in range(m):
        basis[i] = 1.0
        gs = ad.grad(out, wrt, basis.reshape(out.shape))
        for M, g in zip(mats, gs):
            M[i] = g.ravel()
        basis[i] = 0.0
    return mats


def _check_oracle_size(state_size, n_params):
    if state_size > MAX_ORACLE_STATE or n_params > MAX_ORACLE_PARAMS:
        raise ValueError(
            f"too large for dense Jacobian assembly (state {state_size} > {MAX_ORACLE_STATE} "
            f"or params {n_params} > {MAX_ORACLE_PARAMS})")


def _step_jacobians(denoiser, x_data, t, c, schedule, tape):
    """(d x_{t-1}/d x_t, [d x_{t-1}/d theta_i]) at state ``x_data``."""
    x = ad.Value(x_data, requires_grad=True)
    out = reverse_step(x, t, c, denoiser, schedule)
    mats = _dense_jacobians(out, [x] + denoiser.parameters())
    ad.release_graph(tape)
    return mats[0], mats[1:], out.data


def _reward_input_grad(reward_model, x0, c, tape):
    """d(-mean R(x0, 0, c)) / d x0, flattened."""
    x = ad.Value(x0, requires_grad=True)
    loss = ad.neg(ad.mean(reward_model(x, 0, c)))
    (g,) = ad.grad(loss, [x])
    ad.release_graph(tape)
    return g.ravel()


@dataclass
class OracleResult:
    gradient: list
    terms: list
    input_jacobians: list = field(repr=False)


def unrolled_gradient_oracle(denoiser, reward_model, c, schedule, x_T, mask=None,
                             recurrence="full"):
    """Gradient of ``-mean R(x_0, 0, c)`` as an explicit sum over steps.

    For each step t the term is ``g0 . (prod_{s<t} A_s) . B_t`` with
    ``A_s = d x_{s-1} / d x_s`` and ``B_t = d x_{t-1} / d theta`` computed as
    dense matrices. ``mask`` (a set of timesteps) zeroes the listed ``A_s``.
    ``recurrence="detached"`` replaces each ``A_s`` with ``I / sqrt(alpha_s)``,
    the recurrence left when every denoiser input is detached.

    Returns per-parameter gradients plus each step's flattened term.
    """
    if recurrence not in ("full", "detached"):
        raise ValueError("recurrence must be 'full' or 'detached'")
    c = np.atleast_1d(np.asarray(c))
    x_T = np.asarray(x_T, dtype=np.float64)
    params = denoiser.parameters()
    _check_oracle_size(x_T.size, sum(p.size for p in params))
    mask = set(mask or ())
    tape = ad.get_tape()
    T = schedule.T
    states = {T: x_T}
    A, B = {}, {}
    for t in range(T, 0, -1):
        if recurrence == "full":
            A[t], B[t], states[t - 1] = _step_jacobians(denoiser, states[t], t, c, schedule, tape)
        else:
            with ad.no_grad():
                x_prev = reverse_step(states[t], t, c, denoiser, schedule).data
            x_in = ad.Value(states[t])
            out = step_from_eps(x_in, denoiser(ad.stop_gradient(x_in), t, c), t, schedule)
            B[t] = _dense_jacobians(out, params)
            ad.release_graph(tape)
            A[t] = np.eye(x_T.size) / np.sqrt(schedule.alpha[t - 1])
            states[t - 1] = x_prev
        if t in mask:
            A[t] = np.zeros_like(A[t])
    v = _reward_input_grad(reward_model, states[0], c, tape)
    total = [np.zeros(p.size) for p in params]
    terms = []
    for t in range(1, T + 1):
        term = [v @ Bi for Bi in B[t]]
        terms.append(np.concatenate(term))
        for acc, tv in zip(total, term):
            acc += tv
        v = v @ A[t]
    grads = [g.reshape(p.shape) for g, p in zip(total, params)]
    return OracleResult(grads, terms, [A[t] for t in range(1, T + 1)])


def single_step_oracle(tuner, x_t, t, c, weight=1.0):
    """EasyTune's step-t gradient as ``(dL/dx_{t-1}) . (d pi(sg(x_t)) / d theta)``.

    Only defined for the noise-aware reward without a KL term.
    """
    if tuner.config.reward_mode != "noise_aware" or tuner.config.kl_weight:
        raise ValueError("single-step oracle needs the plain noise-aware reward")
    c = np.atleast_1d(np.asarray(c))
    tape = ad.get_tape()
    params = tuner.denoiser.parameters()
    _check_oracle_size(np.size(x_t), sum(p.size for p in params))
    x_in = ad.Value(np.asarray(x_t, dtype=np.float64))
    out = reverse_step(x_in, t, c, tuner.denoiser, tuner.schedule)
    B = _dense_jacobians(out, params)
    x_prev = out.data
    ad.release_graph(tape)
    xp = ad.Value(x_prev, requires_grad=True)
    loss = ad.scale(ad.mean(tuner.reward_model(xp, t - 1, c)), -weight)
    (g,) = ad.grad(loss, [xp])
    ad.release_graph(tape)
    g = g.ravel()
    return [(g @ Bi).reshape(p.shape) for Bi, p in zip(B, params)]


def easytune_step_gradient(tuner, x_t, t, c, weight=1.0):
    """Autodiff gradient of one easytune step's loss, without updating."""
    tape = ad.get_tape()
    loss, _, _ = easytune_step_loss(tuner, x_t, t, c, None, weight)
    g = ad.grad(loss, tuner.denoiser.parameters())
    ad.release_graph(tape)
    return g


def easytune_detach_check(tuner, x_T, t, c):
    """Largest |d(step-t loss)/d(earlier state)| with x_t built differentiably.

    The state entering step t is produced by differentiable steps from a
    leaf at x_T; an exact zero shows the step loss has no path back to it.
    """
    c = np.atleast_1d(np.asarray(c))
    tape = ad.get_tape()
    T = tuner.schedule.T
    if not 1 <= t < T:
        raise ValueError("need 1 <= t < T so that earlier steps exist")
    leaf = ad.Value(np.asarray(x_T, dtype=np.float64), requires_grad=True)
    x = leaf
    for s in range(T, t, -1):
        x = reverse_step(x, s, c, tuner.denoiser, tuner.schedule)
    loss, _, _ = easytune_step_loss(tuner, x, t, c)
    (g,) = ad.grad(loss, [leaf])
    ad.release_graph(tape)
    return float(np.max(np.abs(g)))


def trajectory_gradient(tuner, x_T, c, **kw):
    """Autodiff gradient of the trajectory-level loss (see ``trajectory_loss``)."""
    from .finetune import trajectory_loss

    tape = ad.get_tape()
    loss, _ = trajectory_loss(tuner, np.asarray(x_T, dtype=np.float64),
                              np.atleast_1d(np.asarray(c)), **kw)
    g = ad.grad(loss, tuner.denoiser.parameters())
    ad.release_graph(tape)
    return g


def relative_error(a, b):
    """``||a - b|| / max(||a||, ||b||)`` over concatenated arrays."""
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


# ---------------------------------------------------------------------------
# Jacobian profile

@dataclass
class JacobianReport:
    """Per-step input-Jacobian norms along one trajectory.

    ``step_norms[t-1]`` is ``||d x_{t-1} / d x_t||_F / dim`` and
    ``cumulative_norms[t-1]`` is ``||prod_{s=1}^{t} d x_{s-1} / d x_s||_F / dim``,
    the factor that carries the reward gradient from x_0 back to x_t.
    """

    step_norms: np.ndarray
    cumulative_norms: np.ndarray
    iteration: int = 0
    matrices: list = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.step_norms) != len(self.cumulative_norms):
            raise ValueError("step and cumulative norms differ in length")
        if np.any(self.step_norms < 0) or np.any(self.cumulative_norms < 0):
            raise ValueError("norms must be non-negative")

    @property
    def T(self):
        return len(self.step_norms)

    def cumulative(self, t):
        return float(self.cumulative_norms[t - 1])


def profile_from_maps(x_T, steps, iteration=0, keep_matrices=False):
    """Profile an arbitrary chain ``steps[T-1] .. steps[0]``.

    ``steps[t-1](x_value)`` maps the state at t to the state at t-1.
    """
    tape = ad.get_tape()
    x = np.asarray(x_T, dtype=np.float64)
    T = len(steps)
    dim = x.size
    mats = {}
    for t in range(T, 0, -1):
        leaf = ad.Value(x, requires_grad=True)
        out = steps[t - 1](leaf)
        (J,) = _dense_jacobians(out, [leaf])
        ad.release_graph(tape)
        mats[t] = J
        x = out.data
    step_norms = np.array([np.linalg.norm(mats[t]) / dim for t in range(1, T + 1)])
    cum = np.empty(T)
    P = np.eye(dim)
    for t in range(1, T + 1):
        P = P @ mats[t]
        cum[t - 1] = np.linalg.norm(P) / dim
    return JacobianReport(step_norms, cum, iteration,
                          [mats[t] for t in range(1, T + 1)] if keep_matrices else None)


def jacobian_profile(denoiser, c, schedule, seed=0, x_T=None, iteration=0, keep_matrices=False):
    """Profile the reverse chain of ``denoiser`` from seeded start noise."""
    c = np.atleast_1d(np.asarray(c))
    if x_T is None:
        x_T = np.random.default_rng(seed).standard_normal((len(c), denoiser.motion_dim))
    _check_oracle_size(np.size(x_T), 0)
    steps = [(lambda x, t=t: reverse_step(x, t, c, denoiser, schedule))
             for t in range(1, schedule.T + 1)]
    return profile_from_maps(x_T, steps, iteration, keep_matrices)


def write_jacobian_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("iteration", "t", "step_norm", "cumulative_norm"))
        for rep in reports:
            for t in range(1, rep.T + 1):
                w.writerow((rep.iteration, t, repr(float(rep.step_norms[t - 1])),
                            repr(float(rep.cumulative_norms[t - 1]))))


# ---------------------------------------------------------------------------
# memory sweep

def parse_strategy(label):
    """``"draft_k:10"`` -> StrategyConfig(kind="draft_k", K=10); plain names pass through."""
    if isinstance(label, StrategyConfig):
        return label
    kind, _, arg = str(label).partition(":")
    if kind == "draft_k":
        return StrategyConfig(kind="draft_k", K=int(arg) if arg else 1)
    return StrategyConfig(kind=kind)


def _label(cfg):
    return f"draft_k:{cfg.K}" if cfg.kind == "draft_k" else cfg.kind


@dataclass
class MemorySweep:
    rows: list = field(default_factory=list)

    def add(self, T, strategy, nodes, elements):
        if any(r[0] == T and r[1] == strategy for r in self.rows):
            raise ValueError(f"duplicate sweep entry ({T}, {strategy})")
        self.rows.append((int(T), strategy, int(nodes), int(elements)))

    def nodes(self, strategy):
        """{T: peak retained nodes} for one strategy."""
        return {r[0]: r[2] for r in self.rows if r[1] == strategy}

    def elements(self, strategy):
        return {r[0]: r[3] for r in self.rows if r[1] == strategy}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("T", "strategy", "peak_retained_nodes", "peak_retained_elements"))
            w.writerows(self.rows)


def memory_sweep(strategies, T_values, denoiser, reward_model, seed=0, batch=4, c=None):
    """Peak graph size of one update per (strategy, T).

    Each cell runs on its own tape with fresh copies of both models, so the
    caller's parameters are untouched and cells do not share nodes.
    """
    sweep = MemorySweep()
    if c is None:
        c = np.arange(batch) % denoiser.n_conditions
    for label in strategies:
        cfg = parse_strategy(label)
        for T in T_values:
            if cfg.kind == "draft_k" and cfg.K > T:
                continue
            with ad.use_tape(ad.Tape()) as tape:
                den = denoiser.clone()
                rew = reward_model.clone()
                tuner = FineTuner(den, rew, make_schedule(T), cfg, lr=0.0, batch=len(c))
                rec = tuner.update(c, seed)
                sweep.add(T, _label(cfg), rec.peak.retained_nodes, rec.peak.retained_elements)
                tape.release()
    return sweep


def affine_fit(xs, ys):
    """Least-squares ``y = a + b x``; returns (a, b, R^2)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    b, a = np.polyfit(xs, ys, 1)
    pred = a + b * xs
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(a), float(b), r2


# ---------------------------------------------------------------------------
# descent

@dataclass
class DescentTrace:
    etas: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    def append(self, eta, loss, gnorm):
        if not eta >= 0:
            raise ValueError("step size must be non-negative")
        self.etas.append(float(eta))
        self.losses.append(float(loss))
        self.grad_norms.append(float(gnorm))

    def __len__(self):
        return len(self.losses)

    def verdict(self, window=None):
        """(loss check, gradient-norm check) comparing first and last windows.

        The default window is a quarter of the trace. The loss check compares
        window means; the gradient check compares window minima.
        """
        n = len(self)
        if n < 2:
            raise ValueError("trace too short for a verdict")
        w = window or max(n // 4, 1)
        loss = np.asarray(self.losses)
        gn = np.asarray(self.grad_norms)
        loss_ok = bool(loss[-w:].mean() <= loss[:w].mean())
        grad_ok = bool(gn[-w:].min() <= gn[:w].min())
        return loss_ok, grad_ok

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iter", "eta", "loss", "grad_norm"))
            for k, (e, l, g) in enumerate(zip(self.etas, self.losses, self.grad_norms)):
                w.writerow((k, repr(e), repr(l), repr(g)))


def descent_check(tuner, steps, seed=0, window=None):
    """Run ``steps`` updates and trace (eta_k, loss, gradient norm).

    Returns (trace, (loss check, gradient check)). The tuner's own learning
    rate schedule sets ``eta_k``.
    """
    from .finetune import condition_batches

    trace = DescentTrace()
    batches = condition_batches(tuner.denoiser.n_conditions, tuner.batch, seed)
    for i in range(steps):
        eta = tuner.lr
        rec = tuner.update(next(batches), seed * 1_000_003 + i)
        trace.append(eta, rec.loss, rec.grad_norm)
    return trace, trace.verdict(window)


def scalar_descent(eta_schedule, steps, target=3.0, x0=0.0):
    """Plain gradient descent on ``(x - target)^2 / 2``; a convex reference trace."""
    if not isinstance(eta_schedule, LRSchedule):
        eta_schedule = LRSchedule("constant", float(eta_schedule))
    trace = DescentTrace()
    x = ad.parameter(np.array(float(x0)))
    tape = ad.get_tape()
    try:
        for k in range(steps):
            x.zero_grad()
            d = ad.sub(x, ad.Value(target))
            loss = ad.scale(ad.mul(d, d), 0.5)
            ad.backward(loss)
            eta = eta_schedule(k)
            trace.append(eta, float(loss.data), float(abs(x.grad)))
            x.data -= eta * x.grad
            ad.release_graph(tape)
    finally:
        x._persistent = False
        ad.release_graph(tape)
    return trace
