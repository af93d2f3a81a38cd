"""Reward fine-tuning strategies for the toy denoiser.

Every strategy samples ``x_T ~ N(0, I)`` from the update seed and walks the
same deterministic reverse chain, so trajectories agree value-for-value until
a strategy first changes the parameters. They differ only in where the graph
is cut and how often the optimizer steps:

* ``easytune``: each step sees a detached input; the reward of the step's
  output is back-propagated through that one step and the optimizer steps
  immediately, after which the step's graph is released.
* ``easytune_chain``: the same per-step gradients, taken at the frozen
  parameters and applied to a working copy that is assigned at the end.
* ``full_backprop``: one backward through the whole trajectory.
* ``draft_k``: like full backprop, truncated to the last ``K`` steps.
* ``drtune``: full recurrence, but the denoiser always sees detached inputs.
* ``refl``: reward of the one-step clean prediction at one random step.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import step_from_eps, x0_from_eps
from .models import Adam, LRSchedule

log = logging.getLogger(__name__)

STRATEGIES = ("easytune", "easytune_chain", "full_backprop", "draft_k", "drtune", "refl")
REWARD_MODES = ("noise_aware", "one_step")
WEIGHTINGS = ("uniform", "last_k", "first_k", "linear_increasing", "linear_decreasing")
CSV_COLUMNS = ("iter", "strategy", "t", "reward", "loss", "grad_norm", "retained_nodes",
               "retained_elements", "millis")


@dataclass
class StrategyConfig:
    """Which strategy to run and its knobs.

    ``K`` is the truncation depth for ``draft_k``; with ``random_k`` a depth
    is drawn uniformly from ``1..K`` on every update instead. ``step_fraction``
    below 1 makes easytune visit a random subset of steps (each step kept with
    that probability) rather than every step.
    """

    kind: str = "easytune"
    reward_mode: str = "noise_aware"
    kl_weight: float = 0.0
    step_weighting: str = "uniform"
    weighting_k: int = 20
    K: int | None = None
    random_k: bool = False
    step_fraction: float = 1.0
    stochastic: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "refl":
            self.reward_mode = "one_step"
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        if not self.kl_weight >= 0:
            raise ValueError("kl_weight must be >= 0")
        if self.step_weighting not in WEIGHTINGS:
            raise ValueError(f"unknown step weighting {self.step_weighting!r}")
        if self.weighting_k < 1:
            raise ValueError("weighting k must be >= 1")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ValueError("step_fraction must lie in (0, 1]")
        if self.kind == "draft_k" and self.K is None:
            raise ValueError("draft_k needs K")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.reward_mode == "one_step" and self.stochastic:
            raise ValueError("one_step rewards need the deterministic sampler")

    def validate_for(self, T):
        if self.kind == "draft_k" and not 1 <= self.K <= T:
            raise ValueError(f"draft_k needs 1 <= K <= T, got K={self.K}, T={T}")


def step_weight(t, T, strategy="uniform", k=20):
    """Per-step loss weight ``w_t``.

    ``last_k`` keeps the final (least noisy) ``k`` steps, ``first_k`` the
    initial (noisiest) ``k``. The linear schemes run between 0.5 and 1.5.
    """
    if not 1 <= t <= T:
        raise ValueError(f"timestep out of range 1..{T}: {t}")
    if strategy == "uniform":
        return 1.0
    if strategy == "last_k":
        return 1.0 if t <= k else 0.0
    if strategy == "first_k":
        return 1.0 if t > T - k else 0.0
    if strategy == "linear_increasing":
        return (T - t) / T + 0.5
    if strategy == "linear_decreasing":
        return -(T - t) / T + 1.5
    raise ValueError(f"unknown step weighting {strategy!r}")


class FrozenReference:
    """Read-only snapshot of the denoiser taken before fine-tuning.

    The copy lives on a private tape with gradients disabled, so evaluating
    it never adds nodes to the fine-tuning graph.
    """

    def __init__(self, denoiser):
        with ad.use_tape(ad.Tape()):
            self._model = denoiser.clone()
        self._model.requires_grad_(False)
        for p in self._model.parameters():
            p.data.setflags(write=False)

    def eps(self, x, t, c):
        with ad.no_grad():
            return self._model(x, t, c)

    def state_dict(self):
        return self._model.state_dict()


def kl_augment(loss, x_theta, x_ref, kl_weight):
    """``loss + kl_weight * mean_b ||x_theta - x_ref||^2 / 2``.

    ``x_ref`` is treated as a constant (the frozen reference's prediction).
    """
    if kl_weight < 0:
        raise ValueError("kl_weight must be >= 0")
    if kl_weight == 0:
        return loss
    ref = x_ref.data if isinstance(x_ref, ad.Value) else np.asarray(x_ref, dtype=np.float64)
    diff = ad.sub(x_theta, ad.Value(ref))
    per_row = ad.sum(ad.mul(diff, diff), axis=1)
    return ad.add(loss, ad.scale(ad.mean(per_row), 0.5 * kl_weight))


@dataclass
class UpdateRecord:
    iteration: int
    strategy: str
    step_rewards: list
    loss: float
    grad_norms: dict
    grad_norm: float
    peak: ad.GraphStats
    millis: float
    final_reward: float
    optimizer_steps: int
    flagged: bool = False
    x0: np.ndarray | None = field(default=None, repr=False)


class FineTuner:
    """Holds one fine-tuning run: denoiser, frozen reward, schedule, optimizer.

    The reward model is frozen on construction. ``lr`` may be a float or an
    :class:`LRSchedule`; the schedule is indexed by update iteration, so every
    optimizer step inside one easytune trajectory uses the same rate.
    """

    def __init__(self, denoiser, reward_model, schedule, config, lr=1e-4, batch=16,
                 reference=None):
        self.denoiser = denoiser
        self.reward_model = reward_model
        self.schedule = schedule
        self.config = config
        config.validate_for(schedule.T)
        self.lr_schedule = lr if isinstance(lr, LRSchedule) else LRSchedule("constant", float(lr))
        self.batch = int(batch)
        reward_model.requires_grad_(False)
        self.optimizer = Adam(denoiser.parameters(), self.lr_schedule)
        if config.kl_weight > 0 and reference is None:
            reference = FrozenReference(denoiser)
        self.reference = reference
        self.iteration = 0
        self.tape = ad.get_tape()

    @property
    def lr(self):
        return self.lr_schedule(self.iteration)

    def update(self, c, seed):
        """Run one update of the configured strategy on conditions ``c``."""
        fn = _UPDATES[self.config.kind]
        record = fn(self, np.atleast_1d(np.asarray(c)), seed)
        self.iteration += 1
        return record

    # shared pieces -------------------------------------------------------

    def streams(self, seed, batch):
        """(x_T, per-step noise or None, auxiliary rng) derived from ``seed``.

        x_T and the sampler noise come from separate streams so that a
        strategy's own randomness never shifts the trajectory.
        """
        x_T = np.random.default_rng(seed).standard_normal((batch, self.denoiser.motion_dim))
        noise = None
        if self.config.stochastic:
            nrng = np.random.default_rng([seed, 2])
            noise = {t: nrng.standard_normal(x_T.shape) for t in range(self.schedule.T, 1, -1)}
        aux = np.random.default_rng([seed, 1])
        return x_T, noise, aux

    def noise_term(self, noise, t):
        if noise is None or t not in noise:
            return None
        return ad.Value(np.sqrt(self.schedule.beta[t - 1]) * noise[t])

    def step(self, x_in, t, c, noise=None, eps_input=None):
        """Reverse step from ``x_in``; the denoiser sees ``eps_input`` if given.

        Returns (x_{t-1}, eps_hat).
        """
        eps_hat = self.denoiser(x_in if eps_input is None else eps_input, t, c)
        out = step_from_eps(x_in, eps_hat, t, self.schedule)
        z = self.noise_term(noise, t)
        return (out if z is None else ad.add(out, z)), eps_hat

    def kl_penalty(self, loss, x_out, x_in_data, t, c, noise):
        """Augment ``loss`` with the reference penalty for one step."""
        if self.config.kl_weight == 0:
            return loss
        eps_ref = self.reference.eps(x_in_data, t, c)
        with ad.no_grad():
            ref_out = step_from_eps(ad.Value(x_in_data), eps_ref, t, self.schedule)
            z = self.noise_term(noise, t)
            if z is not None:
                ref_out = ad.add(ref_out, z)
        return kl_augment(loss, x_out, ref_out, self.config.kl_weight)

    def rollout_values(self, x, t_from, t_to, c, noise):
        """Value-only reverse steps from state t_from down to state t_to."""
        with ad.no_grad():
            v = ad.Value(x)
            for t in range(t_from, t_to, -1):
                v, _ = self.step(v, t, c, noise)
        return v.data

    def final_reward(self, x0, c):
        with ad.no_grad():
            return float(np.mean(self.reward_model(x0, 0, c).data))

    def grad_snapshot(self):
        return [p.grad.copy() for p in self.denoiser.parameters()]

    def record(self, kind, step_rewards, loss, grads, t0, x0, c, n_steps, flagged=False):
        names = [n for n, _ in self.denoiser.named_parameters()]
        norms = {n: float(np.linalg.norm(g)) for n, g in zip(names, grads)}
        total = float(np.sqrt(sum(v * v for v in norms.values())))
        millis = (time.perf_counter() - t0) * 1000.0
        rec = UpdateRecord(self.iteration, kind, step_rewards, float(loss), norms, total,
                           self.tape.peak(), millis, self.final_reward(x0, c), n_steps,
                           flagged or not np.isfinite(loss), x0)
        return rec


def _zero_grads(params):
    return [np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# easytune

def easytune_step_loss(tuner, x_t, t, c, noise=None, weight=1.0):
    """Loss of one easytune step from the detached state ``x_t``.

    Returns (loss, x_{t-1} Value, per-sample reward Value). The reward is
    taken on ``x_{t-1}`` at time ``t - 1`` (noise-aware) or on the one-step
    clean prediction from ``x_t`` (one-step).
    """
    cfg = tuner.config
    x_in = ad.stop_gradient(x_t if isinstance(x_t, ad.Value) else ad.Value(x_t))
    x_prev, eps_hat = tuner.step(x_in, t, c, noise)
    if cfg.reward_mode == "noise_aware":
        r = tuner.reward_model(x_prev, t - 1, c)
    else:
        r = tuner.reward_model(x0_from_eps(x_in, eps_hat, t, tuner.schedule), 0, c)
    loss = ad.scale(ad.mean(r), -weight)
    loss = tuner.kl_penalty(loss, x_prev, x_in.data, t, c, noise)
    return loss, x_prev, r


def _visit_plan(tuner, aux):
    cfg = tuner.config
    T = tuner.schedule.T
    plan = {}
    for t in range(T, 0, -1):
        w = step_weight(t, T, cfg.step_weighting, cfg.weighting_k)
        keep = cfg.step_fraction >= 1.0 or aux.random() < cfg.step_fraction
        plan[t] = w if keep else 0.0
    return plan


def _easytune(tuner, c, seed, chain):
    t0 = time.perf_counter()
    tuner.tape.reset_peak()
    kind = "easytune_chain" if chain else "easytune"
    params = tuner.denoiser.parameters()
    x_T, noise, aux = tuner.streams(seed, len(c))
    plan = _visit_plan(tuner, aux)
    working = [p.data.copy() for p in params] if chain else None
    lr = tuner.lr
    x = x_T
    step_rewards, losses = [], []
    grad_sum = _zero_grads(params)
    n_steps = 0
    flagged = False
    for t in range(tuner.schedule.T, 0, -1):
        w = plan[t]
        if w == 0.0:
            x = tuner.rollout_values(x, t, t - 1, c, noise)
            continue
        tuner.denoiser.zero_grad()
        try:
            loss, x_prev, r = easytune_step_loss(tuner, x, t, c, noise, w)
        except ad.NonFiniteError:
            ad.release_graph(tuner.tape)
            flagged = True
            log.warning("non-finite easytune reward at t=%d; step skipped", t)
            x = tuner.rollout_values(x, t, t - 1, c, noise)
            continue
        x = x_prev.data
        lv = float(loss.data)
        ad.backward(loss)
        ad.release_graph(tuner.tape)
        if not np.isfinite(lv):
            flagged = True
            log.warning("non-finite easytune loss at t=%d; step skipped", t)
            continue
        step_rewards.append((t, float(np.mean(r.data))))
        losses.append(lv)
        ok = tuner.optimizer.step(targets=working, lr=lr)
        if not ok:
            flagged = True
            continue
        for acc, p in zip(grad_sum, params):
            acc += p.grad
        n_steps += 1
    if chain:
        for p, wk in zip(params, working):
            p.data[...] = wk
    grads = [g / max(n_steps, 1) for g in grad_sum]
    loss = float(np.mean(losses)) if losses else float("nan")
    return tuner.record(kind, step_rewards, loss, grads, t0, x, c, n_steps, flagged)


def easytune_update(tuner, c, seed):
    return _easytune(tuner, c, seed, chain=False)


def easytune_chain_update(tuner, c, seed):
    return _easytune(tuner, c, seed, chain=True)


# ---------------------------------------------------------------------------
# trajectory-level strategies

def trajectory_loss(tuner, x_T, c, noise=None, detach_from=None, detach_eps=False):
    """Reward loss at the end of a differentiable rollout.

    ``detach_from`` (a timestep) runs the steps above it value-only and cuts
    the graph at the state entering step ``detach_from``; ``detach_eps``
    feeds every denoiser call a detached input while keeping the recurrence
    differentiable. Returns (loss, x_0 Value).
    """
    T = tuner.schedule.T
    start = T if detach_from is None else detach_from
    x = x_T if start == T else tuner.rollout_values(x_T, T, start, c, noise)
    x = ad.Value(x)
    if detach_from is not None:
        x = ad.stop_gradient(x)
    loss = None
    penalties = []
    for t in range(start, 0, -1):
        x_in_data = x.data
        eps_input = ad.stop_gradient(x) if detach_eps else None
        x_next, _ = tuner.step(x, t, c, noise, eps_input)
        if tuner.config.kl_weight > 0:
            penalties.append((x_next, x_in_data, t))
        x = x_next
    loss = ad.neg(ad.mean(tuner.reward_model(x, 0, c)))
    for x_next, x_in_data, t in penalties:
        loss = tuner.kl_penalty(loss, x_next, x_in_data, t, c, noise)
    return loss, x


def _trajectory_update(tuner, c, seed, kind, **kw):
    t0 = time.perf_counter()
    tuner.tape.reset_peak()
    x_T, noise, aux = tuner.streams(seed, len(c))
    if kind == "draft_k":
        K = int(aux.integers(1, tuner.config.K + 1)) if tuner.config.random_k else tuner.config.K
        kw = dict(detach_from=K)
    tuner.denoiser.zero_grad()
    loss, x0 = trajectory_loss(tuner, x_T, c, noise, **kw)
    lv = float(loss.data)
    ad.backward(loss)
    ad.release_graph(tuner.tape)
    flagged = not np.isfinite(lv)
    n = 0
    if not flagged and tuner.optimizer.step(lr=tuner.lr):
        n = 1
    grads = tuner.grad_snapshot()
    return tuner.record(kind, [(0, -lv)], lv, grads, t0, x0.data, c, n, flagged or n == 0)


def full_backprop_update(tuner, c, seed):
    return _trajectory_update(tuner, c, seed, "full_backprop")


def draft_k_update(tuner, c, seed):
    return _trajectory_update(tuner, c, seed, "draft_k")


def drtune_update(tuner, c, seed):
    return _trajectory_update(tuner, c, seed, "drtune", detach_eps=True)


# ---------------------------------------------------------------------------
# refl

def refl_loss(tuner, x_t, t, c):
    """``-mean R(x0_hat(sg(x_t)), 0, c)`` through a single denoiser call."""
    x_in = ad.stop_gradient(ad.Value(x_t))
    eps_hat = tuner.denoiser(x_in, t, c)
    x0_hat = x0_from_eps(x_in, eps_hat, t, tuner.schedule)
    loss = ad.neg(ad.mean(tuner.reward_model(x0_hat, 0, c)))
    if tuner.config.kl_weight > 0:
        x_out = step_from_eps(x_in, eps_hat, t, tuner.schedule)
        loss = tuner.kl_penalty(loss, x_out, x_in.data, t, c, None)
    return loss


def refl_update(tuner, c, seed):
    t0 = time.perf_counter()
    tuner.tape.reset_peak()
    T = tuner.schedule.T
    x_T, noise, aux = tuner.streams(seed, len(c))
    t_star = int(aux.integers(1, T + 1))
    x_t = tuner.rollout_values(x_T, T, t_star, c, noise)
    x0 = tuner.rollout_values(x_t, t_star, 0, c, noise)
    tuner.denoiser.zero_grad()
    loss = refl_loss(tuner, x_t, t_star, c)
    lv = float(loss.data)
    ad.backward(loss)
    ad.release_graph(tuner.tape)
    flagged = not np.isfinite(lv)
    n = 0
    if not flagged and tuner.optimizer.step(lr=tuner.lr):
        n = 1
    return tuner.record("refl", [(t_star, -lv)], lv, tuner.grad_snapshot(), t0, x0, c, n,
                        flagged or n == 0)


_UPDATES = {
    "easytune": easytune_update,
    "easytune_chain": easytune_chain_update,
    "full_backprop": full_backprop_update,
    "draft_k": draft_k_update,
    "drtune": drtune_update,
    "refl": refl_update,
}


# ---------------------------------------------------------------------------
# runs

def held_out_reward(denoiser, reward_model, schedule, conds, seed, stochastic=False):
    """Mean clean-sample reward on a fixed set of conditions and start noise."""
    from .diffusion import sample

    conds = np.asarray(conds)
    x0 = sample(denoiser, conds, schedule, seed=seed, stochastic=stochastic)
    with ad.no_grad():
        return float(np.mean(reward_model(x0, 0, conds).data))


def condition_batches(n_conditions, batch, seed):
    """Infinite stream of uniformly drawn condition batches."""
    rng = np.random.default_rng(seed)
    while True:
        yield rng.integers(0, n_conditions, size=batch)


def run_finetune(tuner, n_updates, seed=0, eval_conds=None, eval_seed=10_000, eval_every=0,
                 writer=None, callback=None):
    """Run ``n_updates`` updates and return (records, eval trace).

    The eval trace holds (update index, cumulative optimizer millis, held-out
    reward); index 0 is the starting model. Update seeds are ``seed * 1_000_003 + i``
    so that every strategy sees the same start noise at the same index.
    """
    records = []
    trace = []
    elapsed = 0.0
    batches = condition_batches(tuner.denoiser.n_conditions, tuner.batch, seed)

    def evaluate(i):
        if eval_conds is not None:
            r = held_out_reward(tuner.denoiser, tuner.reward_model, tuner.schedule, eval_conds,
                                eval_seed, tuner.config.stochastic)
            trace.append((i, elapsed, r))

    evaluate(0)
    for i in range(n_updates):
        rec = tuner.update(next(batches), seed * 1_000_003 + i)
        elapsed += rec.millis
        records.append(rec)
        if writer is not None:
            writer.write(rec)
        if callback is not None:
            callback(rec)
        if eval_every and (i + 1) % eval_every == 0:
            evaluate(i + 1)
    if eval_every == 0 or n_updates % eval_every:
        evaluate(n_updates)
    return records, trace


class RecordWriter:
    """Append-only CSV of update records, one row per logged step reward."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(CSV_COLUMNS)

    def write(self, rec):
        rows = rec.step_rewards or [(0, float("nan"))]
        for t, r in rows:
            self._csv.writerow([rec.iteration, rec.strategy, t, repr(r), repr(rec.loss),
                                repr(rec.grad_norm), rec.peak.retained_nodes,
                                rec.peak.retained_elements, f"{rec.millis:.3f}"])
        # final-sample reward, comparable across strategies
        self._csv.writerow([rec.iteration, rec.strategy, "final", repr(rec.final_reward),
                            repr(rec.loss), repr(rec.grad_norm), rec.peak.retained_nodes,
                            rec.peak.retained_elements, f"{rec.millis:.3f}"])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
