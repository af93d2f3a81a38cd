"""Toy denoiser, dual-encoder reward model, Adam, and checkpoint files."""

from __future__ import annotations

import functools
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels

CHECKPOINT_FORMAT = "steptune-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@functools.lru_cache(maxsize=32)
def _freqs(half):
    f = np.exp(-math.log(1000.0) * np.arange(half) / max(half, 1))
    f.setflags(write=False)
    return f


def time_embedding(t, dim, batch):
    """Sinusoidal embedding of integer timesteps, shape (batch, dim)."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    half = dim // 2
    freqs = _freqs(half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((batch, dim - emb.shape[1]))], axis=1)
    return emb


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Ordered collection of named parameter leaves."""

    kind = "module"

    def __init__(self):
        self.params = {}

    def _add(self, name, data):
        self.params[name] = ad.parameter(data, name=name)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def requires_grad_(self, flag=True):
        for p in self.params.values():
            p.requires_grad = bool(flag)
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, arr in state.items():
            p = self.params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr

    def flat(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def flat_grad(self):
        return np.concatenate([p.grad.ravel() for p in self.params.values()])

    def set_flat(self, vec):
        i = 0
        for p in self.params.values():
            n = p.size
            p.data[...] = vec[i:i + n].reshape(p.shape)
            i += n

    def config(self):
        raise NotImplementedError

    def clone(self):
        """Fresh parameters on the current tape with identical values."""
        other = type(self)(**self.config())
        other.load_state_dict(self.state_dict())
        return other


class Denoiser(Module):
    """Noise predictor: (motion, sinusoidal t, condition embedding) -> noise.

    Two tanh hidden layers; output has the motion's shape.
    """

    kind = "denoiser"

    def __init__(self, motion_dim, n_conditions, hidden=128, time_dim=16, cond_dim=8, seed=0):
        super().__init__()
        for name, v in dict(motion_dim=motion_dim, n_conditions=n_conditions, hidden=hidden,
                            time_dim=time_dim, cond_dim=cond_dim).items():
            if int(v) < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        self.motion_dim = int(motion_dim)
        self.n_conditions = int(n_conditions)
        self.hidden = int(hidden)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        fan = self.motion_dim + self.time_dim + self.cond_dim
        self._add("cond_table", rng.uniform(-1.0, 1.0, size=(self.n_conditions, self.cond_dim)))
        self._add("W1", _uniform(rng, fan, (self.hidden, fan)))
        self._add("b1", _uniform(rng, fan, (self.hidden,)))
        self._add("W2", _uniform(rng, self.hidden, (self.hidden, self.hidden)))
        self._add("b2", _uniform(rng, self.hidden, (self.hidden,)))
        self._add("W3", _uniform(rng, self.hidden, (self.motion_dim, self.hidden)))
        self._add("b3", _uniform(rng, self.hidden, (self.motion_dim,)))

    def config(self):
        return dict(motion_dim=self.motion_dim, n_conditions=self.n_conditions, hidden=self.hidden,
                    time_dim=self.time_dim, cond_dim=self.cond_dim, seed=self.seed)

    def __call__(self, x, t, c):
        x = x if isinstance(x, ad.Value) else ad.Value(x)
        if x.data.ndim != 2 or x.shape[1] != self.motion_dim:
            raise ad.ShapeError(f"denoiser expects (B, {self.motion_dim}), got {x.shape}")
        c = _check_conditions(c, x.shape[0], self.n_conditions)
        p = self.params
        temb = time_embedding(t, self.time_dim, x.shape[0])
        h = ad.concat([x, ad.Value(temb), ad.take_rows(p["cond_table"], c)], axis=1)
        h = ad.dense(h, p["W1"], p["b1"], "tanh")
        h = ad.dense(h, p["W2"], p["b2"], "tanh")
        return ad.dense(h, p["W3"], p["b3"], None)


def _check_conditions(c, batch, n_conditions):
    c = np.broadcast_to(np.asarray(c), (batch,))
    if not np.issubdtype(c.dtype, np.integer):
        raise ValueError("condition ids must be integers")
    if c.size and (c.min() < 0 or c.max() >= n_conditions):
        raise ValueError(f"unknown condition id (valid range 0..{n_conditions - 1})")
    return c


class RewardModel(Module):
    """Dual encoder scoring ``tau * <E_M(x, t), E_T(c)>`` with unit embeddings.

    ``E_M`` is a tanh MLP over (motion, time embedding); ``E_T`` is a learned
    table indexed by condition id. Both embeddings are L2-normalised, so the
    reward lies in ``[-tau, tau]``; ``tau = exp(log_tau)``.
    """

    kind = "reward"

    def __init__(self, motion_dim, n_conditions, hidden=64, embed_dim=16, time_dim=16,
                 log_tau=0.0, seed=0):
        super().__init__()
        for name, v in dict(motion_dim=motion_dim, n_conditions=n_conditions, hidden=hidden,
                            embed_dim=embed_dim, time_dim=time_dim).items():
            if int(v) < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        self.motion_dim = int(motion_dim)
        self.n_conditions = int(n_conditions)
        self.hidden = int(hidden)
        self.embed_dim = int(embed_dim)
        self.time_dim = int(time_dim)
        self.seed = int(seed)
        self._init_log_tau = float(log_tau)
        rng = np.random.default_rng(seed)
        fan = self.motion_dim + self.time_dim
        self._add("W1", _uniform(rng, fan, (self.hidden, fan)))
        self._add("b1", _uniform(rng, fan, (self.hidden,)))
        self._add("W2", _uniform(rng, self.hidden, (self.hidden, self.hidden)))
        self._add("b2", _uniform(rng, self.hidden, (self.hidden,)))
        self._add("W3", _uniform(rng, self.hidden, (self.embed_dim, self.hidden)))
        self._add("b3", _uniform(rng, self.hidden, (self.embed_dim,)))
        self._add("cond_table", rng.standard_normal((self.n_conditions, self.embed_dim)))
        self._add("log_tau", np.array(self._init_log_tau))

    def config(self):
        return dict(motion_dim=self.motion_dim, n_conditions=self.n_conditions, hidden=self.hidden,
                    embed_dim=self.embed_dim, time_dim=self.time_dim, log_tau=self._init_log_tau,
                    seed=self.seed)

    @property
    def tau(self):
        return float(np.exp(self.params["log_tau"].data))

    def motion_embed(self, x, t=0):
        x = x if isinstance(x, ad.Value) else ad.Value(x)
        if x.data.ndim != 2 or x.shape[1] != self.motion_dim:
            raise ad.ShapeError(f"motion encoder expects (B, {self.motion_dim}), got {x.shape}")
        p = self.params
        temb = time_embedding(t, self.time_dim, x.shape[0])
        h = ad.concat([x, ad.Value(temb)], axis=1)
        h = ad.dense(h, p["W1"], p["b1"], "tanh")
        h = ad.dense(h, p["W2"], p["b2"], "tanh")
        return ad.l2_normalize(ad.dense(h, p["W3"], p["b3"], None), axis=1)

    def text_embed(self, c):
        c = np.atleast_1d(np.asarray(c))
        c = _check_conditions(c, c.shape[0], self.n_conditions)
        return ad.l2_normalize(ad.take_rows(self.params["cond_table"], c), axis=1)

    def temperature(self):
        return ad.exp(self.params["log_tau"])

    def __call__(self, x, t, c):
        """Per-sample rewards, shape (B,)."""
        em = self.motion_embed(x, t)
        c = _check_conditions(c, em.shape[0], self.n_conditions)
        et = self.text_embed(c)
        return ad.mul(ad.dot(em, et), self.temperature())

    def score_matrix(self, X, conds, t=0):
        """Rewards of every motion against every condition: (n_motions, n_conds)."""
        with ad.no_grad():
            em = self.motion_embed(np.asarray(X, dtype=np.float64), t).data
            et = self.text_embed(np.asarray(conds)).data
        return self.tau * (em @ et.T)


def reward(x, t, c, model, mode="noise_aware", denoiser=None, schedule=None):
    """Reward of a (possibly noisy) state ``x`` at timestep ``t``.

    ``noise_aware`` scores ``x`` directly with time conditioning; ``one_step``
    scores the one-step clean prediction from ``x`` at time 0 and needs the
    denoiser and schedule.
    """
    if mode == "noise_aware":
        return model(x, t, c)
    if mode == "one_step":
        if denoiser is None or schedule is None:
            raise ValueError("one_step reward needs a denoiser and a schedule")
        if int(t) == 0:
            return model(x, 0, c)
        from .diffusion import one_step_predict

        return model(one_step_predict(x, int(t), c, denoiser, schedule), 0, c)
    raise ValueError(f"unknown reward mode {mode!r}")


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class LRSchedule:
    """``constant``: lr0 at every step. ``inverse``: lr0 / (k + 1) at step k."""

    kind: str = "constant"
    lr0: float = 1e-3

    def __post_init__(self):
        if self.kind not in ("constant", "inverse"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.lr0 < 0:
            raise ValueError("learning rate must be non-negative")

    def __call__(self, k):
        if self.kind == "constant":
            return self.lr0
        return self.lr0 / (k + 1)


@dataclass
class Adam:
    """Bias-corrected Adam over a list of parameter Values.

    ``step`` updates ``targets`` (default: the parameters' own data) so the
    chain variant can apply gradients taken at one point to a working copy.
    """

    params: list
    schedule: LRSchedule = field(default_factory=LRSchedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0

    def __post_init__(self):
        self.params = list(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self):
        return self.schedule(self.step_count)

    def step(self, grads=None, targets=None, lr=None):
        """Apply one update. Returns False (and changes nothing) on non-finite grads."""
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        if not all(kernels.all_finite(g) for g in grads):
            self.skipped += 1
            return False
        targets = [p.data for p in self.params] if targets is None else list(targets)
        lr = self.current_lr() if lr is None else float(lr)
        k = self.step_count + 1
        c1 = 1.0 - self.beta1 ** k
        c2 = 1.0 - self.beta2 ** k
        for g, m, v, tgt in zip(grads, self.m, self.v, targets):
            kernels.adam_update(g, m, v, tgt, lr, self.beta1, self.beta2, c1, c2, self.eps)
        self.step_count += 1
        return True


def optimizer_step(params, grads, state):
    """Functional wrapper: apply ``state`` (an :class:`Adam`) to ``params``."""
    ok = state.step(grads=grads, targets=[p.data for p in params])
    return params, ok


# ---------------------------------------------------------------------------
# checkpoints

_KINDS = {"denoiser": Denoiser, "reward": RewardModel}


def save_checkpoint(path, model, extra=None):
    """Write a versioned ``.npz``: one f64 array per parameter plus a JSON header."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": model.config(),
        "params": [[k, list(v.shape)] for k, v in model.named_parameters()],
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.data for k, v in model.named_parameters()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k[len("param/"):]: z[k].astype(np.float64) for k in z.files if k.startswith("param/")}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    for name, shape in meta["params"]:
        if name not in state or list(state[name].shape) != shape:
            raise CheckpointError(f"{path}: parameter {name} does not match its declared shape {shape}")
    return meta, state


def load_checkpoint(path, expect_kind=None, expect_config=None):
    meta, state = read_checkpoint(path)
    if expect_kind is not None and meta["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {meta['kind']}")
    if meta["kind"] not in _KINDS:
        raise CheckpointError(f"{path}: unknown model kind {meta['kind']!r}")
    if expect_config is not None:
        for key, val in expect_config.items():
            if meta["config"].get(key) != val:
                raise CheckpointError(
                    f"{path}: {key}={meta['config'].get(key)} does not match expected {val}")
    model = _KINDS[meta["kind"]](**meta["config"])
    model.load_state_dict(state)
    return model, meta
