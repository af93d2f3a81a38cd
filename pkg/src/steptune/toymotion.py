"""Synthetic conditioned "motions" and the two pretraining loops.

Each class traces a noisy circle ``r_c (cos(w_c i + phase), sin(w_c i + phase))``
over ``L`` frames, with ``(r_c, w_c)`` on a fixed grid and the phase drawn per
sample. Networks see the flattened ``L * d`` vector, globally standardised
with train-split statistics.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import forward_noise
from .models import Adam, LRSchedule

SPLITS = ("train", "val", "test")
DATASET_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MotionSample:
    frames: np.ndarray
    condition: int
    sample_id: int


@dataclass
class Split:
    X: np.ndarray          # (n, L*d), standardised
    y: np.ndarray          # (n,) condition ids
    ids: np.ndarray        # (n,) unique sample ids

    def __len__(self):
        return len(self.y)


@dataclass
class ToyDataset:
    splits: dict
    mean: np.ndarray       # (d,) per-channel train mean
    std: np.ndarray        # (d,) per-channel train std
    params: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.params["L"]

    @property
    def d(self):
        return self.params["d"]

    @property
    def n_conditions(self):
        return self.params["C"]

    @property
    def motion_dim(self):
        return self.L * self.d

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]

    def standardize(self, frames):
        """(..., L, d) raw frames -> flattened standardised vectors."""
        frames = np.asarray(frames, dtype=np.float64)
        z = (frames - self.mean) / self.std
        return z.reshape(z.shape[:-2] + (self.L * self.d,))

    def destandardize(self, X):
        X = np.asarray(X, dtype=np.float64)
        frames = X.reshape(X.shape[:-1] + (self.L, self.d))
        return frames * self.std + self.mean

    def samples(self, split="train"):
        s = self.splits[split]
        frames = s.X.reshape(-1, self.L, self.d)
        return [MotionSample(frames[i].copy(), int(s.y[i]), int(s.ids[i])) for i in range(len(s))]


def class_grid(C):
    """(radius, angular speed) per class on a fixed grid; pairwise distinct."""
    n_r = 2
    n_w = math.ceil(C / n_r)
    radii = np.linspace(0.6, 1.2, n_r)
    omegas = np.linspace(0.15, 0.6, n_w)
    grid = [(float(r), float(w)) for w in omegas for r in radii]
    return grid[:C]


def class_prototypes(C, L, d, hard_negative=None, hard_negative_gap=0.03):
    """Generator parameters per class, after planting the optional hard negative.

    ``hard_negative=(a, b)`` moves class ``b`` next to class ``a``: same radius,
    angular speed offset by ``hard_negative_gap``.
    """
    grid = class_grid(C)
    if hard_negative is not None:
        a, b = hard_negative
        if a == b or not (0 <= a < C and 0 <= b < C):
            raise ValueError("hard_negative must name two distinct classes")
        r, w = grid[a]
        grid[b] = (r, w + hard_negative_gap)
    return grid


def _trajectory(r, w, phase, L, d, rng, noise_scale):
    i = np.arange(L)
    ang = w * i + phase
    base = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1)
    if d > 2:
        base = np.concatenate([base, np.zeros((L, d - 2))], axis=-1)
    elif d < 2:
        base = base[:, :d]
    return base + noise_scale * rng.standard_normal((L, d))


def generate_dataset(C=8, per_class=256, L=16, d=2, noise_scale=0.05, seed=0,
                     hard_negative=None, hard_negative_gap=0.03):
    """Build a standardised, stratified 80/10/10 dataset (pure function of its args)."""
    if C < 2:
        raise ValueError("need at least 2 classes")
    if per_class < 4:
        raise ValueError("need at least 4 samples per class")
    if L < 1 or d < 1:
        raise ValueError("L and d must be positive")
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    grid = class_prototypes(C, L, d, hard_negative, hard_negative_gap)
    if len(set(grid)) != len(grid):
        raise ValueError("class prototypes are not pairwise distinct")
    rng = np.random.default_rng(seed)
    frames = np.empty((C, per_class, L, d))
    for c, (r, w) in enumerate(grid):
        for k in range(per_class):
            phase = rng.uniform(0.0, 2 * math.pi)
            frames[c, k] = _trajectory(r, w, phase, L, d, rng, noise_scale)
    n_val = max(1, int(round(0.1 * per_class)))
    n_test = max(1, int(round(0.1 * per_class)))
    n_train = per_class - n_val - n_test
    parts = {"train": (0, n_train), "val": (n_train, n_train + n_val),
             "test": (n_train + n_val, per_class)}
    raw = {}
    for name, (lo, hi) in parts.items():
        fr = frames[:, lo:hi].reshape(-1, L, d)
        y = np.repeat(np.arange(C), hi - lo)
        ids = (np.arange(C)[:, None] * per_class + np.arange(lo, hi)[None, :]).reshape(-1)
        raw[name] = (fr, y, ids)
    train_frames = raw["train"][0]
    mean = train_frames.reshape(-1, d).mean(axis=0)
    std = train_frames.reshape(-1, d).std(axis=0)
    std = np.where(std > 0, std, 1.0)
    params = dict(C=C, per_class=per_class, L=L, d=d, noise_scale=noise_scale, seed=seed,
                  hard_negative=list(hard_negative) if hard_negative is not None else None,
                  hard_negative_gap=hard_negative_gap, grid=[list(g) for g in grid])
    ds = ToyDataset({}, mean, std, params)
    for name, (fr, y, ids) in raw.items():
        ds.splits[name] = Split(ds.standardize(fr), y, ids)
    return ds


def nearest_prototype_classify(dataset, X):
    """Classify standardised motions by distance to noiseless class curves,
    minimised over a fine phase grid (independent of any learned model)."""
    L, d, C = dataset.L, dataset.d, dataset.n_conditions
    grid = [tuple(g) for g in dataset.params["grid"]]
    phases = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    X = np.asarray(X)
    best = np.full((X.shape[0], C), np.inf)
    rng = np.random.default_rng(0)
    for c, (r, w) in enumerate(grid):
        curves = np.stack([_trajectory(r, w, ph, L, d, rng, 0.0) for ph in phases])
        Z = dataset.standardize(curves)
        d2 = ((X[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
        best[:, c] = d2.min(axis=1)
    return best.argmin(axis=1)


# ---------------------------------------------------------------------------
# serialisation

def _split_csv(split, L, d):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "class"] + [f"f{i}_{j}" for i in range(L) for j in range(d)])
    for sid, c, row in zip(split.ids, split.y, split.X):
        w.writerow([int(sid), int(c)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def save_dataset(dataset, out_dir):
    """Write ``{train,val,test}.csv`` (sample_id, class, standardised frame
    values f<frame>_<channel>) and ``manifest.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for name in SPLITS:
        with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
            fh.write(_split_csv(dataset.splits[name], dataset.L, dataset.d))
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "generator": dataset.params,
        "standardization": {"mean": [repr(float(v)) for v in dataset.mean],
                            "std": [repr(float(v)) for v in dataset.std]},
        "splits": {name: len(dataset.splits[name]) for name in SPLITS},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"{in_dir}: unsupported dataset format {manifest.get('format_version')}")
    params = manifest["generator"]
    mean = np.array([float(v) for v in manifest["standardization"]["mean"]])
    std = np.array([float(v) for v in manifest["standardization"]["std"]])
    ds = ToyDataset({}, mean, std, params)
    for name in SPLITS:
        with open(os.path.join(in_dir, f"{name}.csv"), newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
        y = np.array([int(r[1]) for r in rows], dtype=np.int64)
        X = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64)
        ds.splits[name] = Split(X.reshape(len(rows), params["L"] * params["d"]), y, ids)
    return ds


# ---------------------------------------------------------------------------
# pretraining

def denoising_loss(denoiser, x0, t, eps, c, schedule):
    """Mean squared error between true and predicted noise."""
    xt = forward_noise(x0, t, eps, schedule)
    pred = denoiser(ad.Value(xt), t, c)
    diff = ad.sub(pred, ad.Value(eps))
    return ad.mean(ad.mul(diff, diff))


def pretrain_diffusion(denoiser, dataset, schedule, steps=2000, seed=0, batch=64, lr=1e-3,
                       log_every=50):
    """Train the noise predictor on random (x0, t, eps); returns the loss trace."""
    rng = np.random.default_rng(seed)
    opt = Adam(denoiser.parameters(), LRSchedule("constant", lr))
    train = dataset.train
    tape = ad.get_tape()
    trace = []
    for k in range(steps):
        idx = rng.integers(0, len(train), size=batch)
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal((batch, train.X.shape[1]))
        denoiser.zero_grad()
        loss = denoising_loss(denoiser, train.X[idx], t, eps, train.y[idx], schedule)
        ad.backward(loss)
        value = float(loss.data)
        ad.release_graph(tape)
        if not np.isfinite(value) or value > 1e3:
            raise DivergenceError(f"denoiser pretraining diverged at step {k} (loss {value})")
        opt.step()
        if k % log_every == 0 or k == steps - 1:
            trace.append((k, value))
    return trace


def contrastive_loss(model, X, t, c):
    """Symmetric in-batch InfoNCE between motion and condition embeddings.

    Motions sharing a condition are all positives for that condition, so each
    row/column target is uniform over its matching entries.
    """
    c = np.asarray(c)
    if len(c) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    em = model.motion_embed(X, t)
    et = model.text_embed(c)
    logits = ad.mul(ad.matmul(em, ad.transpose(et)), model.temperature())
    match = (c[:, None] == c[None, :]).astype(np.float64)
    target_rows = match / match.sum(axis=1, keepdims=True)
    target_cols = match / match.sum(axis=0, keepdims=True)
    n = float(len(c))
    m2t = ad.sum(ad.mul(ad.log_softmax(logits, axis=1), ad.Value(target_rows)))
    t2m = ad.sum(ad.mul(ad.log_softmax(logits, axis=0), ad.Value(target_cols)))
    return ad.scale(ad.add(m2t, t2m), -0.5 / n)


def noisy_batch(X, schedule, rng, clean_fraction=0.5):
    """Forward-noise a batch at random timesteps; a fraction stays clean (t=0)."""
    n = X.shape[0]
    if schedule is None:
        return X, np.zeros(n, dtype=np.int64)
    t = rng.integers(1, schedule.T + 1, size=n)
    t[rng.random(n) < clean_fraction] = 0
    eps = rng.standard_normal(X.shape)
    noisy = t > 0
    out = X.copy()
    if noisy.any():
        out[noisy] = forward_noise(X[noisy], t[noisy], eps[noisy], schedule)
    return out, t


def pretrain_retrieval(model, dataset, steps=1500, seed=0, batch=32, lr=1e-3, schedule=None,
                       eval_every=250, clean_fraction=0.5):
    """Contrastive pretraining of the reward encoders.

    With a ``schedule`` the motion encoder also sees forward-noised inputs at
    their timestep, which is what makes the reward noise-aware. Returns a
    trace of (step, loss, validation R@k dict).
    """
    from .spl import eval_retrieval

    if batch < 2:
        raise ValueError("contrastive pretraining needs batch >= 2")
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), LRSchedule("constant", lr))
    train = dataset.train
    tape = ad.get_tape()
    trace = []
    for k in range(steps):
        idx = rng.choice(len(train), size=batch, replace=False)
        X, t = noisy_batch(train.X[idx], schedule, rng, clean_fraction)
        model.zero_grad()
        loss = contrastive_loss(model, X, t, train.y[idx])
        ad.backward(loss)
        value = float(loss.data)
        ad.release_graph(tape)
        if not np.isfinite(value) or value > 1e3:
            raise DivergenceError(f"retrieval pretraining diverged at step {k} (loss {value})")
        opt.step()
        if eval_every and (k % eval_every == 0 or k == steps - 1):
            rk = eval_retrieval(model, dataset.val.X, dataset.val.y,
                                batch_size=min(32, len(dataset.val)), seed=seed)
            trace.append((k, value, rk))
    return trace
