import numpy as np
import pytest

from steptune import autodiff as ad
from steptune import models as m
from steptune import toymotion as tm
from steptune.diffusion import make_schedule

ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def fresh_tape():
    """Each test records on its own tape so node counts never leak between tests."""
    with ad.use_tape(ad.Tape()) as tape:
        yield tape


@pytest.fixture(scope="session")
def pretrained_paths(tmp_path_factory):
    """Default-size denoiser and noise-aware reward model, trained once per session."""
    root = tmp_path_factory.mktemp("pretrained")
    with ad.use_tape(ad.Tape()) as tape:
        ds = tm.generate_dataset(seed=0)
        sch = make_schedule()
        den = m.Denoiser(ds.motion_dim, ds.n_conditions, seed=0)
        tm.pretrain_diffusion(den, ds, sch, steps=10_000, seed=0)
        rew = m.RewardModel(ds.motion_dim, ds.n_conditions, seed=0)
        tm.pretrain_retrieval(rew, ds, steps=1500, seed=0, schedule=sch, eval_every=10**9)
        m.save_checkpoint(root / "denoiser.npz", den)
        m.save_checkpoint(root / "reward.npz", rew)
        tape.release()
    return root / "denoiser.npz", root / "reward.npz"


@pytest.fixture
def pretrained(pretrained_paths):
    """Fresh copies of the pretrained pair on the current test's tape."""
    den, _ = m.load_checkpoint(pretrained_paths[0])
    rew, _ = m.load_checkpoint(pretrained_paths[1])
    return den, rew


def tiny_models(seed, dim=3, n_cond=2, hidden=6):
    den = m.Denoiser(dim, n_cond, hidden=hidden, time_dim=4, cond_dim=2, seed=seed)
    rew = m.RewardModel(dim, n_cond, hidden=hidden, embed_dim=4, time_dim=4, seed=seed + 1000)
    # move off the symmetric init so rewards and gradients are generic
    rew.params["log_tau"].data[...] = 0.5
    return den, rew


@pytest.fixture
def tiny():
    return tiny_models(0)


@pytest.fixture
def acceptance():
    def report(n, ok, detail):
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def rng(seed=0):
    return np.random.default_rng(seed)
