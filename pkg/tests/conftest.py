import re

import pytest
import torch

from dlow_lab.cvae import CvaeArch, CvaeTrainConfig, train_cvae
from dlow_lab.config import packaged_config
from dlow_lab.data import generate_synthetic

torch.set_num_threads(1)


def tiny_config(path, **edits):
    """The packaged benchmark with desk-friendly sizes, written to ``path``."""
    text = packaged_config().read_text()
    subs = {
        r"(?m)^items_per_mode = 200": "items_per_mode = 30",
        r"(?m)^items_per_mode = 150": "items_per_mode = 20",
        r"(?m)^epochs = \d+": "epochs = 2",
        r"(?m)^samples_per_epoch = \d+": "samples_per_epoch = 256",
        r"(?m)^hidden = \d+": "hidden = 32",
    }
    subs.update(edits)
    for pattern, repl in subs.items():
        text = re.sub(pattern, repl, text)
    path.write_text(text)
    return path


def finite_difference_error(loss_fn, params, h=1e-6):
    """Relative error between autograd and central-difference gradients.

    ``loss_fn()`` must be a deterministic double-precision scalar function of
    the tensors in ``params``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.cat([g.flatten() for g in torch.autograd.grad(loss, params)])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(4, 100, 4, 8, 4, 0.05, seed=0, num_prototypes=2)


@pytest.fixture(scope="session")
def small_cvae(small_data):
    train, _ = small_data
    arch = CvaeArch(train.H, train.T, train.V, n_z=4, hidden=64)
    return train_cvae(train, arch, CvaeTrainConfig(epochs=25, samples_per_epoch=2000), seed=0)


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """Pipeline over the packaged benchmark config; models are trained once per session."""
    from dlow_lab.config import load_config
    from dlow_lab.experiments import Pipeline

    out = tmp_path_factory.mktemp("benchmark")
    return Pipeline(load_config(packaged_config(), out=str(out)))


# one line per acceptance criterion, repeated in the terminal summary
_CRITERIA = {}


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
