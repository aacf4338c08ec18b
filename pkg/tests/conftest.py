import pytest
import torch

from metadm_lab import datasets, diffusion
from metadm_lab.episodic import ClassId

torch.set_num_threads(1)

SMALL = datasets.SynthSpec(n_classes=8, images_per_class=10, image_shape=(3, 16, 16), seed=5)


@pytest.fixture(scope="session")
def small_classes():
    """[(ClassId, images[10,3,16,16])] for 8 synthetic classes."""
    return datasets.synth_images(SMALL)


@pytest.fixture(scope="session")
def small_pool(small_classes):
    return dict(small_classes)


@pytest.fixture(scope="session")
def small_schedule():
    return diffusion.default_schedule(50)


@pytest.fixture(scope="session")
def small_denoiser(small_classes, small_schedule):
    """A quickly trained 16x16 denoiser; good enough for ordering checks."""
    images = torch.cat([imgs for _, imgs in small_classes])
    model = diffusion.build_denoiser(0, 3, (16, 32), 32)
    diffusion.train_denoiser(model, images, small_schedule, epochs=40, lr=3e-3, batch_size=16, seed=0)
    return model


def real(i):
    return ClassId(i, True)


def fake(i):
    return ClassId(i, False)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdict(request):
    """``verdict(n, ok, detail)`` records one acceptance line and asserts it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
