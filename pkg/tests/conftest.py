import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
ML100K = Path(os.environ.get("SYNREC_ML100K", ROOT / "data" / "ml-100k" / "u.data"))


def central_diff(f, x, h=1e-6):
    """Plain central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


@pytest.fixture(scope="session")
def ml100k_path():
    if not ML100K.exists():
        try:
            subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_ml100k.py"), "--out", str(ML100K)],
                           check=True, timeout=600)
        except (subprocess.SubprocessError, OSError) as exc:
            pytest.fail(f"MovieLens 100K not found at {ML100K} and fetching failed: {exc}")
    return ML100K


@pytest.fixture(scope="session")
def ml100k(ml100k_path):
    from synrec.data import load_ratings

    return load_ratings(ml100k_path, name="ml100k")


@pytest.fixture(scope="session")
def ml100k_bundle(ml100k):
    """GAN trained on embedded MovieLens 100K with the default settings."""
    from synrec import ganrs
    from synrec.numkernel import make_rng

    space = ganrs.embed_dataset(ml100k, 16, make_rng(0, "embed"))
    bank = ganrs.real_sample_bank(space, ml100k)
    return ganrs.train_gan(bank, ganrs.GanConfig(), rng=make_rng(0, "gan"), source_scale=ml100k.scale)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
