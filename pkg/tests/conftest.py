import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from ttrss.corpus import DatasetConfig, load_split
from ttrss.encoders import EncoderConfig, Encoders

torch.set_default_dtype(torch.float64)
torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(__file__)), "configs")


def small_dataset(**kw) -> DatasetConfig:
    base = dict(seed=0, sample_rate=8000, n_subwords=24, n_words=40, n_sources=2, n_train=6, n_val=3, n_test=3,
                min_words=3, max_words=5, noisy=False, snr_low_db=0.0, snr_high_db=0.0)
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture(scope="session")
def dataset_config():
    return small_dataset()


@pytest.fixture(scope="session")
def lexicon(dataset_config):
    return dataset_config.lexicon()


@pytest.fixture(scope="session")
def encoder_config():
    return EncoderConfig(24, 32, 50.0, 0.04, 0)


@pytest.fixture(scope="session")
def encoders(encoder_config, lexicon, dataset_config):
    return Encoders(encoder_config, lexicon, dataset_config.sample_rate)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory, dataset_config):
    from ttrss.corpus import gen_dataset
    return gen_dataset(dataset_config, tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="session")
def train_records(dataset_dir, lexicon):
    return load_split(dataset_dir, "train", lexicon)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def run_smoke(out, config="smoke.yaml"):
    import sys
    sys.path.insert(0, os.path.join(os.path.dirname(CONFIGS), "scripts"))
    from run_pipeline import run
    return run(os.path.join(CONFIGS, config), str(out))


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    assert run_smoke(out) == 0
    return out


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""
    def report(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
