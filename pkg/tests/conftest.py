import numpy as np
import pytest

from fairwake import corpus

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion():
    """Record an acceptance criterion outcome; summarised at the end of the run."""

    def _record(name: str, passed: bool, detail: str = ""):
        _CRITERIA.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _CRITERIA:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


def toy_spec(**kw) -> corpus.SynthSpec:
    """Tiny 1.5 s corpus: every utterance yields exactly one window."""
    base = dict(
        counts={"train": [3, 2], "validation": [2, 2], "test": [2, 2]},
        duration_s=1.5, speakers_per_group=2, n_noise=1, n_rir=1, n_dir=1, seed=7,
    )
    base.update(kw)
    return corpus.SynthSpec(**base)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return corpus.synth_corpus(toy_spec(), tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_corpus(toy_manifest):
    return corpus.Corpus.from_manifest(toy_manifest)
