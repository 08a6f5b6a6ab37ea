import numpy as np
import pytest

from permfree.mixture import CorpusSpec, SynthConfig, build_corpus
from permfree.trainer import Example, TrainData

TINY_SYNTH = SynthConfig(chars="ab", feat_dim=4, n_speakers=4, min_words=1, max_words=1,
                         min_word_len=1, max_word_len=2)


def tiny_train_data(n=8, seed=0):
    c = build_corpus(CorpusSpec(synth=TINY_SYNTH, n_train=n, n_dev=4, n_eval=4, seed=seed))

    def single(us):
        return [Example(u.features, [u.labels], u.id) for u in us]

    def mixed(ms):
        return [Example(m.features, [list(r) for r in m.refs], m.id) for m in ms]

    return TrainData(single(c["train"]["single"]), single(c["dev"]["single"]),
                     mixed(c["train"]["mixed"]), mixed(c["dev"]["mixed"]))


@pytest.fixture
def tiny_data():
    return tiny_train_data()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# One verdict line per acceptance criterion, printed after the run.
CRITERIA = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
