import numpy as np
import pytest

from xmd import modality, taskgen, tinylm


@pytest.fixture(scope="session")
def vocab():
    return taskgen.default_vocab()


@pytest.fixture(scope="session")
def teacher(vocab):
    return tinylm.init_teacher(tinylm.ModelConfig(vocab_size=len(vocab)), vocab, seed=3)


@pytest.fixture
def student(teacher):
    return tinylm.init_student_from_teacher(teacher, seed=5)


@pytest.fixture(scope="session")
def codebook(vocab):
    return modality.make_codebook(len(vocab))


@pytest.fixture(scope="session")
def corpus():
    return taskgen.generate_corpus(11)


def make_samples(vocab, n, seed=0, q_len=4, a_len=2, codebook=None):
    """Random questions and answers over the task symbols."""
    rng = np.random.default_rng(seed)
    body = np.arange(len(tinylm.RESERVED), len(vocab))
    def answer():
        return tuple(int(t) for t in rng.choice(body, a_len - 1)) + (tinylm.EOS,)

    out = []
    for i in range(n):
        q = tuple(int(t) for t in rng.choice(body, q_len))
        y = answer()
        out.append(taskgen.Sample(i, q, y, "eval", yhat=answer()))
    if codebook is not None:
        out = modality.synthesize_dataset(codebook, out, seed)
    return out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
