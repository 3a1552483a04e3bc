import pytest

from deepconn.synthetic import planted_corpus

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def planted(tmp_path_factory):
    """Small additive planted corpus on disk: (corpus, jsonl path, vector path)."""
    corpus = planted_corpus(n_users=8, n_items=8, n_reviews=40, seed=3, filler_vocab=20, c=6)
    data, vecs = corpus.write(tmp_path_factory.mktemp("planted"))
    return corpus, data, vecs


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
