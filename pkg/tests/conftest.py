from pathlib import Path

import pytest

from ragsum.corpus import Paper
from ragsum.providers import MockEmbeddingProvider, ProviderConfig

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


@pytest.fixture
def mini_task_path() -> Path:
    return DATA_DIR / "mini_survey.jsonl"


@pytest.fixture
def mock_embedder() -> MockEmbeddingProvider:
    return MockEmbeddingProvider(ProviderConfig(endpoint="mock:7", dim=16))


def make_paper(
    paper_id: str = "p1",
    bibref_key: str = "BIBREF1",
    title: str = "A Title",
    abstract: str = "An abstract.",
    full_text: str = "Some text. More text here.",
) -> Paper:
    return Paper(paper_id, bibref_key, title, abstract, full_text)
