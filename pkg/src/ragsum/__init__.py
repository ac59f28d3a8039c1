"""Retrieval-augmented multi-document summarization of survey sections.

The pipeline turns a survey section's cited papers into one cited summary:
questions are generated per paper, papers are chunked and indexed, questions
retrieve and rerank chunks, grounded answers are produced (with explicit
abstention), and an editor stage fuses the answers. An evaluation suite
scores summaries against ground truth.
"""

from .config import PipelineConfig, load_config
from .corpus import Chunk, ChunkConfig, Paper, SurveyTask, chunk_document, load_survey_tasks
from .errors import RagsumError
from .pipeline import ProviderSet, run_all, run_stage

__all__ = [
    "Chunk",
    "ChunkConfig",
    "Paper",
    "PipelineConfig",
    "ProviderSet",
    "RagsumError",
    "SurveyTask",
    "chunk_document",
    "load_config",
    "load_survey_tasks",
    "run_all",
    "run_stage",
]
