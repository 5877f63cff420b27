"""Token-budgeted chunking, comment generation, and judging for legacy code."""

__version__ = "0.1.0"

from .chunking import (
    Chunk,
    ChunkMethod,
    Partition,
    chunk_fixed_length,
    chunk_full_file,
    chunk_multiple_modules,
    chunk_single_module,
    generate_variants,
    llm_partition,
    load_human_partition,
    partition_to_chunks,
)
from .corpus import (
    Language,
    LineRecord,
    SourceFile,
    TokenBudget,
    assign_line_ids,
    count_tokens,
    insert_module_markers,
    load_source,
    make_counter,
    strip_comments,
)
from .docgen import CommentSet, GeneratedComment, generate_comments, merge_comments
from .judge import CommentVerdict, ScoreRecord, aggregate, build_windows, judge_window
from .llmgate import (
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    MockProvider,
    estimate_requests,
    extract_json,
)
from .metrics import icc2k, spearman, split_point_pr, summarize
from .structure import ModuleBoundary, find_alc_modules, find_mumps_modules

__all__ = [name for name in dir() if not name.startswith("_")]
