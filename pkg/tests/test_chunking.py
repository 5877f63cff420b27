"""Partitioning strategies, chunk materialization, and the re-query loop."""

from __future__ import annotations

import json
import random

import pytest

from chunkdoc.chunking import (
    ChunkingError,
    ChunkMethod,
    Partition,
    build_partition_request,
    chunk_fixed_length,
    chunk_full_file,
    chunk_multiple_modules,
    chunk_single_module,
    generate_variants,
    llm_partition,
    load_human_partition,
    partition_from_json,
    partition_to_chunks,
    partition_to_json,
    variant_grid,
    variant_label,
)
from chunkdoc.corpus import (
    Language,
    QuarterCharCounter,
    TokenBudget,
    UNLIMITED,
    assign_line_ids,
    file_from_content,
)
from chunkdoc.llmgate import Gateway, MockProvider
from chunkdoc.mocks import standard_mock_provider
from chunkdoc.structure import BoundaryKind, ModuleBoundary, find_modules

from oracles import greedy_fixed_length_oracle
from synth import random_human_partition_points, random_source

COUNTER = QuarterCharCounter()


def mumps_file(content: str, ids: bool = False):
    file = file_from_content(content, Language.MUMPS)
    return assign_line_ids(file, 7) if ids else file


def tiled_boundaries(spans, kind=BoundaryKind.SUBROUTINE):
    return [
        ModuleBoundary(start, end, kind, f"M{i}", marker_id=f"{i:08d}"[:8])
        for i, (start, end) in enumerate(spans)
    ]


class TestFullFile:
    def test_hundred_lines_one_chunk(self):
        file = mumps_file("\n".join(f" W {i}" for i in range(100)) + "\n")
        partition = chunk_full_file(file)
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert len(chunks) == 1
        assert (chunks[0].start_line, chunks[0].end_line) == (0, 99)
        assert not chunks[0].oversize

    def test_empty_file_no_chunks(self):
        file = mumps_file("")
        assert partition_to_chunks(file, chunk_full_file(file), COUNTER) == []

    def test_token_count_is_whole_body(self):
        text = "x" * (4_785 * 4 - 2)
        file = mumps_file(text + "\n")
        chunks = partition_to_chunks(file, chunk_full_file(file), COUNTER)
        assert chunks[0].token_count == 4_785


class TestFixedLength:
    def test_hundred_token_lines_budget_512(self):
        # 400-char lines are 100 tokens; five joined lines fit in 512.
        file = mumps_file("\n".join("a" * 400 for _ in range(23)) + "\n")
        partition = chunk_fixed_length(file, COUNTER, TokenBudget.finite(512))
        expected = greedy_fixed_length_oracle([400] * 23, 512)
        assert list(partition.split_points) == expected
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert [c.end_line - c.start_line + 1 for c in chunks] == [5, 5, 5, 5, 3]

    def test_single_giant_line_is_own_oversize_chunk(self):
        file = mumps_file("b" * 36_000 + "\n W 1\n")
        partition = chunk_fixed_length(file, COUNTER, TokenBudget.finite(4096))
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert [c.oversize for c in chunks] == [True, False]
        assert chunks[0].token_count == 9_000
        assert (chunks[0].start_line, chunks[0].end_line) == (0, 0)

    def test_generous_budget_equals_full_file(self):
        file = mumps_file("A\n W 1\n Q\n")
        partition = chunk_fixed_length(file, COUNTER, TokenBudget.finite(10_000))
        assert partition.split_points == chunk_full_file(file).split_points

    def test_requires_finite_budget(self):
        with pytest.raises(ChunkingError):
            chunk_fixed_length(mumps_file("A\n"), COUNTER, UNLIMITED)

    def test_random_files_match_oracle(self):
        rng = random.Random(99)
        for _ in range(40):
            file = random_source(rng, Language.MUMPS, with_ids=False)
            if file.line_count == 0:
                continue
            budget = rng.choice((512, 1024, 2048, 4096))
            partition = chunk_fixed_length(file, COUNTER, TokenBudget.finite(budget))
            lengths = [len(r.text) for r in file.lines]
            assert list(partition.split_points) == greedy_fixed_length_oracle(lengths, budget)


class TestSingleModule:
    def test_split_at_every_boundary_start(self):
        file = mumps_file("A\n W 1\nB\n W 2\nC\n Q\n")
        boundaries = find_modules(file)
        partition = chunk_single_module(file, boundaries)
        assert list(partition.split_points) == [2, 4]
        assert len(partition_to_chunks(file, partition, COUNTER)) == len(boundaries)

    def test_one_boundary_equals_full_file(self):
        file = mumps_file("A\n W 1\n Q\n")
        partition = chunk_single_module(file, find_modules(file))
        assert partition.split_points == ()

    def test_empty_boundaries_rejected(self):
        with pytest.raises(ChunkingError):
            chunk_single_module(mumps_file("A\n"), [])


class TestMultipleModules:
    def _uniform_modules(self, n_modules: int):
        # Two-line modules of exactly 72 tokens each (287 chars joined).
        lines = []
        spans = []
        for i in range(n_modules):
            lines.append("c" * 142)
            lines.append("d" * 144)
            spans.append((2 * i, 2 * i + 1))
        file = mumps_file("\n".join(lines) + "\n")
        return file, tiled_boundaries(spans)

    def test_seven_modules_per_chunk_at_512(self):
        file, boundaries = self._uniform_modules(21)
        partition = chunk_multiple_modules(file, boundaries, COUNTER, TokenBudget.finite(512))
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert [c.end_line - c.start_line + 1 for c in chunks] == [14, 14, 14]
        assert all(not c.oversize for c in chunks)

    def test_budget_covering_everything_is_one_chunk(self):
        file, boundaries = self._uniform_modules(4)
        partition = chunk_multiple_modules(file, boundaries, COUNTER, TokenBudget.finite(100_000))
        assert partition.split_points == ()

    def test_budget_below_smallest_module_matches_single_module(self):
        file, boundaries = self._uniform_modules(5)
        partition = chunk_multiple_modules(file, boundaries, COUNTER, TokenBudget.finite(10))
        single = chunk_single_module(file, boundaries)
        assert partition.split_points == single.split_points
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert all(c.oversize for c in chunks)

    def test_nesting_in_single_module_points(self):
        rng = random.Random(123)
        for _ in range(30):
            file = random_source(rng, Language.ALC, with_ids=False)
            if file.line_count == 0:
                continue
            boundaries = find_modules(file)
            single = set(chunk_single_module(file, boundaries).split_points)
            for budget in (512, 1024, 2048, 4096):
                multi = chunk_multiple_modules(
                    file, boundaries, COUNTER, TokenBudget.finite(budget)
                )
                assert set(multi.split_points) <= single


class TestHumanPartition:
    def _file(self):
        return mumps_file("\n".join(f" W {i}" for i in range(12)) + "\n", ids=True)

    def test_split_points_path(self):
        file = self._file()
        payload = {"file_digest": file.byte_digest, "split_points": [3, 10]}
        partition = load_human_partition(file, payload)
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert [(c.start_line, c.end_line) for c in chunks] == [(0, 2), (3, 9), (10, 11)]
        assert partition.method is ChunkMethod.HUMAN_PARTITIONS
        assert not partition.budget.is_finite

    def test_line_ids_path(self):
        file = self._file()
        ids = [file.lines[3].line_id, file.lines[10].line_id]
        partition = load_human_partition(
            file, {"file_digest": file.byte_digest, "split_line_ids": ids}
        )
        assert list(partition.split_points) == [3, 10]

    def test_empty_split_list_is_full_file(self):
        file = self._file()
        partition = load_human_partition(
            file, {"file_digest": file.byte_digest, "split_points": []}
        )
        assert partition.split_points == ()

    def test_split_at_zero_rejected(self):
        file = self._file()
        with pytest.raises(ChunkingError):
            load_human_partition(file, {"file_digest": file.byte_digest, "split_points": [0]})

    def test_digest_mismatch_rejected(self):
        file = self._file()
        with pytest.raises(ChunkingError):
            load_human_partition(file, {"file_digest": "beef", "split_points": [3]})

    def test_unknown_line_id_rejected(self):
        file = self._file()
        with pytest.raises(ChunkingError):
            load_human_partition(
                file, {"file_digest": file.byte_digest, "split_line_ids": ["zzzzzzzz"]}
            )

    def test_non_monotone_rejected(self):
        file = self._file()
        with pytest.raises(ChunkingError):
            load_human_partition(
                file, {"file_digest": file.byte_digest, "split_points": [10, 3]}
            )

    def test_out_of_range_rejected(self):
        file = self._file()
        with pytest.raises(ChunkingError):
            load_human_partition(
                file, {"file_digest": file.byte_digest, "split_points": [40]}
            )


def scripted_gateway(texts: list[str]) -> tuple[Gateway, MockProvider]:
    provider = MockProvider(scripted=texts)
    return Gateway(provider=provider, cache_dir=None), provider


class TestLlmPartition:
    def test_returned_ids_become_split_points(self):
        file = mumps_file("\n".join(f" W {i}" for i in range(12)) + "\n", ids=True)
        reply = json.dumps(
            {
                "partitions": [
                    {"explanation": "first block ends", "line_id": file.lines[4].line_id},
                    {"explanation": "trailer begins", "line_id": file.lines[9].line_id},
                ]
            }
        )
        gateway, _ = scripted_gateway([reply])
        partition = llm_partition(file, gateway, COUNTER, UNLIMITED, "m")
        assert list(partition.split_points) == [4, 9]
        assert partition.explanations == {4: "first block ends", 9: "trailer begins"}
        assert partition.method is ChunkMethod.LLM_PARTITIONS

    def test_module_starts_mock_equals_single_module(self):
        rng = random.Random(42)
        gateway = Gateway(provider=standard_mock_provider(), cache_dir=None)
        for _ in range(15):
            file = random_source(rng, Language.MUMPS)
            if file.line_count == 0:
                continue
            boundaries = find_modules(file)
            expected = chunk_single_module(file, boundaries)
            result = llm_partition(file, gateway, COUNTER, UNLIMITED, "m")
            assert result.split_points == expected.split_points

    def _oversize_file(self):
        # Lines 0..31 are 99 chars: splitting at 32 leaves an 800-token chunk.
        lines = [f" S F{i}=\"" + "x" * (99 - len(f" S F{i}=\"") - 1) + "\"" for i in range(32)]
        assert all(len(line) == 99 for line in lines)
        lines += [" Q" for _ in range(4)]
        return mumps_file("\n".join(lines) + "\n", ids=True)

    def test_requery_payload_and_fallback(self):
        file = self._oversize_file()
        split_id = file.lines[32].line_id
        reply = json.dumps({"partitions": [{"explanation": "tail", "line_id": split_id}]})
        gateway, provider = scripted_gateway([reply] * 4)
        partition = llm_partition(
            file, gateway, COUNTER, TokenBudget.finite(512), "m", max_rounds=3
        )
        # one initial query plus three non-compliant re-query rounds
        assert provider.call_count == 4
        requery_text = "\n".join(m.content for m in provider.requests[1].messages)
        assert file.lines[0].line_id in requery_text          # original input
        assert f"line ID {split_id}" in requery_text           # prior partitioning
        assert "800 tokens" in requery_text                    # oversize chunk list
        assert "1.5625" in requery_text                        # excess ratio
        assert "shorten" in requery_text.lower()
        # fallback force-split leaves only budget-legal chunks
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert all(c.token_count <= 512 for c in chunks)
        assert partition.fallback_forced_splits == (20,)
        assert list(partition.split_points) == [20, 32]

    def test_compliant_revision_stops_requeries(self):
        file = self._oversize_file()
        first = json.dumps(
            {"partitions": [{"explanation": "tail", "line_id": file.lines[32].line_id}]}
        )
        fixed = json.dumps(
            {
                "partitions": [
                    {"explanation": "half", "line_id": file.lines[16].line_id},
                    {"explanation": "tail", "line_id": file.lines[32].line_id},
                ]
            }
        )
        gateway, provider = scripted_gateway([first, fixed])
        partition = llm_partition(
            file, gateway, COUNTER, TokenBudget.finite(512), "m", max_rounds=3
        )
        assert provider.call_count == 2
        assert list(partition.split_points) == [16, 32]
        assert partition.fallback_forced_splits == ()

    def test_unlimited_budget_never_requeries(self):
        file = self._oversize_file()
        reply = json.dumps(
            {"partitions": [{"explanation": "tail", "line_id": file.lines[32].line_id}]}
        )
        gateway, provider = scripted_gateway([reply])
        llm_partition(file, gateway, COUNTER, UNLIMITED, "m")
        assert provider.call_count == 1

    def test_unknown_ids_dropped_all_invalid_raises(self):
        file = mumps_file("A\n W 1\n", ids=True)
        gateway, _ = scripted_gateway([json.dumps({"partitions": [
            {"explanation": "?", "line_id": "zzzzzzzz"}]})])
        with pytest.raises(ChunkingError):
            llm_partition(file, gateway, COUNTER, UNLIMITED, "m")

    def test_missing_line_ids_rejected(self):
        file = mumps_file("A\n W 1\n")  # no ids assigned
        gateway, _ = scripted_gateway(["{}"])
        with pytest.raises(ChunkingError):
            build_partition_request(file, "m")
        with pytest.raises(ChunkingError):
            llm_partition(file, gateway, COUNTER, UNLIMITED, "m")

    def test_prompt_contains_protocol_elements(self):
        file = mumps_file("A\n W 1\n", ids=True)
        request = build_partition_request(file, "m")
        prompt = request.messages[1].content
        assert "8-character unique ID" in prompt
        assert "JSON object" in prompt
        assert f"{file.lines[0].line_id} A" in prompt
        assert "MUMPS" in request.messages[0].content


class TestGenerateVariants:
    def test_sixteen_with_human(self, mock_gateway):
        file = mumps_file("A\n W 1\nB\n W 2\nC\n Q\n", ids=True)
        boundaries = find_modules(file)
        human = load_human_partition(
            file, {"file_digest": file.byte_digest, "split_points": [2]}
        )
        variants = generate_variants(
            file, boundaries, human, mock_gateway, COUNTER, model_id="m"
        )
        assert len(variants) == 16
        labels = [v.label for v in variants]
        assert len(set(labels)) == 16
        assert sorted(labels) == sorted(
            variant_label(m, b) for m, b in variant_grid()
        )

    def test_fifteen_without_human(self, mock_gateway):
        file = mumps_file("A\n W 1\nB\n W 2\n", ids=True)
        variants = generate_variants(
            file, find_modules(file), None, mock_gateway, COUNTER, model_id="m"
        )
        assert len(variants) == 15
        assert ChunkMethod.HUMAN_PARTITIONS not in {v.method for v in variants}

    def test_grid_arithmetic(self):
        grid = variant_grid()
        assert len(grid) == 16
        unlimited = [m for m, b in grid if not b.is_finite]
        assert len(unlimited) == 4  # FullFile, SingleModule, Human, LLM-unlimited


class TestPartitionToChunks:
    def test_basic_splits(self):
        file = mumps_file("\n".join(f" W {i}" for i in range(6)) + "\n")
        partition = Partition(file.byte_digest, ChunkMethod.HUMAN_PARTITIONS, UNLIMITED, (3,))
        chunks = partition_to_chunks(file, partition, COUNTER)
        assert [(c.start_line, c.end_line) for c in chunks] == [(0, 2), (3, 5)]

    def test_reconstruction(self):
        file = mumps_file("A\n W 1\nB\n Q\n")
        partition = Partition(file.byte_digest, ChunkMethod.HUMAN_PARTITIONS, UNLIMITED, (2,))
        chunks = partition_to_chunks(file, partition, COUNTER)
        texts = [
            "\n".join(r.text for r in file.lines[c.start_line : c.end_line + 1])
            for c in chunks
        ]
        assert "\n".join(texts) == file.body

    def test_digest_mismatch(self):
        file = mumps_file("A\n")
        partition = Partition("0" * 64, ChunkMethod.FULL_FILE, UNLIMITED, ())
        with pytest.raises(ChunkingError):
            partition_to_chunks(file, partition, COUNTER)

    def test_invalid_split_points(self):
        file = mumps_file("A\n W 1\n")
        bad = Partition(file.byte_digest, ChunkMethod.HUMAN_PARTITIONS, UNLIMITED, (5,))
        with pytest.raises(ChunkingError):
            partition_to_chunks(file, bad, COUNTER)
        with pytest.raises(ChunkingError):
            Partition(file.byte_digest, ChunkMethod.HUMAN_PARTITIONS, UNLIMITED, (2, 2))

    def test_json_round_trip(self):
        file = mumps_file("A\n W 1\nB\n Q\n", ids=True)
        partition = Partition(
            file.byte_digest,
            ChunkMethod.LLM_PARTITIONS,
            TokenBudget.finite(512),
            (2,),
            explanations={2: "why"},
            fallback_forced_splits=(2,),
        )
        assert partition_from_json(partition_to_json(partition)) == partition


class TestStrategyProperties:
    """Seeded mini version of the acceptance property suite."""

    def test_invariants_over_random_files(self, mock_gateway):
        rng = random.Random(777)
        budgets = (512, 1024, 2048, 4096)
        for i in range(60):
            language = Language.MUMPS if i % 2 == 0 else Language.ALC
            file = random_source(rng, language)
            if file.line_count == 0:
                continue
            boundaries = find_modules(file)
            human = Partition(
                file.byte_digest,
                ChunkMethod.HUMAN_PARTITIONS,
                UNLIMITED,
                tuple(random_human_partition_points(rng, file.line_count)),
            )
            variants = generate_variants(
                file, boundaries, human, mock_gateway, COUNTER,
                model_id="m", budgets=budgets,
            )
            assert len(variants) == 16
            single_points = set(chunk_single_module(file, boundaries).split_points)
            counts: dict[ChunkMethod, dict[int, int]] = {}
            for partition in variants:
                chunks = partition_to_chunks(file, partition, COUNTER)
                texts = [
                    "\n".join(r.text for r in file.lines[c.start_line : c.end_line + 1])
                    for c in chunks
                ]
                assert "\n".join(texts) == file.body  # losslessness
                if partition.budget.is_finite:
                    for chunk in chunks:
                        if chunk.oversize:
                            if partition.method is ChunkMethod.FIXED_LENGTH:
                                assert chunk.start_line == chunk.end_line
                            elif partition.method is ChunkMethod.MULTIPLE_MODULES:
                                assert (chunk.start_line, chunk.end_line) in {
                                    (b.start_line, b.end_line) for b in boundaries
                                }
                            elif partition.method is ChunkMethod.LLM_PARTITIONS:
                                assert chunk.start_line == chunk.end_line
                        else:
                            assert chunk.token_count <= partition.budget.limit
                if partition.method is ChunkMethod.MULTIPLE_MODULES:
                    assert set(partition.split_points) <= single_points
                if (
                    partition.method is ChunkMethod.FIXED_LENGTH
                    and partition.budget.is_finite
                ):
                    for a, b in zip(chunks, chunks[1:]):
                        merged = "\n".join(
                            r.text for r in file.lines[a.start_line : b.start_line + 1]
                        )
                        assert COUNTER.count(merged) > partition.budget.limit
                if partition.method in (ChunkMethod.FIXED_LENGTH, ChunkMethod.MULTIPLE_MODULES):
                    counts.setdefault(partition.method, {})[partition.budget.limit] = len(chunks)
            for method_counts in counts.values():
                ordered = [method_counts[b] for b in budgets]
                assert ordered == sorted(ordered, reverse=True)  # monotone in budget
