from __future__ import annotations

import shutil
from pathlib import Path

import pytest
import yaml

from chunkdoc.llmgate import Gateway
from chunkdoc.mocks import standard_mock_provider

REPO_ROOT = Path(__file__).resolve().parent.parent
MINI_CORPUS = REPO_ROOT / "corpus" / "mini"


@pytest.fixture(scope="session")
def mini_corpus_dir() -> Path:
    assert MINI_CORPUS.is_dir(), "bundled mini corpus missing"
    return MINI_CORPUS


@pytest.fixture()
def mock_gateway() -> Gateway:
    """Offline gateway with the standard scripted behaviors, no cache."""
    return Gateway(provider=standard_mock_provider(), cache_dir=None)


@pytest.fixture()
def mini_config_path(tmp_path: Path, mini_corpus_dir: Path):
    """A ready-to-run config pointing at a copy of the mini corpus."""

    def build(**overrides) -> Path:
        corpus_copy = tmp_path / "corpus"
        if not corpus_copy.exists():
            shutil.copytree(mini_corpus_dir, corpus_copy)
        payload = {
            "corpus": {
                "mumps_dir": "corpus/mumps",
                "alc_dir": "corpus/alc",
                "human_partitions_dir": "corpus/human",
            },
            "provider": {"kind": "mock", "cache_dir": "cache"},
            "runs_dir": "runs",
            "coverage": 10,
            "window_size": 5,
            "seed": 7,
        }
        payload.update(overrides)
        config_path = tmp_path / "config.yaml"
        config_path.write_text(yaml.safe_dump(payload), encoding="utf-8")
        return config_path

    return build
