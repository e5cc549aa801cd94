"""Shared fixtures: small datasets, planted-structure pipelines, mock LLM server."""

from __future__ import annotations

import json
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _synth import GROUP_SIZES, make_planted  # noqa: E402

from triplet_meta import (BudgetParams, GowerOracle, TrainConfig,  # noqa: E402
                          generate_pool, subsample, train, triplet_budget)
from triplet_meta.dataset import (Characteristic, CharacteristicSpec,  # noqa: E402
                                  Dataset, Study)


def make_study(sid: str, effect: float = 0.0, variance: float = 1.0, **chars):
    """Quick study constructor; characteristic kinds inferred from value types."""
    parts = []
    for name, value in chars.items():
        kind = "numeric" if isinstance(value, (int, float)) and value is not None \
            else "categorical"
        parts.append(Characteristic(name, kind, value))
    return Study(sid, effect, variance, tuple(parts))


@pytest.fixture(scope="session")
def planted():
    """(dataset, planted labels) for the 58-study three-group scenario."""
    return make_planted(58, seed=7, sizes=GROUP_SIZES)


@pytest.fixture(scope="session")
def planted_pool(planted):
    ds, _ = planted
    return generate_pool(ds, GowerOracle(ds), pairs_per_anchor=50, seed=11)


@pytest.fixture(scope="session")
def planted_training(planted, planted_pool):
    """Primary-run training at the shipped defaults (subsample seed 20)."""
    ds, _ = planted
    budget = triplet_budget(BudgetParams(ds.m, 2, 2))
    sub = subsample(planted_pool, budget, seed=20)
    return sub, train(sub, ds.m, 2, TrainConfig(seed=0))


class MockLLMServer:
    """Scripted chat-completion endpoint running on a local thread.

    ``script`` holds (status, body) pairs consumed per request; when the
    script runs dry, ``default`` answers. Bodies given as dicts are sent as
    JSON; the helper ``reply(content)`` builds a chat-completion envelope
    around a content string.
    """

    def __init__(self):
        self.script: list[tuple[int, object]] = []
        self.requests: list[dict] = []
        self.headers: list[dict] = []
        self.default = (200, self.reply(json.dumps(
            {"more_similar": "A", "explanation": "default"})))
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                server.requests.append(payload)
                server.headers.append(dict(self.headers))
                status, body = (server.script.pop(0) if server.script
                                else server.default)
                data = (json.dumps(body) if isinstance(body, dict) else str(body)) \
                    .encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    @property
    def hits(self) -> int:
        return len(self.requests)

    @staticmethod
    def reply(content: str) -> dict:
        return {"choices": [{"message": {"content": content}}]}

    def close(self):
        self._httpd.shutdown()
        self._httpd.server_close()


@pytest.fixture()
def mock_llm(monkeypatch):
    monkeypatch.setenv("TRIPLET_META_API_KEY", "test-key")
    server = MockLLMServer()
    yield server
    server.close()
