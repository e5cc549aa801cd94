"""Similarity oracles: which of two candidate studies is closer to an anchor?

Two interchangeable oracles answer that question. ``GowerOracle`` is a
deterministic mixed-type distance oracle (numeric gaps normalized by the
dataset-wide range, categorical/text exact match), usable fully offline.
``LlmOracle`` posts a rendered prompt to a chat-completion-style HTTP
endpoint, demands a strict JSON reply, retries with exponential backoff,
and caches every judgment on disk keyed by (model, prompt hash).
"""

from __future__ import annotations

import importlib.resources
import json
import os
import random
import re
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests

from ._util import atomic_write_text, sha256_text
from .dataset import CharacteristicSpec, Dataset, Study
from .errors import ConfigError, ReplyParseError, TransportError

API_KEY_ENV = "TRIPLET_META_API_KEY"


class GowerWarning(UserWarning):
    """Degenerate feature overlap while computing a Gower distance."""


@dataclass(frozen=True)
class TripletJudgment:
    """Oracle verdict on one (anchor, candidate A, candidate B) comparison.

    ``more_similar`` refers to the caller's A/B slots even when the prompt
    presented the candidates in swapped order (``presented_order``).
    """

    anchor_id: str
    candidate_a_id: str
    candidate_b_id: str
    more_similar: str  # "A" | "B"
    explanation: str = ""
    oracle_tag: str = "gower"
    prompt_hash: str | None = None
    presented_order: str = "AB"

    def __post_init__(self):
        if self.more_similar not in ("A", "B"):
            raise ValueError(f"more_similar must be 'A' or 'B', got {self.more_similar!r}")
        ids = (self.anchor_id, self.candidate_a_id, self.candidate_b_id)
        if len(set(ids)) != 3:
            raise ValueError(f"anchor and candidates must be pairwise distinct: {ids}")


@dataclass
class OracleConfig:
    """Configuration for LLM judging; ``kind`` selects llm vs gower in the pipeline."""

    kind: str = "gower"
    endpoint: str = ""
    model: str = ""
    temperature: float = 0.0
    max_in_flight: int = 4
    max_retries: int = 3
    retry_base_delay: float = 1.0
    timeout: float = 60.0
    cache_dir: str | Path | None = None
    prompt_template: str | Path | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("llm", "gower"):
            raise ConfigError(f"oracle kind must be 'llm' or 'gower', got {self.kind!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


# ---------------------------------------------------------------------------
# Gower distance oracle
# ---------------------------------------------------------------------------

def numeric_ranges(ds: Dataset) -> dict[str, float]:
    """Observed max-min per numeric characteristic (0.0 for constant/empty ones)."""
    ranges: dict[str, float] = {}
    for spec in ds.schema:
        if spec.kind != "numeric":
            continue
        values = [s.value(spec.name) for s in ds.studies if s.value(spec.name) is not None]
        ranges[spec.name] = float(max(values) - min(values)) if values else 0.0
    return ranges


def gower_distance(a: Study, b: Study,
                   schema: Sequence[CharacteristicSpec],
                   ranges: dict[str, float]) -> float:
    """Mean per-feature dissimilarity over characteristics present on both studies.

    Numeric features contribute |a-b| / range (0 when the dataset-wide range
    is zero); categorical and text features contribute 0 on exact equality
    and 1 otherwise. With no jointly present feature the distance is 1 and a
    GowerWarning is emitted.
    """
    va = {c.name: c.value for c in a.characteristics}
    vb = {c.name: c.value for c in b.characteristics}
    total, count = 0.0, 0
    for spec in schema:
        x, y = va.get(spec.name), vb.get(spec.name)
        if x is None or y is None:
            continue
        count += 1
        if spec.kind == "numeric":
            rng = ranges.get(spec.name, 0.0)
            if rng > 0.0:
                total += abs(float(x) - float(y)) / rng
            # zero range: constant feature contributes 0
        else:
            total += 0.0 if x == y else 1.0
    if count == 0:
        warnings.warn(
            f"no jointly present characteristic between {a.id!r} and {b.id!r}; "
            "distance defaults to 1", GowerWarning, stacklevel=2)
        return 1.0
    return total / count


def judge_gower(anchor: Study, cand_a: Study, cand_b: Study,
                schema: Sequence[CharacteristicSpec],
                ranges: dict[str, float]) -> TripletJudgment:
    """Pick the candidate with the smaller Gower distance to the anchor.

    Exact ties go to the candidate with the lexicographically smaller id.
    """
    da = gower_distance(anchor, cand_a, schema, ranges)
    db = gower_distance(anchor, cand_b, schema, ranges)
    if da < db:
        winner = "A"
    elif db < da:
        winner = "B"
    else:
        winner = "A" if cand_a.id <= cand_b.id else "B"
    explanation = (f"gower(anchor, A) = {da:.6f}, gower(anchor, B) = {db:.6f}; "
                   f"candidate {winner} is closer")
    return TripletJudgment(anchor.id, cand_a.id, cand_b.id, winner,
                           explanation=explanation, oracle_tag="gower")


class GowerOracle:
    """Deterministic offline oracle over a dataset's characteristics."""

    def __init__(self, ds: Dataset):
        self.schema = ds.schema
        self.ranges = numeric_ranges(ds)
        self.constant_features = tuple(
            name for name, rng in self.ranges.items() if rng == 0.0)
        self.oracle_tag = "gower"

    def distance(self, a: Study, b: Study) -> float:
        return gower_distance(a, b, self.schema, self.ranges)

    def judge(self, anchor: Study, cand_a: Study, cand_b: Study) -> TripletJudgment:
        return judge_gower(anchor, cand_a, cand_b, self.schema, self.ranges)


# ---------------------------------------------------------------------------
# LLM oracle
# ---------------------------------------------------------------------------

def default_prompt_template() -> str:
    return (importlib.resources.files("triplet_meta") / "data" / "prompt_default.txt") \
        .read_text(encoding="utf-8")


def describe_study(s: Study) -> str:
    """One 'name: value' line per characteristic, 'missing' when absent."""
    lines = []
    for c in s.characteristics:
        value = "missing" if c.value is None else c.value
        lines.append(f"{c.name}: {value}")
    return "\n".join(lines) if lines else "(no characteristics recorded)"


def render_prompt(template: str, anchor: Study, cand_a: Study, cand_b: Study) -> str:
    return template.format(anchor=describe_study(anchor),
                           candidate_a=describe_study(cand_a),
                           candidate_b=describe_study(cand_b))


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$")


def parse_reply(text: str) -> tuple[str, str]:
    """Parse the model's strict-JSON verdict; tolerates a markdown code fence."""
    cleaned = _FENCE.sub("", text.strip())
    try:
        doc = json.loads(cleaned)
    except json.JSONDecodeError as exc:
        raise ReplyParseError(f"reply is not valid JSON: {exc}", raw_reply=text)
    if not isinstance(doc, dict):
        raise ReplyParseError("reply JSON is not an object", raw_reply=text)
    verdict = str(doc.get("more_similar", "")).strip().upper()
    if verdict not in ("A", "B"):
        raise ReplyParseError(
            f"reply key 'more_similar' must be 'A' or 'B', got {doc.get('more_similar')!r}",
            raw_reply=text)
    return verdict, str(doc.get("explanation", ""))


class JudgmentCache:
    """One JSON file per (model, prompt hash); concurrent reads, serialized writes."""

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir)
        self._lock = threading.Lock()

    def _path(self, model: str, prompt_hash: str) -> Path:
        safe_model = re.sub(r"[^A-Za-z0-9._-]+", "_", model) or "model"
        return self.root / safe_model / f"{prompt_hash}.json"

    def get(self, model: str, prompt_hash: str) -> dict | None:
        path = self._path(model, prompt_hash)
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, model: str, prompt_hash: str, record: dict) -> None:
        with self._lock:
            atomic_write_text(self._path(model, prompt_hash),
                              json.dumps(record, indent=2, sort_keys=True,
                                         ensure_ascii=False) + "\n")


class LlmOracle:
    """Similarity judge backed by a chat-completion-style HTTP endpoint.

    Candidate presentation order is randomized per call (seeded, recorded in
    the judgment) to counter position bias. Judgments are cached on disk and
    identical (model, prompt) pairs are answered from cache without network
    traffic.
    """

    def __init__(self, cfg: OracleConfig, template: str | None = None,
                 session: requests.Session | None = None):
        if cfg.kind != "llm":
            raise ConfigError("LlmOracle requires an OracleConfig with kind='llm'")
        if not cfg.endpoint:
            raise ConfigError("LLM oracle requires an endpoint URL")
        if not cfg.model:
            raise ConfigError("LLM oracle requires a model name")
        self.cfg = cfg
        if template is None:
            if cfg.prompt_template:
                template = Path(cfg.prompt_template).read_text(encoding="utf-8")
            else:
                template = default_prompt_template()
        self.template = template
        self.cache = JudgmentCache(cfg.cache_dir) if cfg.cache_dir else None
        self.oracle_tag = f"llm:{cfg.model}"
        self._rng = random.Random(cfg.seed)
        self._session = session or requests.Session()

    def _api_key(self) -> str:
        key = os.environ.get(API_KEY_ENV, "")
        if not key:
            raise ConfigError(f"environment variable {API_KEY_ENV} is not set")
        return key

    def _post(self, prompt: str) -> str:
        payload = {
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        headers = {"Authorization": f"Bearer {self._api_key()}",
                   "Content-Type": "application/json"}
        resp = self._session.post(self.cfg.endpoint, json=payload, headers=headers,
                                  timeout=self.cfg.timeout)
        resp.raise_for_status()
        doc = resp.json()
        try:
            return doc["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ReplyParseError("response lacks choices[0].message.content",
                                  raw_reply=resp.text)

    def _request_with_retries(self, prompt: str) -> tuple[str, str]:
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.retry_base_delay * 2 ** (attempt - 1))
            try:
                return parse_reply(self._post(prompt))
            except ReplyParseError as exc:
                last = exc
            except (requests.RequestException, ValueError) as exc:
                # ValueError covers resp.json() decode failures
                last = TransportError(f"transport failure: {exc}")
        assert last is not None
        raise last

    def judge(self, anchor: Study, cand_a: Study, cand_b: Study) -> TripletJudgment:
        return self._judge_with_swap(anchor, cand_a, cand_b,
                                     swap=self._rng.random() < 0.5)

    def judge_many(self, triples: Sequence[tuple[Study, Study, Study]]
                   ) -> list[TripletJudgment]:
        """Judge a batch concurrently (up to max_in_flight); results in input order.

        Presentation-order randomization is drawn sequentially up front so the
        outcome does not depend on thread completion order.
        """
        swaps = [self._rng.random() < 0.5 for _ in triples]

        def one(args):
            (anchor, ca, cb), swap = args
            return self._judge_with_swap(anchor, ca, cb, swap=swap)

        with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
            return list(pool.map(one, zip(triples, swaps)))

    def _judge_with_swap(self, anchor: Study, cand_a: Study, cand_b: Study,
                         *, swap: bool) -> TripletJudgment:
        first, second = (cand_b, cand_a) if swap else (cand_a, cand_b)
        presented_order = "BA" if swap else "AB"
        prompt = render_prompt(self.template, anchor, first, second)
        prompt_hash = sha256_text(f"{self.cfg.model}\n{prompt}")
        if self.cache is not None:
            hit = self.cache.get(self.cfg.model, prompt_hash)
            if hit is not None:
                return TripletJudgment(**hit["judgment"])
        verdict, explanation = self._request_with_retries(prompt)
        if swap:  # model answered in presented slots; map back to caller slots
            verdict = "B" if verdict == "A" else "A"
        judgment = TripletJudgment(
            anchor_id=anchor.id, candidate_a_id=cand_a.id, candidate_b_id=cand_b.id,
            more_similar=verdict, explanation=explanation,
            oracle_tag=self.oracle_tag, prompt_hash=prompt_hash,
            presented_order=presented_order)
        if self.cache is not None:
            self.cache.put(self.cfg.model, prompt_hash, {
                "model": self.cfg.model,
                "temperature": self.cfg.temperature,
                "prompt": prompt,
                "judgment": judgment.__dict__,
            })
        return judgment


def judge_llm(anchor: Study, cand_a: Study, cand_b: Study,
              cfg: OracleConfig, template: str | None = None) -> TripletJudgment:
    """One-shot LLM judgment; prefer LlmOracle for batches (shared session/cache)."""
    return LlmOracle(cfg, template=template).judge(anchor, cand_a, cand_b)
