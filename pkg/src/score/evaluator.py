"""Facet-scored episode evaluations, question answering, metrics, and the
SCORE-vs-baseline comparison harness.

The evaluation prompt is grounded: the deterministic tracker's continuity
errors ride along, any detected error caps the key-item-continuity facet,
and cited errors are validated against the tracker output so no invented
error citation survives. Metrics are pure arithmetic over the structured
results; anything that would need missing gold data is reported as absent,
never fabricated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace

from . import lexicon, prompts
from .errors import ContractError, EvaluationError, ValidationError
from .gateway import GatewayConfig, extract_json_value
from .index import build_index
from .jsonio import canonical_dumps
from .retrieval import (
    ContextBundle,
    RetrievalConfig,
    SummaryRecord,
    retrieve_for_query,
    retrieve_related,
)
from .story import Episode, ItemState, Story
from .summarize import EpisodeSummary, build_retrieval_document, summarize_episode
from .tracker import (
    ContinuityError,
    ItemTimeline,
    correct_story_timelines,
    detect_story_errors,
    error_to_dict,
    story_timelines,
)

logger = logging.getLogger(__name__)

FACETS = (
    "character_consistency",
    "plot_progression",
    "emotional_authenticity",
    "key_item_continuity",
)

# Facet cap applied whenever the tracker flagged this episode.
_ERROR_FACET_CAP = 3.0

_EPISODE_REF_RE = re.compile(r"\bepisode\s+(\d+)", re.IGNORECASE)

_QA_STOPWORDS = frozenset(
    {
        "a", "an", "and", "are", "at", "became", "become", "by", "did", "does",
        "episode", "for", "happen", "happened", "how", "in", "is", "it", "its",
        "of", "on", "or", "the", "to", "was", "were", "what", "when", "where",
        "which", "who", "whom", "why", "with",
    }
)


@dataclass(frozen=True)
class EpisodeEvaluation:
    story_id: str
    episode_index: int
    facet_scores: dict[str, float]
    rationale: str
    continuity_errors_cited: tuple[ContinuityError, ...]
    context_digest: str
    item_states: dict[str, ItemState] = field(default_factory=dict)

    def __post_init__(self):
        missing = [f for f in FACETS if f not in self.facet_scores]
        if missing:
            raise ValidationError("facet_scores", f"missing facets: {missing}")
        for name, value in self.facet_scores.items():
            if not (1.0 <= value <= 5.0):
                raise ValidationError(f"facet_scores.{name}", f"must be in [1, 5], got {value}")

    @property
    def facet_average(self) -> float:
        return sum(self.facet_scores[f] for f in FACETS) / len(FACETS)


@dataclass(frozen=True)
class QAResult:
    question: str
    answer: str
    supporting_episodes: tuple[tuple[str, int], ...]
    correct: bool | None = None
    story_id: str = ""
    gold_item_id: str | None = None


@dataclass(frozen=True)
class GoldQA:
    story_id: str
    question: str
    answer: str
    item_id: str | None = None


@dataclass(frozen=True)
class GoldData:
    """Ground truth for metric computation; either part may be absent."""

    item_assertions: tuple[tuple[str, str, int, ItemState], ...] = ()
    qa: tuple[GoldQA, ...] = ()


@dataclass
class MetricsReport:
    consistency: float | None
    coherence: float | None
    item_status: float | None
    complex_qa: float | None
    per_story: dict[str, dict[str, float | None]]
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "consistency": self.consistency,
            "coherence": self.coherence,
            "item_status": self.item_status,
            "complex_qa": self.complex_qa,
            "per_story": self.per_story,
            "config_digest": self.config_digest,
        }


# ---------------------------------------------------------------------------
# Episode evaluation
# ---------------------------------------------------------------------------


def evaluate_episode(
    episode: Episode,
    summary: EpisodeSummary,
    timelines: dict[str, ItemTimeline],
    errors: list[ContinuityError],
    context: ContextBundle,
    gateway,
    *,
    story_id: str,
    prompts_root=None,
) -> EpisodeEvaluation:
    """Score one episode across the four narrative facets.

    `timelines` are the timelines the evaluation is allowed to see (the
    corrected ones in the full pipeline); `errors` are the story's detected
    continuity errors. Any error landing on this episode caps
    key_item_continuity at 3 no matter what the backend said.
    """
    episode_errors = [e for e in errors if e.reappearance_episode == episode.index]
    asserted = {
        item_id: state
        for item_id, tl in sorted(timelines.items())
        if (state := tl.resolved_state_at(episode.index)) is not None
    }

    if gateway.is_mock:
        facets = _mock_facet_scores(summary, episode_errors)
        rationale = (
            f"tracker: {len(episode_errors)} continuity error(s); "
            f"actions={len(summary.actions)}; plot_points={len(summary.plot_points)}; "
            f"sentiment={summary.sentiment.value:.3f}"
        )
        cited = tuple(episode_errors)
    else:
        facets, rationale, cited, reply_states = _llm_evaluate(
            episode, episode_errors, context, gateway, prompts_root
        )
        asserted = reply_states or asserted

    if episode_errors:
        facets["key_item_continuity"] = min(facets["key_item_continuity"], _ERROR_FACET_CAP)

    return EpisodeEvaluation(
        story_id=story_id,
        episode_index=episode.index,
        facet_scores=facets,
        rationale=rationale,
        continuity_errors_cited=cited,
        context_digest=context.digest(),
        item_states=asserted,
    )


def _mock_facet_scores(summary: EpisodeSummary, episode_errors: list[ContinuityError]) -> dict[str, float]:
    """Deterministic rubric: max continuity when the tracker is clean,
    one-point bumps for structured content and pronounced tone."""
    if episode_errors:
        continuity = max(1.0, 4.0 - len(episode_errors))
    else:
        continuity = 5.0
    return {
        "character_consistency": 4.0 if summary.actions else 3.0,
        "plot_progression": 4.0 if summary.plot_points else 3.0,
        "emotional_authenticity": 4.0 if abs(summary.sentiment.value - 0.5) >= 0.1 else 3.0,
        "key_item_continuity": continuity,
    }


def _llm_evaluate(episode, episode_errors, context, gateway, prompts_root):
    prompt = prompts.render(
        prompts.load("evaluate", prompts_root),
        episode_text=episode.text,
        context=context.render() or "(no context retrieved)",
        errors_json=json.dumps([error_to_dict(e) for e in episode_errors], ensure_ascii=False),
    )
    reply = gateway.complete(prompt)
    try:
        return _parse_evaluation_reply(reply, episode_errors)
    except (ValueError, ValidationError):
        repair = prompts.render(prompts.load("repair", prompts_root), raw_reply=reply, original_prompt=prompt)
        reply2 = gateway.complete(repair)
        try:
            return _parse_evaluation_reply(reply2, episode_errors)
        except (ValueError, ValidationError) as e:
            raise EvaluationError(f"unusable evaluation reply: {e}", raw_reply=reply2) from e


def _parse_evaluation_reply(reply, episode_errors):
    raw = extract_json_value(reply)
    if not isinstance(raw, dict):
        raise ValueError("expected a JSON object")
    scores_raw = raw.get("facet_scores")
    if not isinstance(scores_raw, dict):
        raise ValueError("missing facet_scores object")
    facets = {}
    for name in FACETS:
        if name not in scores_raw:
            raise ValueError(f"missing facet {name}")
        value = float(scores_raw[name])
        if not (1.0 <= value <= 5.0):
            logger.warning("facet %s=%s out of range; clamped", name, value)
            value = min(5.0, max(1.0, value))
        facets[name] = value

    cited = []
    for idx in raw.get("cited_error_indexes", []):
        if isinstance(idx, int) and 0 <= idx < len(episode_errors):
            cited.append(episode_errors[idx])
        else:
            logger.warning("reply cites nonexistent error index %r; dropped", idx)

    states = {}
    for item_id, value in (raw.get("item_states") or {}).items():
        try:
            states[str(item_id)] = ItemState(value)
        except ValueError:
            logger.warning("reply asserts invalid state %r for %r; dropped", value, item_id)
    return facets, str(raw.get("rationale", "")), tuple(cited), states


# ---------------------------------------------------------------------------
# Question answering
# ---------------------------------------------------------------------------


def answer_query(
    question: str, bundle: ContextBundle, gateway, *, story_id: str = "", prompts_root=None
) -> QAResult:
    """Answer from the bundle only; refuses rather than inventing."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    if not bundle.selected:
        return QAResult(
            question=question,
            answer="insufficient context",
            supporting_episodes=(),
            correct=False,
            story_id=story_id,
        )
    if gateway.is_mock:
        answer, refs = _mock_answer(question, bundle)
    else:
        answer, refs = _llm_answer(question, bundle, gateway, prompts_root)
    return QAResult(
        question=question,
        answer=answer,
        supporting_episodes=tuple(refs),
        story_id=story_id,
    )


def _mock_answer(question: str, bundle: ContextBundle) -> tuple[str, list[tuple[str, int]]]:
    """Deterministic extractive answer.

    Scans the bundle in rank order for a sentence that shares a content
    word with the question and, when the question names a state transition,
    a verb of the same class; falls back to the top-ranked entry.
    """
    q_tokens = set(lexicon.tokens(question))
    target_classes = []
    if q_tokens & lexicon.DESTROYED_WORDS:
        target_classes.append(lexicon.DESTROYED_WORDS)
    if q_tokens & lexicon.LOST_WORDS:
        target_classes.append(lexicon.LOST_WORDS)
    content = q_tokens - _QA_STOPWORDS - lexicon.DESTROYED_WORDS - lexicon.LOST_WORDS

    for entry in bundle.selected:
        for sentence in lexicon.sentences(entry.text):
            toks = set(lexicon.tokens(sentence))
            if content and not (toks & content):
                continue
            if target_classes and not any(toks & cls for cls in target_classes):
                continue
            return (
                f"Episode {entry.episode_index}: {_strip_bullet(sentence)}",
                [(entry.story_id, entry.episode_index)],
            )

    top = bundle.selected[0]
    first = lexicon.sentences(top.text)
    snippet = _strip_bullet(first[0]) if first else top.text[:120]
    return f"Episode {top.episode_index}: {snippet}", [(top.story_id, top.episode_index)]


def _strip_bullet(sentence: str) -> str:
    # document bullet lines carry "id | actor=... | state=... | description"
    if sentence.startswith("- ") and " | " in sentence:
        return sentence.rsplit(" | ", 1)[-1]
    return sentence


def _llm_answer(question, bundle, gateway, prompts_root):
    prompt = prompts.render(prompts.load("answer", prompts_root), question=question, context=bundle.render())
    reply = gateway.complete(prompt)
    try:
        return _parse_answer_reply(reply, bundle)
    except (ValueError, ValidationError):
        repair = prompts.render(prompts.load("repair", prompts_root), raw_reply=reply, original_prompt=prompt)
        reply2 = gateway.complete(repair)
        try:
            return _parse_answer_reply(reply2, bundle)
        except (ValueError, ValidationError) as e:
            raise EvaluationError(f"unusable answer reply: {e}", raw_reply=reply2) from e


def _parse_answer_reply(reply, bundle):
    raw = extract_json_value(reply)
    if not isinstance(raw, dict) or not isinstance(raw.get("answer"), str):
        raise ValueError("expected an object with an 'answer' string")
    valid_refs = set(bundle.episode_refs())
    refs = []
    for ref in raw.get("supporting_episode_ids", []):
        story_id, _, idx = str(ref).rpartition("#")
        try:
            parsed = (story_id, int(idx))
        except ValueError:
            logger.warning("unparseable supporting id %r; dropped", ref)
            continue
        if parsed in valid_refs:
            refs.append(parsed)
        else:
            logger.warning("supporting id %r not in the bundle; dropped", ref)
    return raw["answer"], refs


def grade_answer(result: QAResult, gold: GoldQA) -> QAResult:
    """Correct iff the gold answer appears in the reply (case/space-insensitive)."""
    expected = _normalize(gold.answer)
    got = _normalize(result.answer)
    return replace(result, correct=expected in got, gold_item_id=gold.item_id, story_id=gold.story_id)


def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def compute_metrics(
    evaluations: list[EpisodeEvaluation],
    qa_results: list[QAResult],
    timelines_by_story: dict[str, dict[str, ItemTimeline]],
    gold: GoldData | None,
    *,
    config_digest: str = "",
) -> MetricsReport:
    """Aggregate the four headline metrics.

    consistency: share of responses whose asserted item states do not
      contradict the corrected timelines (correction is recomputed here, so
      passing raw or corrected timelines yields the same reference).
    coherence: mean facet average, rescaled affinely from [1,5] to [0,100].
    item_status: share of gold item-state assertions the passed timelines
      reproduce. complex_qa: share of gold-graded questions answered
      correctly. Metrics lacking inputs are None, never fabricated.
    """
    if not evaluations and not qa_results:
        raise ContractError("nothing to aggregate")

    reference = {
        story_id: correct_story_timelines(tls, detect_story_errors(tls))
        for story_id, tls in timelines_by_story.items()
    }

    story_ids = sorted(
        {e.story_id for e in evaluations}
        | {q.story_id for q in qa_results if q.story_id}
        | set(timelines_by_story)
    )
    per_story: dict[str, dict[str, float | None]] = {}
    for story_id in story_ids:
        story_evals = [e for e in evaluations if e.story_id == story_id]
        story_qa = [q for q in qa_results if q.story_id == story_id]
        gold_assertions = (
            [g for g in gold.item_assertions if g[0] == story_id] if gold else []
        )
        per_story[story_id] = {
            "consistency": _consistency(story_evals, story_qa, reference),
            "coherence": _coherence(story_evals),
            "item_status": _item_status(gold_assertions, timelines_by_story),
            "complex_qa": _complex_qa(story_qa),
        }

    return MetricsReport(
        consistency=_consistency(evaluations, qa_results, reference),
        coherence=_coherence(evaluations),
        item_status=_item_status(list(gold.item_assertions) if gold else [], timelines_by_story),
        complex_qa=_complex_qa(qa_results),
        per_story=per_story,
        config_digest=config_digest,
    )


def _coherence(evaluations: list[EpisodeEvaluation]) -> float | None:
    if not evaluations:
        return None
    rescaled = [(e.facet_average - 1.0) / 4.0 * 100.0 for e in evaluations]
    return sum(rescaled) / len(rescaled)


def _complex_qa(qa_results: list[QAResult]) -> float | None:
    graded = [q for q in qa_results if q.correct is not None]
    if not graded:
        return None
    return 100.0 * sum(1 for q in graded if q.correct) / len(graded)


def _item_status(
    gold_assertions: list[tuple[str, str, int, ItemState]],
    timelines_by_story: dict[str, dict[str, ItemTimeline]],
) -> float | None:
    if not gold_assertions:
        return None
    correct = 0
    for story_id, item_id, episode_index, true_state in gold_assertions:
        timeline = timelines_by_story.get(story_id, {}).get(item_id)
        reported = timeline.resolved_state_at(episode_index) if timeline else None
        if reported is true_state:
            correct += 1
    return 100.0 * correct / len(gold_assertions)


def _consistency(
    evaluations: list[EpisodeEvaluation],
    qa_results: list[QAResult],
    reference: dict[str, dict[str, ItemTimeline]],
) -> float | None:
    total = len(evaluations) + len(qa_results)
    if total == 0:
        return None
    conflicting = 0
    for evaluation in evaluations:
        assertions = [
            (evaluation.story_id, item_id, evaluation.episode_index, state)
            for item_id, state in evaluation.item_states.items()
        ]
        if _has_conflict(assertions, reference):
            conflicting += 1
    for qa in qa_results:
        if _has_conflict(_answer_assertions(qa), reference):
            conflicting += 1
    return 100.0 * (1.0 - conflicting / total)


def _has_conflict(assertions, reference) -> bool:
    for story_id, item_id, episode_index, state in assertions:
        timeline = reference.get(story_id, {}).get(item_id)
        if timeline is None:
            continue
        expected = timeline.resolved_state_at(episode_index)
        if expected is not None and expected is not state:
            return True
    return False


def _answer_assertions(qa: QAResult) -> list[tuple[str, str, int, ItemState]]:
    """Deterministic assertion extraction from a structured extractive answer."""
    if qa.gold_item_id is None or not qa.story_id:
        return []
    match = _EPISODE_REF_RE.search(qa.answer)
    if not match:
        return []
    episode_index = int(match.group(1))
    toks = set(lexicon.tokens(qa.answer.split(":", 1)[-1]))
    if toks & lexicon.DESTROYED_WORDS:
        state = ItemState.DESTROYED
    elif toks & lexicon.LOST_WORDS:
        state = ItemState.LOST
    else:
        return []
    return [(qa.story_id, qa.gold_item_id, episode_index, state)]


# ---------------------------------------------------------------------------
# Pipeline orchestration and the comparison harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ablations:
    """Module toggles mirroring the comparison configurations; True = enabled."""

    tracking: bool = True
    summary: bool = True
    retrieval: bool = True
    sentiment: bool = True

    def disabled(self) -> list[str]:
        return [name for name in ("tracking", "summary", "retrieval", "sentiment") if not getattr(self, name)]

    def to_dict(self) -> dict:
        return {
            "tracking": self.tracking,
            "summary": self.summary,
            "retrieval": self.retrieval,
            "sentiment": self.sentiment,
        }

    @classmethod
    def baseline(cls) -> "Ablations":
        """The plain-model protocol: no tracking, no summaries, no retrieval."""
        return cls(tracking=False, summary=False, retrieval=False, sentiment=False)


@dataclass(frozen=True)
class PipelineConfig:
    gateway: GatewayConfig
    retrieval: RetrievalConfig
    ablations: Ablations = Ablations()
    granularity: str = "summary"

    def to_dict(self) -> dict:
        return {
            "gateway": self.gateway.to_dict(),
            "retrieval": self.retrieval.to_dict(),
            "ablations": self.ablations.to_dict(),
            "granularity": self.granularity,
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_dumps(self.to_dict()).encode("utf-8")).hexdigest()[:16]


@dataclass
class PipelineResult:
    report: MetricsReport
    evaluations: list[EpisodeEvaluation]
    qa_results: list[QAResult]
    states: dict[str, tuple[dict[str, ItemTimeline], list[ContinuityError]]]
    summaries: dict[str, list[EpisodeSummary]]


def run_pipeline(
    stories: list[Story],
    gateway,
    config: PipelineConfig,
    gold: GoldData | None = None,
    *,
    prompts_root=None,
) -> PipelineResult:
    """Run extract -> track -> summarize -> index -> evaluate -> QA over a corpus.

    Deterministic under the mock backend or in replay mode: stories are
    processed in story_id order and every stage is a pure function of its
    inputs.
    """
    ablations = config.ablations
    retrieval_cfg = config.retrieval
    if not ablations.sentiment:
        retrieval_cfg = replace(retrieval_cfg, sentiment_filter_enabled=False)

    evaluations: list[EpisodeEvaluation] = []
    qa_results: list[QAResult] = []
    states: dict[str, tuple[dict[str, ItemTimeline], list[ContinuityError]]] = {}
    summaries_out: dict[str, list[EpisodeSummary]] = {}
    effective_timelines: dict[str, dict[str, ItemTimeline]] = {}

    gold_by_story: dict[str, list[GoldQA]] = {}
    if gold:
        for gq in gold.qa:
            gold_by_story.setdefault(gq.story_id, []).append(gq)

    for story in sorted(stories, key=lambda s: s.story_id):
        raw_timelines = story_timelines(story, gateway)
        errors = detect_story_errors(raw_timelines)
        states[story.story_id] = (raw_timelines, errors)
        if ablations.tracking:
            timelines = correct_story_timelines(raw_timelines, errors)
        else:
            timelines = raw_timelines
        effective_timelines[story.story_id] = timelines

        summaries = [
            summarize_episode(ep, list(story.key_items), gateway, story_id=story.story_id, prompts_root=prompts_root)
            if ablations.summary
            else _minimal_summary(ep, gateway, story_id=story.story_id)
            for ep in story.episodes
        ]
        summaries_out[story.story_id] = summaries

        # retrieval documents: structured summaries, or raw episode text when
        # summarization is ablated
        if ablations.summary:
            docs = [build_retrieval_document(s) for s in summaries]
            doc_texts = {d.episode_index: d.text for d in docs}
        else:
            doc_texts = {ep.index: ep.text for ep in story.episodes}

        records = {}
        rows = []
        texts_in_order = []
        for ep in story.episodes:
            entry_id = f"{story.story_id}#{ep.index}"
            records[entry_id] = SummaryRecord(
                entry_id=entry_id,
                story_id=story.story_id,
                episode_index=ep.index,
                sentiment=summaries[ep.index].sentiment.value,
                text=doc_texts[ep.index],
            )
            texts_in_order.append(doc_texts[ep.index])
        vectors = gateway.embed(texts_in_order)
        for ep, vec in zip(story.episodes, vectors):
            rows.append((f"{story.story_id}#{ep.index}", "summary", story.story_id, ep.index, vec))
        index = build_index(gateway.config.embed_dim, rows)

        for ep in story.episodes:
            if ablations.retrieval and len(story.episodes) > 1:
                bundle = retrieve_related(
                    doc_texts[ep.index],
                    summaries[ep.index].sentiment,
                    index,
                    records,
                    retrieval_cfg,
                    gateway,
                    exclude_ref=(story.story_id, ep.index),
                    focus_label=f"{story.story_id}#{ep.index}",
                )
            else:
                bundle = ContextBundle(focus=f"{story.story_id}#{ep.index}", selected=())
            evaluations.append(
                evaluate_episode(
                    ep,
                    summaries[ep.index],
                    timelines,
                    errors,
                    bundle,
                    gateway,
                    story_id=story.story_id,
                    prompts_root=prompts_root,
                )
            )

        for gq in gold_by_story.get(story.story_id, []):
            if ablations.retrieval:
                bundle = retrieve_for_query(gq.question, index, records, retrieval_cfg, gateway)
            else:
                bundle = ContextBundle(focus=f"query:{gq.question[:72]}", selected=())
            result = answer_query(gq.question, bundle, gateway, story_id=story.story_id, prompts_root=prompts_root)
            qa_results.append(grade_answer(result, gq))

    report = compute_metrics(
        evaluations,
        qa_results,
        effective_timelines,
        gold,
        config_digest=config.digest(),
    )
    return PipelineResult(
        report=report,
        evaluations=evaluations,
        qa_results=qa_results,
        states=states,
        summaries=summaries_out,
    )


def _minimal_summary(episode: Episode, gateway, *, story_id: str) -> EpisodeSummary:
    """Summary stub for the no-summarization configuration: synopsis and tone only."""
    sents = lexicon.sentences(episode.text)
    return EpisodeSummary(
        story_id=story_id,
        episode_index=episode.index,
        synopsis=" ".join(sents[:2]) if sents else episode.text.strip(),
        plot_points=(),
        actions=(),
        interactions=(),
        relationships=(),
        emotional_changes=(),
        sentiment=gateway.score_sentiment(episode.text),
    )


@dataclass
class ComparisonReport:
    config_a: PipelineConfig
    config_b: PipelineConfig
    report_a: MetricsReport
    report_b: MetricsReport
    digest_collision: bool

    def deltas(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for name in ("consistency", "coherence", "item_status", "complex_qa"):
            a = getattr(self.report_a, name)
            b = getattr(self.report_b, name)
            out[name] = (a - b) if (a is not None and b is not None) else None
        return out


def run_comparison(
    stories: list[Story],
    gold: GoldData | None,
    gateway_a,
    gateway_b,
    config_a: PipelineConfig,
    config_b: PipelineConfig,
    *,
    prompts_root=None,
) -> ComparisonReport:
    """Evaluate the identical corpus and question set under two configurations."""
    collision = config_a.digest() == config_b.digest()
    if collision:
        logger.warning("both comparison configs have digest %s; comparing a config to itself", config_a.digest())
    result_a = run_pipeline(stories, gateway_a, config_a, gold, prompts_root=prompts_root)
    result_b = run_pipeline(stories, gateway_b, config_b, gold, prompts_root=prompts_root)
    return ComparisonReport(
        config_a=config_a,
        config_b=config_b,
        report_a=result_a.report,
        report_b=result_b.report,
        digest_collision=collision,
    )
