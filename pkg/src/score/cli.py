"""Command-line entry point wiring the pipeline over a project directory.

A project root holds config.json plus stories/, summaries/, states/,
index/, cache/, reports/, and prompts/. Commands create what is missing,
never write outside the root, and exit with: 0 success, 1 usage error,
2 validation error, 3 gateway/transport error, 4 replay cache miss.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import prompts as prompt_templates
from .chunking import segment
from .errors import (
    ContractError,
    GatewayReplyError,
    PersistenceError,
    ScoreError,
    StoryParseError,
    TransportError,
    UncachedRequestError,
    ValidationError,
)
from .evaluator import Ablations, PipelineConfig, run_comparison, run_pipeline
from .fuzz import FuzzSpec, generate_corpus, score_detection, truth_from_dict, truth_to_dict
from .gateway import GatewayConfig, LlmGateway
from .index import FlatIndex
from .jsonio import canonical_bytes, canonical_dumps, write_if_changed
from .retrieval import RetrievalConfig, records_from_dict, retrieve_for_query
from .story import Story, parse_story, serialize_story
from .summarize import (
    build_retrieval_document,
    summaries_from_dict,
    summaries_to_dict,
    summarize_episode,
)
from .tracker import detect_story_errors, states_to_dict, story_timelines
from .evaluator import answer_query

logger = logging.getLogger(__name__)

_DIRS = ("stories", "summaries", "states", "index", "cache", "reports", "prompts")


class UsageError(ScoreError):
    """Bad command line; maps to exit code 1."""


@dataclass
class Project:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def dir(self, name: str) -> Path:
        return self.root / name

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def ground_truth_path(self) -> Path:
        return self.root / "ground_truth.json"

    def ensure(self) -> None:
        """Create missing directories, default config, and default prompts."""
        self.root.mkdir(parents=True, exist_ok=True)
        for name in _DIRS:
            self.dir(name).mkdir(exist_ok=True)
        if not self.config_path.exists():
            default = {
                "gateway": GatewayConfig().to_dict(),
                "retrieval": RetrievalConfig().to_dict(),
                "granularity": "summary",
            }
            write_if_changed(self.config_path, canonical_bytes(default))
        for name, text in prompt_templates.default_templates().items():
            target = self.dir("prompts") / f"{name}.txt"
            if not target.exists():
                target.write_text(text, "utf-8")

    @contextlib.contextmanager
    def lock(self):
        """One command at a time per project root."""
        path = self.root / ".score.lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValidationError("project", f"locked by another process ({path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            with contextlib.suppress(OSError):
                os.unlink(path)

    def load_stories(self) -> list[Story]:
        stories_dir = self.dir("stories")
        manifest = stories_dir / "corpus.json"
        if manifest.exists():
            names = json.loads(manifest.read_text("utf-8"))["files"]
            paths = [stories_dir / name for name in names]
        else:
            paths = [p for p in sorted(stories_dir.glob("*.json")) if p.name != "corpus.json"]
        stories = [parse_story(path.read_bytes()) for path in paths]
        ids = [s.story_id for s in stories]
        if len(set(ids)) != len(ids):
            raise ValidationError("story_id", "duplicate story_id in corpus")
        if not stories:
            raise ValidationError("stories", "no stories ingested (run `score ingest` or `score fuzz` first)")
        return stories

    def load_summaries(self) -> dict[str, list]:
        out = {}
        for path in sorted(self.dir("summaries").glob("*.json")):
            story_id, summaries = summaries_from_dict(json.loads(path.read_text("utf-8")))
            out[story_id] = summaries
        return out

    def load_gold(self):
        if not self.ground_truth_path.exists():
            return None, None
        truth = truth_from_dict(json.loads(self.ground_truth_path.read_text("utf-8")))
        return truth, truth.to_gold()

    def corpus_digest(self, stories: list[Story]) -> str:
        h = hashlib.sha256()
        for story in sorted(stories, key=lambda s: s.story_id):
            h.update(serialize_story(story))
        return h.hexdigest()[:16]


def _load_config(project: Project, args) -> tuple[GatewayConfig, RetrievalConfig, str]:
    raw = {}
    if project.config_path.exists():
        try:
            raw = json.loads(project.config_path.read_text("utf-8"))
        except json.JSONDecodeError as e:
            raise ValidationError("config.json", f"malformed JSON: {e}") from e
    try:
        gateway_cfg = GatewayConfig(**raw.get("gateway", {}))
        retrieval_cfg = RetrievalConfig(**raw.get("retrieval", {}))
    except TypeError as e:
        raise ValidationError("config.json", f"unknown config field: {e}") from e
    granularity = raw.get("granularity", "summary")

    # explicit flags override file values
    overrides = {}
    for flag, field_name in (
        ("backend", "backend"),
        ("model", "model_name"),
        ("cache_mode", "cache_mode"),
        ("base_url", "base_url"),
        ("embed_dim", "embed_dim"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if overrides:
        gateway_cfg = replace(gateway_cfg, **overrides)

    r_overrides = {}
    if getattr(args, "top_n", None) is not None:
        r_overrides["top_n"] = args.top_n
    if getattr(args, "tau", None) is not None:
        r_overrides["sentiment_tolerance"] = args.tau
    if r_overrides:
        retrieval_cfg = replace(retrieval_cfg, **r_overrides)
    if getattr(args, "granularity", None) is not None:
        granularity = args.granularity
    return gateway_cfg, retrieval_cfg, granularity


def _gateway(project: Project, cfg: GatewayConfig) -> LlmGateway:
    return LlmGateway(cfg, cache_dir=project.dir("cache"))


def _parse_ablations(spec: str | None) -> Ablations:
    if not spec:
        return Ablations()
    valid = {"tracking", "summary", "retrieval", "sentiment"}
    disabled = {part.strip() for part in spec.split(",") if part.strip()}
    unknown = disabled - valid
    if unknown:
        raise UsageError(f"unknown ablation(s): {', '.join(sorted(unknown))}")
    return Ablations(**{name: name not in disabled for name in valid})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(project: Project, args) -> int:
    project.ensure()
    count = 0
    for file_name in args.files:
        data = Path(file_name).read_bytes()
        story = parse_story(data)
        target = project.dir("stories") / f"{story.story_id}.json"
        payload = serialize_story(story)
        if target.exists() and target.read_bytes() != payload:
            raise ValidationError("story_id", f"duplicate story_id {story.story_id!r} already in corpus")
        write_if_changed(target, payload)
        count += 1
    print(f"ingested {count} story file(s) into {project.dir('stories')}")
    return 0


def cmd_fuzz(project: Project, args) -> int:
    project.ensure()
    spec = FuzzSpec(
        seed=args.seed,
        n_stories=args.stories,
        violation_rate=args.rate,
        explained_rate=args.explained_rate,
        episodes_per_story=tuple(args.episodes),
        items_per_story=tuple(args.items),
    )
    stories, truth = generate_corpus(spec)
    for story in stories:
        write_if_changed(project.dir("stories") / f"{story.story_id}.json", serialize_story(story))
    write_if_changed(project.ground_truth_path, canonical_bytes(truth_to_dict(truth)))
    print(
        f"generated {len(stories)} stories, {truth.total_planted()} planted errors, "
        f"{len(truth.qa)} gold questions (seed={spec.seed})"
    )
    return 0


def cmd_summarize(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, _, _ = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    stories = project.load_stories()
    written = skipped = 0
    for story in stories:
        target = project.dir("summaries") / f"{story.story_id}.json"
        if target.exists() and not args.force:
            skipped += 1
            continue

        def summarize_one(episode):
            return summarize_episode(
                episode, list(story.key_items), gateway,
                story_id=story.story_id, prompts_root=project.dir("prompts"),
            )

        if gateway_cfg.backend == "remote" and gateway_cfg.max_parallel > 1:
            # episodes are independent; the gateway's semaphore caps in-flight calls
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=gateway_cfg.max_parallel) as pool:
                summaries = list(pool.map(summarize_one, story.episodes))
        else:
            summaries = [summarize_one(ep) for ep in story.episodes]
        write_if_changed(target, canonical_bytes(summaries_to_dict(story.story_id, summaries)))
        written += 1
    print(f"summarized {written} story(ies), {skipped} already present (use --force to redo)")
    return 0


def cmd_track(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, _, _ = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    stories = project.load_stories()
    reported = {}
    total_errors = 0
    for story in stories:
        timelines = story_timelines(story, gateway)
        errors = detect_story_errors(timelines)
        reported[story.story_id] = errors
        total_errors += len(errors)
        write_if_changed(
            project.dir("states") / f"{story.story_id}.json",
            canonical_bytes(states_to_dict(story.story_id, timelines, errors)),
        )
    print(f"tracked {len(stories)} story(ies), {total_errors} continuity error(s) detected")
    truth, _ = project.load_gold()
    if truth is not None:
        score = score_detection(reported, truth)
        print(
            f"detection vs ground truth: precision={score.precision:.3f} "
            f"recall={score.recall:.3f} f1={score.f1:.3f}"
        )
    return 0


def cmd_index(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, _, granularity = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    stories = project.load_stories()
    summaries = project.load_summaries()
    missing = [s.story_id for s in stories if s.story_id not in summaries]
    if missing:
        raise ValidationError("summaries", f"not built for: {', '.join(missing)} (run `score summarize`)")

    index = FlatIndex(gateway_cfg.embed_dim)
    records = {}
    texts: list[str] = []
    rows: list[tuple[str, str, str, int]] = []
    for story in stories:
        sentiments = {s.episode_index: s.sentiment.value for s in summaries[story.story_id]}
        if granularity == "summary":
            for summary in summaries[story.story_id]:
                doc = build_retrieval_document(summary)
                rows.append((doc.doc_id, "summary", story.story_id, doc.episode_index))
                texts.append(doc.text)
                records[doc.doc_id] = {
                    "story_id": story.story_id,
                    "episode_index": doc.episode_index,
                    "sentiment": sentiments[doc.episode_index],
                    "text": doc.text,
                }
        elif granularity == "chunk":
            for ep in story.episodes:
                for chunk in segment(ep, story_id=story.story_id):
                    rows.append((chunk.chunk_id, "chunk", story.story_id, ep.index))
                    texts.append(chunk.text)
                    records[chunk.chunk_id] = {
                        "story_id": story.story_id,
                        "episode_index": ep.index,
                        "sentiment": sentiments[ep.index],
                        "text": chunk.text,
                    }
        else:
            raise UsageError(f"unknown granularity {granularity!r}")

    for (entry_id, kind, story_id, episode_index), vector in zip(rows, gateway.embed(texts)):
        index.add(entry_id, vector, kind=kind, story_id=story_id, episode_index=episode_index)
    index.freeze()
    base = project.dir("index") / granularity
    index.save(base)
    write_if_changed(base.with_suffix(".records.json"), canonical_bytes(records))
    print(f"indexed {len(index)} {granularity} unit(s) -> {base}.vec")
    return 0


def _pipeline_config(gateway_cfg, retrieval_cfg, ablations, granularity) -> PipelineConfig:
    return PipelineConfig(
        gateway=gateway_cfg,
        retrieval=retrieval_cfg,
        ablations=ablations,
        granularity=granularity,
    )


def _report_payload(config: PipelineConfig, result) -> dict:
    from .tracker import error_to_dict

    return {
        "config": config.to_dict(),
        "config_digest": config.digest(),
        "disabled_modules": config.ablations.disabled(),
        "facet_scale": {"min": 1, "max": 5, "rescale": "affine [1,5] -> [0,100]"},
        "metrics": result.report.to_dict(),
        "evaluations": [
            {
                "story_id": e.story_id,
                "episode_index": e.episode_index,
                "facet_scores": e.facet_scores,
                "rationale": e.rationale,
                "continuity_errors_cited": [error_to_dict(err) for err in e.continuity_errors_cited],
                "context_digest": e.context_digest,
                "item_states": {k: v.value for k, v in sorted(e.item_states.items())},
            }
            for e in result.evaluations
        ],
        "qa": [
            {
                "story_id": q.story_id,
                "question": q.question,
                "answer": q.answer,
                "supporting_episodes": [list(ref) for ref in q.supporting_episodes],
                "correct": q.correct,
            }
            for q in result.qa_results
        ],
    }


def cmd_evaluate(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, retrieval_cfg, granularity = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    ablations = _parse_ablations(args.ablate)
    stories = project.load_stories()
    _, gold = project.load_gold()

    episode_filter = None
    if args.episode:
        story_id, sep, idx = args.episode.rpartition("#")
        if not sep or not idx.isdigit():
            raise UsageError(f"--episode expects STORY#INDEX, got {args.episode!r}")
        episode_filter = (story_id, int(idx))
        stories = [s for s in stories if s.story_id == story_id]
        if not stories:
            raise ValidationError("episode", f"story {story_id!r} not in corpus")

    config = _pipeline_config(gateway_cfg, retrieval_cfg, ablations, granularity)
    result = run_pipeline(stories, gateway, config, gold, prompts_root=project.dir("prompts"))
    if episode_filter:
        result.evaluations = [
            e for e in result.evaluations
            if (e.story_id, e.episode_index) == episode_filter
        ]
        result.qa_results = []
        if not result.evaluations:
            raise ValidationError("episode", f"episode {episode_filter[1]} not in story {episode_filter[0]!r}")

    run_id = hashlib.sha256(
        (config.digest() + project.corpus_digest(stories) + str(episode_filter)).encode()
    ).hexdigest()[:12]
    payload = _report_payload(config, result)
    payload["run_id"] = run_id
    target = project.dir("reports") / f"{run_id}.json"
    write_if_changed(target, canonical_bytes(payload))

    metrics = result.report
    print(f"run {run_id}: {len(result.evaluations)} evaluation(s), {len(result.qa_results)} question(s)")
    for name in ("consistency", "coherence", "item_status", "complex_qa"):
        value = getattr(metrics, name)
        print(f"  {name}: " + (f"{value:.2f}" if value is not None else "n/a"))
    if ablations.disabled():
        print(f"  disabled modules: {', '.join(ablations.disabled())}")
    print(f"report written to {target}")
    return 0


def cmd_ask(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, retrieval_cfg, granularity = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    base = project.dir("index") / granularity
    if not base.with_suffix(".vec").exists():
        raise ValidationError("index", "index not built (run `score index` first)")
    index = FlatIndex.load(base)
    records = records_from_dict(json.loads(base.with_suffix(".records.json").read_text("utf-8")))

    if args.story and not any(r.story_id == args.story for r in records.values()):
        raise ValidationError("story", f"story {args.story!r} not in index")
    bundle = retrieve_for_query(
        args.question, index, records, retrieval_cfg, gateway, restrict_story=args.story
    )
    result = answer_query(args.question, bundle, gateway, prompts_root=project.dir("prompts"))
    print(
        canonical_dumps(
            {
                "question": result.question,
                "answer": result.answer,
                "supporting_episodes": [list(ref) for ref in result.supporting_episodes],
                "correct": result.correct,
            },
            indent=2,
        )
    )
    return 0


def cmd_compare(project: Project, args) -> int:
    project.ensure()
    gateway_cfg, retrieval_cfg, granularity = _load_config(project, args)
    gateway = _gateway(project, gateway_cfg)
    stories = project.load_stories()
    _, gold = project.load_gold()

    config_a = _pipeline_config(gateway_cfg, retrieval_cfg, Ablations(), granularity)
    if args.baseline:
        ablations_b = Ablations.baseline()
    else:
        ablations_b = _parse_ablations(args.ablate)
    config_b = _pipeline_config(gateway_cfg, retrieval_cfg, ablations_b, granularity)

    comparison = run_comparison(
        stories, gold, gateway, gateway, config_a, config_b, prompts_root=project.dir("prompts")
    )
    run_id = hashlib.sha256(
        (config_a.digest() + config_b.digest() + project.corpus_digest(stories)).encode()
    ).hexdigest()[:12]
    payload = {
        "run_id": run_id,
        "kind": "comparison",
        "config_a": config_a.to_dict(),
        "config_b": config_b.to_dict(),
        "digest_collision": comparison.digest_collision,
        "metrics_a": comparison.report_a.to_dict(),
        "metrics_b": comparison.report_b.to_dict(),
        "deltas": comparison.deltas(),
    }
    target = project.dir("reports") / f"{run_id}.compare.json"
    write_if_changed(target, canonical_bytes(payload))

    print(f"comparison {run_id} (a=full, b={'baseline' if args.baseline else ablations_b.disabled() or 'full'})")
    for name, delta in comparison.deltas().items():
        a = getattr(comparison.report_a, name)
        b = getattr(comparison.report_b, name)
        fmt = lambda v: f"{v:.2f}" if v is not None else "n/a"
        print(f"  {name}: a={fmt(a)} b={fmt(b)} delta={fmt(delta)}")
    print(f"report written to {target}")
    return 0


def cmd_report(project: Project, args) -> int:
    reports_dir = project.dir("reports")
    for candidate in (reports_dir / f"{args.run_id}.json", reports_dir / f"{args.run_id}.compare.json"):
        if candidate.exists():
            payload = json.loads(candidate.read_text("utf-8"))
            if args.markdown:
                print(_render_markdown(payload))
            else:
                print(canonical_dumps(payload, indent=2))
            return 0
    raise ValidationError("run_id", f"no report named {args.run_id!r} in {reports_dir}")


def _render_markdown(payload: dict) -> str:
    def fmt(value):
        return "n/a" if value is None else f"{value:.2f}"

    lines = [f"# Run {payload.get('run_id', '?')}", ""]
    if payload.get("kind") == "comparison":
        lines += ["| metric | a | b | delta |", "|---|---|---|---|"]
        for name in ("consistency", "coherence", "item_status", "complex_qa"):
            lines.append(
                f"| {name} | {fmt(payload['metrics_a'][name])} | "
                f"{fmt(payload['metrics_b'][name])} | {fmt(payload['deltas'][name])} |"
            )
        return "\n".join(lines)

    metrics = payload["metrics"]
    lines += ["| metric | value |", "|---|---|"]
    for name in ("consistency", "coherence", "item_status", "complex_qa"):
        lines.append(f"| {name} | {fmt(metrics[name])} |")
    disabled = payload.get("disabled_modules") or []
    if disabled:
        lines += ["", f"Disabled modules: {', '.join(disabled)}"]
    lines += ["", f"Evaluations: {len(payload.get('evaluations', []))}", f"Questions: {len(payload.get('qa', []))}"]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="score", description="Narrative-coherence engine over a project directory.")
    parser.add_argument("--project", default=".", help="project root (default: current directory)")
    parser.add_argument("--backend", choices=["mock", "remote"], help="override gateway backend")
    parser.add_argument("--model", help="override model name")
    parser.add_argument("--base-url", dest="base_url", help="override remote base URL")
    parser.add_argument("--cache-mode", dest="cache_mode", choices=["off", "record", "replay"])
    parser.add_argument("--embed-dim", dest="embed_dim", type=int, help="override embedding dimension")
    parser.add_argument("--top-n", dest="top_n", type=int, help="override retrieval top N")
    parser.add_argument("--tau", dest="tau", type=float, help="override sentiment tolerance")
    parser.add_argument("-v", "--verbose", action="store_true", help="INFO-level logging")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate story files and copy them into stories/")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fuzz", help="generate a synthetic corpus with ground truth")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--stories", type=int, default=10)
    p.add_argument("--rate", type=float, default=0.3, help="violation rate")
    p.add_argument("--explained-rate", type=float, default=0.2)
    p.add_argument("--episodes", type=int, nargs=2, default=[6, 12], metavar=("LO", "HI"))
    p.add_argument("--items", type=int, nargs=2, default=[2, 4], metavar=("LO", "HI"))
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("summarize", help="write per-episode summaries")
    p.add_argument("--force", action="store_true", help="re-summarize existing stories")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("track", help="extract item states, detect continuity errors")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("index", help="build and freeze the vector index")
    p.add_argument("--granularity", choices=["summary", "chunk"])
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("evaluate", help="run the evaluation pipeline, write a report")
    p.add_argument("--episode", help="restrict to one episode, format STORY#INDEX")
    p.add_argument("--ablate", help="comma-separated modules to disable: tracking,summary,retrieval,sentiment")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ask", help="answer a question over the indexed corpus")
    p.add_argument("question")
    p.add_argument("--story", help="restrict retrieval to one story")
    p.add_argument("--granularity", choices=["summary", "chunk"])
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("compare", help="paired run: full pipeline vs baseline or ablation")
    p.add_argument("--baseline", action="store_true", help="plain model: no tracking, summaries, or retrieval")
    p.add_argument("--ablate", help="modules to disable on side b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="render a stored report")
    p.add_argument("run_id")
    p.add_argument("--markdown", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    project = Project(root=Path(args.project))
    project.root.mkdir(parents=True, exist_ok=True)  # the lock file lives here
    try:
        with project.lock():
            return args.func(project, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except UncachedRequestError as e:
        print(f"replay cache miss: {e}", file=sys.stderr)
        return 4
    except (TransportError, GatewayReplyError) as e:
        print(f"gateway error: {e}", file=sys.stderr)
        return 3
    except (ValidationError, StoryParseError, PersistenceError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
