"""Inference pipeline and metrics.

Retrieval works page by page: each page of a document is fused with the
question, encoded, and scored; the top-1 page is then fed through the full
encoder-decoder to generate the answer. Pages are streamed one at a time,
so peak memory stays bounded by a single page's pipeline no matter how
long the document is.

Answer quality uses normalized Levenshtein similarity averaged over
questions (scores whose normalized distance reaches the threshold count
as zero); retrieval quality uses top-1 page accuracy.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np

from .data import Dataset, Document, QASample
from .model import EncoderFeature, VqaModel
from .render import fuse_question_page
from .scorer import SelfAttentionScorer

ANLS_TAU = 0.5


# ----------------------------------------------------------------------------
# String metrics
# ----------------------------------------------------------------------------

def levenshtein(a: str, b: str) -> int:
    """Minimum single-character insertions, deletions and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _normalize_answer(s: str) -> str:
    return s.strip().lower()


def anls_single(pred: str, gts: Iterable[str], tau: float = ANLS_TAU) -> float:
    """Best normalized-similarity match of a prediction against ground truths."""
    gts = list(gts)
    if not gts:
        raise ValueError("at least one ground-truth answer is required")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p = _normalize_answer(pred)
    best = 0.0
    for gt in gts:
        g = _normalize_answer(gt)
        denom = max(len(p), len(g))
        nl = 0.0 if denom == 0 else levenshtein(p, g) / denom
        best = max(best, 1.0 - nl if nl < tau else 0.0)
    return best


def anls(per_question_scores: Iterable[float]) -> float:
    scores = list(per_question_scores)
    if not scores:
        raise ValueError("cannot average an empty score list")
    return float(np.mean(scores))


def page_accuracy(predicted_pages: Iterable[int], gt_pages: Iterable[int]) -> float:
    pred = list(predicted_pages)
    gold = list(gt_pages)
    if not pred or len(pred) != len(gold):
        raise ValueError("page lists must be equal-length and non-empty")
    return 100.0 * sum(p == g for p, g in zip(pred, gold)) / len(pred)


# ----------------------------------------------------------------------------
# Retrieval pipeline
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PageScores:
    doc_id: str
    scores: tuple[float, ...]


def _encode_page(question: str, doc: Document, index: int, model: VqaModel) -> EncoderFeature:
    img = doc.load_page(index)
    grid = fuse_question_page(
        question, img, patch_size=model.cfg.patch_size, max_patches=model.cfg.max_patches
    )
    return model.encode_grid(grid)


def iter_page_scores(
    question: str, doc: Document, model: VqaModel, scorer: SelfAttentionScorer
) -> Iterator[float]:
    """Score pages one at a time; only one page's buffers are alive at once."""
    for index in range(doc.n_pages):
        yield scorer.score_value(_encode_page(question, doc, index, model))


def score_document(
    question: str, doc: Document, model: VqaModel, scorer: SelfAttentionScorer
) -> PageScores:
    return PageScores(doc_id=doc.doc_id, scores=tuple(iter_page_scores(question, doc, model, scorer)))


def top1(scores: PageScores | Iterable[float]) -> int:
    values = scores.scores if isinstance(scores, PageScores) else tuple(scores)
    if not values:
        raise ValueError("cannot take top-1 of an empty score list")
    return int(np.argmax(values))  # ties resolve to the lowest index


def answer_question(
    question: str,
    doc: Document,
    model: VqaModel,
    scorer: SelfAttentionScorer,
    max_answer_len: int | None = None,
) -> tuple[int, str]:
    """Retrieve the best page, then decode the answer from that page alone."""
    if doc.n_pages == 1:
        best = 0
    else:
        best_idx, best_score = 0, -1.0
        for index, value in enumerate(iter_page_scores(question, doc, model, scorer)):
            if value > best_score:
                best_idx, best_score = index, value
        best = best_idx
    feature = _encode_page(question, doc, best, model)
    return best, model.generate_answer(feature, max_answer_len)


# ----------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrantCounts:
    """Counts over (page correct?, answer exact?) cells, in the order
    (ok, exact), (ok, partial), (bad, exact), (bad, partial)."""

    page_ok_exact: int
    page_ok_partial: int
    page_bad_exact: int
    page_bad_partial: int

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.page_ok_exact, self.page_ok_partial, self.page_bad_exact, self.page_bad_partial)

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def percentages(self) -> tuple[float, float, float, float]:
        return tuple(round(100.0 * c / self.total, 2) for c in self.counts)


def quadrant_report(per_question: Iterable[tuple[bool, float]]) -> QuadrantCounts:
    cells = [0, 0, 0, 0]
    n = 0
    for page_correct, anls_value in per_question:
        exact = anls_value >= 1.0
        cells[(0 if page_correct else 2) + (0 if exact else 1)] += 1
        n += 1
    if n == 0:
        raise ValueError("quadrant report needs at least one question")
    return QuadrantCounts(*cells)


def page_histogram(dataset: Dataset) -> dict[int, int]:
    return dict(Counter(doc.n_pages for doc in dataset.documents.values()))


@dataclass(frozen=True)
class MetricsReport:
    anls: float
    page_accuracy_pct: float
    quadrants: QuadrantCounts
    page_histogram: dict[int, int]
    n_questions: int

    def to_dict(self) -> dict:
        return {
            "anls": self.anls,
            "page_accuracy_pct": self.page_accuracy_pct,
            "n_questions": self.n_questions,
            "quadrants": {
                "counts": list(self.quadrants.counts),
                "percentages": list(self.quadrants.percentages),
                "order": ["page_ok_exact", "page_ok_partial", "page_bad_exact", "page_bad_partial"],
            },
            "page_histogram": {str(k): v for k, v in sorted(self.page_histogram.items())},
        }

    def table(self) -> str:
        q = self.quadrants
        lines = [
            f"questions            {self.n_questions}",
            f"ANLS                 {self.anls:.4f}",
            f"page accuracy (%)    {self.page_accuracy_pct:.2f}",
            "quadrants (count / %):",
        ]
        labels = ("page ok, answer exact", "page ok, answer partial",
                  "page bad, answer exact", "page bad, answer partial")
        for label, count, pct in zip(labels, q.counts, q.percentages):
            lines.append(f"  {label:<26} {count:>6} / {pct:.2f}")
        lines.append("page histogram (pages: documents):")
        for pages, docs in sorted(self.page_histogram.items()):
            lines.append(f"  {pages:>4}: {docs}")
        return "\n".join(lines)


def evaluate_dataset(
    dataset: Dataset,
    model: VqaModel,
    scorer: SelfAttentionScorer,
    max_answer_len: int | None = None,
    tau: float = ANLS_TAU,
) -> tuple[list[dict], MetricsReport]:
    """Run the full pipeline over a dataset; one result record per question."""
    if not dataset.questions:
        raise ValueError("cannot evaluate an empty dataset")
    records: list[dict] = []
    for sample in dataset.questions:
        doc = dataset.document_for(sample)
        pred_page, pred_answer = answer_question(sample.question, doc, model, scorer, max_answer_len)
        score = anls_single(pred_answer, sample.answers, tau)
        records.append(
            {
                "question_id": sample.question_id,
                "doc_id": sample.doc_id,
                "pred_page": pred_page,
                "gold_page": sample.answer_page_index,
                "pred_answer": pred_answer,
                "anls": score,
                "doc_pages": doc.n_pages,
            }
        )
    report = report_from_records(records, page_histogram(dataset))
    return records, report


def report_from_records(records: list[dict], histogram: dict[int, int] | None = None) -> MetricsReport:
    """Build a MetricsReport from result records (as emitted by evaluate_dataset)."""
    if not records:
        raise ValueError("no result records")
    if histogram is None:
        pages_by_doc = {r["doc_id"]: r["doc_pages"] for r in records}
        histogram = dict(Counter(pages_by_doc.values()))
    per_question = [(r["pred_page"] == r["gold_page"], r["anls"]) for r in records]
    return MetricsReport(
        anls=anls([r["anls"] for r in records]),
        page_accuracy_pct=page_accuracy([r["pred_page"] for r in records], [r["gold_page"] for r in records]),
        quadrants=quadrant_report(per_question),
        page_histogram=histogram,
        n_questions=len(records),
    )
