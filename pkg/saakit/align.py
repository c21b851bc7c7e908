import itertools
import re
from enum import Enum

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import linear_sum_assignment

from .errors import AlignmentMismatchError, EmptyReferenceError
from .tags import SaaDoc, Turn, strip_tags, word_speaker_pairs


BRUTE_FORCE_MAX_DIM = 8

EDGE_PUNCT_RE = re.compile(r"^[\W_]+|[\W_]+$")


class NormConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lowercase: bool = True
    strip_punct: bool = True
    collapse_ws: bool = True

    @classmethod
    def noop(cls) -> "NormConfig":
        return cls(lowercase=False, strip_punct=False, collapse_ws=False)


class OpKind(str, Enum):
    CORRECT = "C"
    SUBSTITUTE = "S"
    INSERT = "I"
    DELETE = "D"


class EditOp(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: OpKind
    ref_idx: int | None = None
    hyp_idx: int | None = None

    @model_validator(mode="after")
    def _check_indices(self) -> "EditOp":
        has_ref = self.ref_idx is not None
        has_hyp = self.hyp_idx is not None
        expected = {
            OpKind.CORRECT: (True, True),
            OpKind.SUBSTITUTE: (True, True),
            OpKind.DELETE: (True, False),
            OpKind.INSERT: (False, True),
        }[self.kind]
        if (has_ref, has_hyp) != expected:
            raise ValueError(f"Bad indices for {self.kind.name} op")
        return self


class Alignment(BaseModel):
    model_config = ConfigDict(frozen=True)

    ops: tuple[EditOp, ...] = ()

    def count(self, kind: OpKind) -> int:
        return sum(1 for op in self.ops if op.kind == kind)

    @property
    def distance(self) -> int:
        return len(self.ops) - self.count(OpKind.CORRECT)


class AgreementMatrix(BaseModel):
    model_config = ConfigDict(frozen=True)

    ref_labels: tuple[int, ...]
    hyp_labels: tuple[int, ...]
    # rows follow ref_labels, columns follow hyp_labels
    counts: tuple[tuple[int, ...], ...]

    @classmethod
    def from_array(
        cls,
        counts: np.ndarray,
        ref_labels: tuple[int, ...] | None = None,
        hyp_labels: tuple[int, ...] | None = None,
    ) -> "AgreementMatrix":
        n_ref, n_hyp = counts.shape
        return cls(
            ref_labels=ref_labels or tuple(range(1, n_ref + 1)),
            hyp_labels=hyp_labels or tuple(range(1, n_hyp + 1)),
            counts=tuple(tuple(int(c) for c in row) for row in counts),
        )

    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64).reshape(
            len(self.ref_labels), len(self.hyp_labels)
        )


class SpeakerMapping(BaseModel):
    model_config = ConfigDict(frozen=True)

    # hyp relative index -> ref relative index
    pairs: dict[int, int] = {}
    agreement: int = 0


class ScoreReport(BaseModel):
    n_ref: int
    correct: int
    subs: int
    dels: int
    ins: int
    matched: int
    spk_err: int
    wer: float
    wder: float | None
    mapping: dict[int, int] = {}

    @model_validator(mode="after")
    def _check_counts(self) -> "ScoreReport":
        if self.matched != self.correct + self.subs:
            raise ValueError("matched must equal correct + subs")
        if not 0 <= self.spk_err <= self.matched:
            raise ValueError("spk_err out of range")
        return self

    @property
    def wder_defined(self) -> bool:
        return self.wder is not None


def normalize_word(word: str, cfg: NormConfig) -> str:
    if cfg.collapse_ws:
        word = " ".join(word.split())
    if cfg.lowercase:
        word = word.lower()
    if cfg.strip_punct:
        word = EDGE_PUNCT_RE.sub("", word)
    return word


def normalize(words: list[str], cfg: NormConfig) -> list[str]:
    normalized = (normalize_word(w, cfg) for w in words)
    return [w for w in normalized if w]


def normalize_doc(doc: SaaDoc, cfg: NormConfig) -> SaaDoc:
    turns = []
    for turn in doc.turns:
        words = normalize(list(turn.words), cfg)
        if words:
            turns.append(Turn(tag=turn.tag, words=tuple(words)))
    return SaaDoc(turns=tuple(turns), flags=doc.flags)


def align_words(ref: list[str], hyp: list[str]) -> Alignment:
    n, m = len(ref), len(hyp)
    cols = np.arange(m + 1, dtype=np.int64)
    hyp_arr = np.array(hyp, dtype=object)

    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[0] = cols
    for i in range(1, n + 1):
        mismatch = (hyp_arr != ref[i - 1]).astype(np.int64)
        row = np.empty(m + 1, dtype=np.int64)
        row[0] = i
        row[1:] = np.minimum(d[i - 1, :-1] + mismatch, d[i - 1, 1:] + 1)
        # insertions chain along the row: d[i, j] = min_k (row[k] + j - k)
        d[i] = np.minimum.accumulate(row - cols) + cols

    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            same = ref[i - 1] == hyp[j - 1]
            if d[i, j] == d[i - 1, j - 1] + (0 if same else 1):
                kind = OpKind.CORRECT if same else OpKind.SUBSTITUTE
                ops.append(EditOp(kind=kind, ref_idx=i - 1, hyp_idx=j - 1))
                i, j = i - 1, j - 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            ops.append(EditOp(kind=OpKind.DELETE, ref_idx=i - 1))
            i -= 1
            continue
        ops.append(EditOp(kind=OpKind.INSERT, hyp_idx=j - 1))
        j -= 1

    return Alignment(ops=tuple(reversed(ops)))


def wer(al: Alignment, n_ref: int) -> float:
    if n_ref == 0:
        raise EmptyReferenceError("WER is undefined for an empty reference")
    return al.distance / n_ref


def agreement_matrix(
    ref: SaaDoc, hyp: SaaDoc, al: Alignment
) -> AgreementMatrix:
    ref_pairs = word_speaker_pairs(ref)
    hyp_pairs = word_speaker_pairs(hyp)

    n_c = al.count(OpKind.CORRECT)
    n_s = al.count(OpKind.SUBSTITUTE)
    if (
        n_c + n_s + al.count(OpKind.DELETE) != len(ref_pairs)
        or n_c + n_s + al.count(OpKind.INSERT) != len(hyp_pairs)
    ):
        raise AlignmentMismatchError(
            f"Alignment does not cover {len(ref_pairs)} ref / "
            f"{len(hyp_pairs)} hyp words"
        )

    ref_labels = tuple(sorted({rel for _, rel in ref_pairs}))
    hyp_labels = tuple(sorted({rel for _, rel in hyp_pairs}))
    row_of = {rel: i for i, rel in enumerate(ref_labels)}
    col_of = {rel: j for j, rel in enumerate(hyp_labels)}

    counts = np.zeros((len(ref_labels), len(hyp_labels)), dtype=np.int64)
    for op in al.ops:
        if op.kind not in (OpKind.CORRECT, OpKind.SUBSTITUTE):
            continue
        assert op.ref_idx is not None and op.hyp_idx is not None
        r = row_of[ref_pairs[op.ref_idx][1]]
        h = col_of[hyp_pairs[op.hyp_idx][1]]
        counts[r, h] += 1

    return AgreementMatrix.from_array(counts, ref_labels, hyp_labels)


def _padded(m: AgreementMatrix) -> np.ndarray:
    counts = m.array()
    n = max(counts.shape)
    padded = np.zeros((n, n), dtype=np.int64)
    padded[: counts.shape[0], : counts.shape[1]] = counts
    return padded


def _best_total(counts: np.ndarray) -> int:
    if counts.size == 0:
        return 0
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return int(counts[rows, cols].sum())


def _to_mapping(
    m: AgreementMatrix, perm: list[int], padded: np.ndarray
) -> SpeakerMapping:
    pairs = {}
    for h, r in enumerate(perm):
        if h < len(m.hyp_labels) and r < len(m.ref_labels):
            pairs[m.hyp_labels[h]] = m.ref_labels[r]
    agreement = int(sum(padded[r, h] for h, r in enumerate(perm)))
    return SpeakerMapping(pairs=pairs, agreement=agreement)


def optimal_mapping(m: AgreementMatrix) -> SpeakerMapping:
    if not m.ref_labels or not m.hyp_labels:
        return SpeakerMapping()
    padded = _padded(m)
    n = padded.shape[0]
    best = _best_total(padded)

    # fix hyp columns left to right, each to the lowest ref row that still
    # admits an optimal completion
    perm: list[int] = []
    free_rows = list(range(n))
    total = 0
    for h in range(n):
        rest_cols = list(range(h + 1, n))
        for r in free_rows:
            others = [x for x in free_rows if x != r]
            rest = padded[np.ix_(others, rest_cols)]
            if total + padded[r, h] + _best_total(rest) == best:
                perm.append(r)
                free_rows = others
                total += int(padded[r, h])
                break
        else:
            raise AssertionError("No optimal completion found")

    return _to_mapping(m, perm, padded)


def brute_force_mapping(m: AgreementMatrix) -> SpeakerMapping:
    n_dim = max(len(m.ref_labels), len(m.hyp_labels))
    if n_dim > BRUTE_FORCE_MAX_DIM:
        raise ValueError(
            f"Brute force is limited to {BRUTE_FORCE_MAX_DIM} speakers per "
            f"side, got {n_dim}"
        )
    if not m.ref_labels or not m.hyp_labels:
        return SpeakerMapping()
    padded = _padded(m)
    n = padded.shape[0]
    cols = np.arange(n)

    best_perm: tuple[int, ...] | None = None
    best = -1
    for perm in itertools.permutations(range(n)):
        total = int(padded[list(perm), cols].sum())
        if total > best:
            best, best_perm = total, perm
    assert best_perm is not None
    return _to_mapping(m, list(best_perm), padded)


def mapping_agreement(m: AgreementMatrix, mapping: SpeakerMapping) -> int:
    counts = m.array()
    row_of = {rel: i for i, rel in enumerate(m.ref_labels)}
    col_of = {rel: j for j, rel in enumerate(m.hyp_labels)}
    return int(
        sum(counts[row_of[r], col_of[h]] for h, r in mapping.pairs.items())
    )


def identity_mapping(m: AgreementMatrix) -> SpeakerMapping:
    pairs = {h: h for h in m.hyp_labels if h in m.ref_labels}
    mapping = SpeakerMapping(pairs=pairs)
    return mapping.model_copy(
        update={"agreement": mapping_agreement(m, mapping)}
    )


def score_pair(
    ref: SaaDoc, hyp: SaaDoc, cfg: NormConfig | None = None
) -> ScoreReport:
    cfg = cfg or NormConfig()
    ref = normalize_doc(ref, cfg)
    hyp = normalize_doc(hyp, cfg)

    ref_words = strip_tags(ref)
    if not ref_words:
        raise EmptyReferenceError("Reference is empty after normalization")
    al = align_words(ref_words, strip_tags(hyp))
    mapping = optimal_mapping(agreement_matrix(ref, hyp, al))

    correct = al.count(OpKind.CORRECT)
    subs = al.count(OpKind.SUBSTITUTE)
    matched = correct + subs
    spk_err = matched - mapping.agreement
    if matched == 0:
        logger.warning("No matched words, WDER undefined")

    return ScoreReport(
        n_ref=len(ref_words),
        correct=correct,
        subs=subs,
        dels=al.count(OpKind.DELETE),
        ins=al.count(OpKind.INSERT),
        matched=matched,
        spk_err=spk_err,
        wer=wer(al, len(ref_words)),
        wder=spk_err / matched if matched else None,
        mapping=mapping.pairs,
    )
