"""Caption generation: greedy decoding and beam search over a trained model.

Decoding runs with no Graph active, so every step is a plain forward
pass. Generation starts from <start> and stops at <end> or after
max_len emission steps; <pad> and <start> are never candidate
emissions. Scores are summed raw log-probabilities of the emitted
tokens, <end> included when a hypothesis terminates; there is no length
normalization unless a penalty is requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from refcap.data import END, PAD, START, FeatureRecord, Vocabulary
from refcap.decoder import AttentionTrace, DecoderState
from refcap.model import CaptionModel, FeatureContext


@dataclass
class DecodeResult:
    """One decoded caption with its raw score and attention trace."""

    token_ids: list[int]          # emitted real tokens, specials stripped
    tokens: list[str]
    log_prob: float
    terminated: bool              # emitted <end> before the step cap
    trace: AttentionTrace
    beam_size: int = 1

    def to_json(self, image_id: str, caption_key: str = "caption") -> dict:
        return {"image_id": image_id, caption_key: " ".join(self.tokens),
                "score": self.log_prob, "beam_size": self.beam_size}


def _masked_log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.log(probs.astype(np.float64))
    logp[PAD] = -np.inf
    logp[START] = -np.inf
    return logp


def _decode_steps(model: CaptionModel, max_len: int | None) -> int:
    if max_len is None:
        return model.config.max_len + 2
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    return max_len


def greedy_decode(model: CaptionModel, vocab: Vocabulary, record: FeatureRecord,
                  max_len: int | None = None) -> DecodeResult:
    """Feed the argmax token back in until <end> or the step cap.

    Argmax ties break toward the lower token id. The trace keeps one
    row per emitted real token (the <end> emission row is dropped so
    rows align with the returned tokens).
    """
    steps = _decode_steps(model, max_len)
    ctx = model.prepare_features(record)
    state = model.initial_state()
    trace = AttentionTrace()
    emitted: list[int] = []
    log_prob = 0.0
    token = START
    terminated = False
    for _ in range(steps):
        probs, state, alpha_vis, alpha_ref = model.step(state, token, ctx)
        logp = _masked_log_probs(probs.values[0])
        token = int(np.argmax(logp))
        log_prob += logp[token]
        if token == END:
            terminated = True
            break
        emitted.append(token)
        trace.append(None if alpha_vis is None else alpha_vis.values,
                     None if alpha_ref is None else alpha_ref.values)
    return DecodeResult(token_ids=emitted,
                        tokens=[vocab.token(i) for i in emitted],
                        log_prob=float(log_prob), terminated=terminated,
                        trace=trace, beam_size=1)


@dataclass
class _Hypothesis:
    tokens: list[int]
    score: float
    state: DecoderState
    next_input: int
    trace: AttentionTrace = field(default_factory=AttentionTrace)


def beam_search(model: CaptionModel, vocab: Vocabulary, record: FeatureRecord,
                beam_size: int = 5, max_len: int | None = None,
                length_penalty: float = 0.0) -> list[DecodeResult]:
    """Breadth-limited best-first search over summed log-probabilities.

    At each step every live hypothesis expands over the whole emission
    vocabulary; the top beam_size expansions survive. Expansions that
    emitted <end> retire to the finished pool and stop consuming beam
    slots. Ranking ties break toward the lexicographically smaller
    token sequence, which makes runs reproducible. With beam_size at
    least the number of possible sequences, nothing is ever pruned and
    the search is exhaustive.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    steps = _decode_steps(model, max_len)
    ctx = model.prepare_features(record)
    live = [_Hypothesis(tokens=[], score=0.0, state=model.initial_state(),
                        next_input=START)]
    finished: list[DecodeResult] = []

    def retire(hyp: _Hypothesis, terminated: bool):
        finished.append(DecodeResult(
            token_ids=hyp.tokens, tokens=[vocab.token(i) for i in hyp.tokens],
            log_prob=hyp.score, terminated=terminated, trace=hyp.trace,
            beam_size=beam_size))

    for _ in range(steps):
        if not live:
            break
        expansions: list[tuple[float, list[int], _Hypothesis, DecoderState,
                               object, object, int]] = []
        for hyp in live:
            probs, new_state, alpha_vis, alpha_ref = model.step(
                hyp.state, hyp.next_input, ctx)
            logp = _masked_log_probs(probs.values[0])
            for token in range(len(logp)):
                if not np.isfinite(logp[token]):
                    continue
                expansions.append((hyp.score + logp[token], hyp.tokens + [token],
                                   hyp, new_state, alpha_vis, alpha_ref, token))
        expansions.sort(key=lambda e: (-e[0], e[1]))
        live = []
        for score, tokens, parent, state, alpha_vis, alpha_ref, token in \
                expansions[:beam_size]:
            if token == END:
                retire(_Hypothesis(tokens=parent.tokens, score=score, state=state,
                                   next_input=token, trace=parent.trace), True)
                continue
            trace = AttentionTrace(list(parent.trace.alpha_vis),
                                   list(parent.trace.alpha_ref))
            trace.append(None if alpha_vis is None else alpha_vis.values,
                         None if alpha_ref is None else alpha_ref.values)
            live.append(_Hypothesis(tokens=tokens, score=score, state=state,
                                    next_input=token, trace=trace))
    for hyp in live:
        retire(hyp, False)

    def rank_key(result: DecodeResult):
        score = result.log_prob
        if length_penalty > 0.0:
            score /= max(1, len(result.token_ids)) ** length_penalty
        return (-score, result.token_ids)

    finished.sort(key=rank_key)
    return finished


def evaluate_split(model: CaptionModel, dataset, split: str,
                   beam_size: int = 5, max_len: int | None = None,
                   candidate_override: dict[str, list[str]] | None = None
                   ) -> dict[str, float]:
    """Decode every image in the split and score the full metric suite.

    Returns the x100-scaled report. `candidate_override` substitutes
    fixed candidate token lists by image id (a test hook; overridden
    images skip decoding).
    """
    from refcap.metrics import EvalCorpus, evaluation_report

    images = dataset.split_images(split)
    if not images:
        raise ValueError(f"split {split!r} is empty")
    entries = []
    for image in images:
        if candidate_override and image.image_id in candidate_override:
            tokens = list(candidate_override[image.image_id])
        elif beam_size == 1:
            tokens = greedy_decode(model, dataset.vocab,
                                   dataset.features[image.image_id],
                                   max_len=max_len).tokens
        else:
            tokens = beam_search(model, dataset.vocab,
                                 dataset.features[image.image_id],
                                 beam_size=beam_size, max_len=max_len)[0].tokens
        if not tokens:
            tokens = [dataset.vocab.token(PAD)]  # empty decode scores zero
        entries.append((tokens, image.ref_tokens))
    return evaluation_report(EvalCorpus(entries))


def score_sequence(model: CaptionModel, record: FeatureRecord,
                   token_ids: list[int], terminated: bool = True,
                   ctx: FeatureContext | None = None) -> float:
    """Sum of per-step log-probabilities of the given token sequence,
    plus the <end> step when terminated. Independent of the search path
    that produced the sequence."""
    if ctx is None:
        ctx = model.prepare_features(record)
    state = model.initial_state()
    log_prob = 0.0
    current = START
    with np.errstate(divide="ignore"):
        for token in token_ids:
            probs, state, _, _ = model.step(state, current, ctx)
            log_prob += float(np.log(np.float64(probs.values[0, token])))
            current = token
        if terminated:
            probs, _, _, _ = model.step(state, current, ctx)
            log_prob += float(np.log(np.float64(probs.values[0, END])))
    return log_prob
