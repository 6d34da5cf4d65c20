"""Posterior-mean decoding and prediction serialization.

The posterior predictive at each decode step is the mean of member
probability distributions, one member per stochastic forward:

  base        one deterministic pass
  mcd         `samples` dropout passes of one model
  be          every rank-1 ensemble member of one model
  sngp        one pass with mean-field-adjusted logits
  sngp_mcd    `samples` dropout passes, each mean-field adjusted
  de          one pass per independently trained model
  sngp_de     one mean-field pass per independently trained model

Averaging happens strictly in probability space: softmax first, mean
second.  Collapsing the mean into the logits changes the distribution
whenever members disagree, so the two orders are never interchangeable.

Beam search scores hypotheses by summed mean-probability log scores.  A
candidate is always a fully terminated sequence: eos is one of the scored
continuations from length 1 on, and hypotheses still alive at the length
cap are closed with a forced eos score.  Stored hypotheses and per-token
log-probabilities exclude the terminal eos; the eos log-probability is
kept alongside so every ranking score can be reproduced.

Sequence uncertainty is the length-normalized total log-probability
including the eos step,

    u = (sum_t log pbar(y_t) + log pbar(eos)) / (T + 1)

so lower u means a less confident, more uncertain prediction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .corpus import TokenSeq
from .errors import ConfigurationError, InputError, ParseError, ValidationError
from .model import (
    TrainedModel,
    _hidden_rows,
    dropout_mask,
    gp_features,
    mean_field_logits,
    predictive_variance,
    uses_dropout,
    uses_gp,
)
from .rng import derive_seed
from .rouge import score_quality


@dataclass(frozen=True)
class PosteriorConfig:
    """Decode-time knobs.  length_norm controls the final ranking score;
    prune_length_norm switches the mid-search pruning key to the
    per-step-normalized score as well."""

    beam_size: int = 3
    max_len: int = 8
    length_norm: bool = True
    prune_length_norm: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class PredictionRecord:
    """One decoded output: tokens and per-token log scores exclude the
    terminal eos, whose log score is stored separately."""

    id: str
    hypothesis: TokenSeq
    token_logp: tuple[float, ...]
    eos_logp: float
    uncertainty: float


@dataclass(frozen=True)
class JoinedRecord:
    """A prediction joined with its reference and quality scores; the
    record surface every calibration metric consumes."""

    id: str
    hypothesis: TokenSeq
    token_logp: tuple[float, ...]
    eos_logp: float
    uncertainty: float
    reference: TokenSeq
    quality: dict


def _check_members(members) -> tuple[TrainedModel, ...]:
    members = tuple(members)
    if not members:
        raise InputError("posterior needs at least one trained member")
    first = members[0]
    for m in members[1:]:
        if m.config != first.config or m.dims != first.dims:
            raise ValidationError("posterior members disagree on method or dimensions")
    method = first.config.method
    expected = len(first.config.seeds) if method in ("de", "sngp_de") else 1
    if len(members) != expected:
        raise ValidationError(
            f"method {method} expects {expected} members, got {len(members)}"
        )
    return members


def _mean_rows(embed: np.ndarray, token_rows, bos_id: int) -> np.ndarray:
    out = np.empty((len(token_rows), embed.shape[1]))
    for i, tokens in enumerate(token_rows):
        if len(tokens) == 0:
            out[i] = embed[bos_id]
        else:
            out[i] = embed[np.asarray(tokens, dtype=int)].mean(axis=0)
    return out


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _member_prob_rows(model: TrainedModel, input_tokens, prefixes, mask, be_member):
    """Probability rows for one stochastic unit: one model pass over all
    prefixes, optionally masked (shared mask) or member-modulated."""
    dims = model.dims
    params = model.params
    ctx = _mean_rows(params.embed, [tuple(input_tokens)], dims.bos_id)
    pre = _mean_rows(params.embed, prefixes, dims.bos_id)
    z = np.concatenate([np.repeat(ctx, len(prefixes), axis=0), pre], axis=1)
    member_weights = None
    if model.be_state is not None:
        member_weights = (model.be_state.r[be_member], model.be_state.s[be_member])
    h = _hidden_rows(params, z, member_weights)["h_raw"]
    if mask is not None:
        h = h * mask
    if model.sngp_state is None:
        logits = h @ params.w_o.T + params.b_o
    else:
        state = model.sngp_state
        phi = gp_features(h, state)
        logits = phi @ state.beta.T
        sigma2 = predictive_variance(state, phi)
        logits = mean_field_logits(logits, sigma2, model.config.sngp.mean_field_factor)
    return _softmax_rows(logits)


def step_distributions(
    members,
    input_tokens,
    prefixes,
    *,
    run_seed: int,
    example_id: str,
    step: int,
) -> np.ndarray:
    """Posterior-mean next-token distributions, one row per prefix.

    Dropout samples share one mask per (step, sample index) across all
    prefixes, so hypotheses inside one beam step see the same subnetwork
    and remain comparable.
    """
    members = _check_members(members)
    config = members[0].config
    dims = members[0].dims
    for t in tuple(input_tokens):
        if not 0 <= int(t) < dims.vocab_size:
            raise InputError(f"input token id {t} outside 0..{dims.vocab_size - 1}")
    for tokens in prefixes:
        for t in tuple(tokens):
            if not 0 <= int(t) < dims.vocab_size:
                raise InputError(f"prefix token id {t} outside 0..{dims.vocab_size - 1}")
    prefixes = [tuple(p) for p in prefixes]
    if not prefixes:
        raise InputError("step_distributions needs at least one prefix")
    total = np.zeros((len(prefixes), dims.vocab_size))
    count = 0
    if uses_dropout(config.method) and config.dropout_rate > 0.0:
        model = members[0]
        for m in range(config.samples):
            mask_seed = derive_seed(run_seed, "mcd", example_id, step, m)
            mask = dropout_mask(mask_seed, config.dropout_rate, dims.hidden_dim)
            total += _member_prob_rows(model, input_tokens, prefixes, mask, 0)
            count += 1
    elif config.method == "be":
        model = members[0]
        for k in range(config.be_size):
            total += _member_prob_rows(model, input_tokens, prefixes, None, k)
            count += 1
    else:
        for model in members:
            total += _member_prob_rows(model, input_tokens, prefixes, None, 0)
            count += 1
    return total / count


def posterior_mean_dist(
    members, input_tokens, prefix_tokens, *, run_seed: int, example_id: str, step: int
) -> np.ndarray:
    """Posterior-mean distribution for a single prefix."""
    return step_distributions(
        members, input_tokens, [tuple(prefix_tokens)],
        run_seed=run_seed, example_id=example_id, step=step,
    )[0]


def uncertainty_score(token_logp, eos_logp: float) -> float:
    """Length-normalized sequence log score including the eos step."""
    return (math.fsum(token_logp) + float(eos_logp)) / (len(tuple(token_logp)) + 1)


@dataclass(frozen=True)
class _Hyp:
    tokens: TokenSeq
    logps: tuple[float, ...]
    total: float


def beam_decode(
    members,
    input_tokens,
    config: PosteriorConfig,
    *,
    run_seed: int,
    example_id: str,
    dist_hook=None,
) -> PredictionRecord:
    """Beam search over posterior-mean distributions.

    eos is never a candidate at the first step, so every hypothesis emits
    at least one token; hypotheses reaching max_len are closed with the
    eos score of their final state.  dist_hook(step, prefixes, dists) sees
    every distribution batch the search evaluates.
    """
    members = _check_members(members)
    eos = members[0].dims.eos_id
    live = [_Hyp(tokens=(), logps=(), total=0.0)]
    completed: list[tuple[_Hyp, float]] = []
    vocab = members[0].dims.vocab_size
    for step in range(config.max_len):
        prefixes = [h.tokens for h in live]
        dists = step_distributions(
            members, input_tokens, prefixes,
            run_seed=run_seed, example_id=example_id, step=step,
        )
        if dist_hook is not None:
            dist_hook(step, prefixes, dists)
        logd = np.log(dists)
        candidates = []
        for i, h in enumerate(live):
            if step > 0:
                completed.append((h, float(logd[i, eos])))
            for v in range(vocab):
                if v == eos:
                    continue
                lp = float(logd[i, v])
                candidates.append(
                    _Hyp(tokens=h.tokens + (v,), logps=h.logps + (lp,), total=h.total + lp)
                )
        if config.prune_length_norm:
            key = lambda c: (-(c.total / len(c.tokens)), c.tokens)
        else:
            key = lambda c: (-c.total, c.tokens)
        candidates.sort(key=key)
        live = candidates[: config.beam_size]
    final_prefixes = [h.tokens for h in live]
    dists = step_distributions(
        members, input_tokens, final_prefixes,
        run_seed=run_seed, example_id=example_id, step=config.max_len,
    )
    if dist_hook is not None:
        dist_hook(config.max_len, final_prefixes, dists)
    logd = np.log(dists)
    for i, h in enumerate(live):
        completed.append((h, float(logd[i, eos])))

    def final_key(item):
        h, eos_lp = item
        total = h.total + eos_lp
        if config.length_norm:
            score = total / (len(h.tokens) + 1)
        else:
            score = total
        return (-score, h.tokens)

    best, best_eos = min(completed, key=final_key)
    return PredictionRecord(
        id=example_id,
        hypothesis=best.tokens,
        token_logp=best.logps,
        eos_logp=best_eos,
        uncertainty=uncertainty_score(best.logps, best_eos),
    )


def decode_corpus(members, examples, config: PosteriorConfig, run_seed: int,
                  on_example=None) -> tuple[PredictionRecord, ...]:
    """Decode every example; on_example(index, record) reports progress."""
    out = []
    for i, ex in enumerate(examples):
        rec = beam_decode(
            members, ex.input, config, run_seed=run_seed, example_id=ex.id
        )
        out.append(rec)
        if on_example is not None:
            on_example(i, rec)
    return tuple(out)


# ---------------------------------------------------------------------------
# Prediction files: one compact JSON object per line.

_PREDICTION_KEYS = {"id", "hypothesis", "token_logp", "eos_logp", "uncertainty"}


def write_predictions(records, path) -> None:
    seen = set()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            if rec.id in seen:
                raise ValidationError(f"duplicate prediction id {rec.id!r}")
            seen.add(rec.id)
            payload = {
                "id": rec.id,
                "hypothesis": [int(t) for t in rec.hypothesis],
                "token_logp": [float(x) for x in rec.token_logp],
                "eos_logp": float(rec.eos_logp),
                "uncertainty": float(rec.uncertainty),
            }
            fh.write(json.dumps(payload, separators=(",", ":")) + "\n")


def _float_list(payload, key, lineno):
    value = payload[key]
    if not isinstance(value, list) or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    ):
        raise ParseError(f"field {key!r} must be a list of numbers", line=lineno)
    return tuple(float(x) for x in value)


def read_predictions(path) -> tuple[PredictionRecord, ...]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            if not isinstance(payload, dict):
                raise ParseError("each line must be a JSON object", line=lineno)
            keys = set(payload)
            if keys != _PREDICTION_KEYS:
                missing = _PREDICTION_KEYS - keys
                extra = keys - _PREDICTION_KEYS
                detail = []
                if missing:
                    detail.append(f"missing {sorted(missing)}")
                if extra:
                    detail.append(f"unexpected {sorted(extra)}")
                raise ParseError("bad field set: " + ", ".join(detail), line=lineno)
            rec_id = payload["id"]
            if not isinstance(rec_id, str) or not rec_id:
                raise ParseError("id must be a non-empty string", line=lineno)
            if rec_id in seen:
                raise ParseError(f"duplicate prediction id {rec_id!r}", line=lineno)
            seen.add(rec_id)
            hyp = payload["hypothesis"]
            if not isinstance(hyp, list) or not all(
                isinstance(t, int) and not isinstance(t, bool) for t in hyp
            ):
                raise ParseError("hypothesis must be a list of integers", line=lineno)
            token_logp = _float_list(payload, "token_logp", lineno)
            if len(token_logp) != len(hyp):
                raise ParseError(
                    f"token_logp has {len(token_logp)} entries for {len(hyp)} tokens",
                    line=lineno,
                )
            for key in ("eos_logp", "uncertainty"):
                if not isinstance(payload[key], (int, float)) or isinstance(payload[key], bool):
                    raise ParseError(f"field {key!r} must be a number", line=lineno)
            out.append(
                PredictionRecord(
                    id=rec_id,
                    hypothesis=tuple(int(t) for t in hyp),
                    token_logp=token_logp,
                    eos_logp=float(payload["eos_logp"]),
                    uncertainty=float(payload["uncertainty"]),
                )
            )
    return tuple(out)


def join_with_references(predictions, examples) -> tuple[JoinedRecord, ...]:
    """Match predictions to reference examples by id and score quality.

    The two sets must match exactly; a prediction without a reference or a
    reference without a prediction is an error, not a silent drop.
    """
    by_id = {}
    for ex in examples:
        if ex.id in by_id:
            raise ValidationError(f"duplicate reference id {ex.id!r}")
        by_id[ex.id] = ex
    out = []
    seen = set()
    for rec in predictions:
        if rec.id not in by_id:
            raise ValidationError(f"prediction {rec.id!r} has no reference example")
        if rec.id in seen:
            raise ValidationError(f"duplicate prediction id {rec.id!r}")
        seen.add(rec.id)
        ex = by_id[rec.id]
        out.append(
            JoinedRecord(
                id=rec.id,
                hypothesis=rec.hypothesis,
                token_logp=rec.token_logp,
                eos_logp=rec.eos_logp,
                uncertainty=rec.uncertainty,
                reference=tuple(ex.reference),
                quality=score_quality(rec.hypothesis, ex.reference),
            )
        )
    if len(seen) != len(by_id):
        unmatched = sorted(set(by_id) - seen)
        raise ValidationError(
            f"{len(unmatched)} reference examples have no prediction, first {unmatched[0]!r}"
        )
    return tuple(out)
