"""SGD training loop for every method, plus model bundle serialization.

One `train_method` call produces every member the method needs: several
independently seeded models for the deep ensembles, one shared model for
everything else.  Batch-ensemble members take turns, one member per step.
Models with a gaussian-process head get their hidden weights spectrally
normalized after every update, and their feature precision is accumulated
in a single pass over the training set after the last step, with dropout
off and the final weights, so the Laplace covariance describes the model
actually used at inference time.

Bundles are plain JSON: floats survive a round trip exactly because the
writer emits shortest-repr values and the reader restores float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, InputError, TrainingError, ValidationError
from .model import (
    BatchEnsembleState,
    Gradients,
    MethodConfig,
    ModelDims,
    ModelParams,
    SngpConfig,
    SngpState,
    TrainedModel,
    _loss_and_grads,
    build_rows,
    finalize_covariance,
    gp_features,
    init_model,
    is_deep_ensemble,
    spectral_normalize,
    update_precision,
    uses_dropout,
    uses_gp,
)
from .rng import derive_seed, stream

BUNDLE_FORMAT_VERSION = 1

# Cross-entropy this far above any legitimate value means the run has
# diverged even when saturation keeps every float finite.
LOSS_DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainHyper:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise ConfigurationError(
                f"learning_rate must be positive and finite, got {self.learning_rate}"
            )


def _rows_for_examples(structure, example_idx) -> np.ndarray:
    parts = [np.arange(*structure.row_spans[i]) for i in example_idx]
    return np.concatenate(parts)


def _params_finite(model: TrainedModel) -> bool:
    arrays = [model.params.embed, model.params.w_h, model.params.b_h]
    if model.params.w_o is not None:
        arrays += [model.params.w_o, model.params.b_o]
    if model.sngp_state is not None:
        arrays.append(model.sngp_state.beta)
    if model.be_state is not None:
        arrays += [model.be_state.r, model.be_state.s]
    return all(np.all(np.isfinite(a)) for a in arrays)


def _apply_update(model: TrainedModel, grads: Gradients, lr: float) -> None:
    params = model.params
    params.embed -= lr * grads.embed
    params.w_h -= lr * grads.w_h
    params.b_h -= lr * grads.b_h
    if grads.w_o is not None:
        params.w_o -= lr * grads.w_o
        params.b_o -= lr * grads.b_o
    if grads.beta is not None:
        model.sngp_state.beta -= lr * grads.beta
    if grads.be_r is not None:
        model.be_state.r -= lr * grads.be_r
        model.be_state.s -= lr * grads.be_s


def _finalize_precision(model: TrainedModel, structure, batch_size: int) -> None:
    """One deterministic pass over the training rows accumulating the
    feature precision with the configured momentum, then mark it usable."""
    cfg = model.config.sngp
    state = model.sngp_state
    n_rows = len(structure.targets)
    for start in range(0, n_rows, batch_size):
        rows = np.arange(start, min(start + batch_size, n_rows))
        ctx = structure.ctx_weights[rows] @ model.params.embed
        pre = structure.prefix_weights[rows] @ model.params.embed
        z = np.concatenate([ctx, pre], axis=1)
        h = np.tanh(z @ model.params.w_h.T + model.params.b_h)
        phi = gp_features(h, state)
        state = update_precision(state, phi, cfg.cov_momentum)
    model.sngp_state = finalize_covariance(state)


def train_member(
    examples,
    dims: ModelDims,
    config: MethodConfig,
    hyper: TrainHyper,
    seed: int,
    vocab_sha256: str = "",
    on_step=None,
) -> TrainedModel:
    """Train one model from a fresh seeded initialization.

    on_step, when given, is called as on_step(step, loss, model) after
    each update, with the loss measured on the step's batch before the
    update was applied.
    """
    examples = list(examples)
    if not examples:
        raise InputError("training needs at least one example")
    model = init_model(dims, config, seed)
    model.vocab_sha256 = vocab_sha256
    structure = build_rows(examples, dims)
    gp = uses_gp(config.method)
    if gp:
        model.params.w_h = spectral_normalize(
            model.params.w_h, config.sngp.spec_norm_bound, config.sngp.power_iters
        )
    order = stream(seed, "train", "order")
    history = []
    n = len(examples)
    batch = min(hyper.batch_size, n)
    for step in range(hyper.steps):
        example_idx = order.choice(n, size=batch, replace=False)
        rows = _rows_for_examples(structure, example_idx)
        dropout_seed = None
        if uses_dropout(config.method) and config.dropout_rate > 0.0:
            dropout_seed = derive_seed(seed, "train-dropout", step)
        be_member = step % config.be_size if config.method == "be" else None
        loss, grads = _loss_and_grads(
            model, structure, rows, be_member=be_member, dropout_seed=dropout_seed
        )
        if not math.isfinite(loss) or loss > LOSS_DIVERGENCE_LIMIT:
            raise TrainingError(f"loss diverged ({loss})", step=step)
        _apply_update(model, grads, hyper.learning_rate)
        if not _params_finite(model):
            raise TrainingError("parameters became non-finite", step=step)
        if gp:
            model.params.w_h = spectral_normalize(
                model.params.w_h, config.sngp.spec_norm_bound, config.sngp.power_iters
            )
        history.append(loss)
        if on_step is not None:
            on_step(step, loss, model)
    if gp:
        _finalize_precision(model, structure, hyper.batch_size)
    model.loss_history = tuple(history)
    return model


def train_method(
    examples,
    dims: ModelDims,
    config: MethodConfig,
    hyper: TrainHyper,
    seed: int,
    vocab_sha256: str = "",
    on_step=None,
) -> tuple[TrainedModel, ...]:
    """All members for one method: the configured seeds for a deep
    ensemble, otherwise a single model trained from `seed`."""
    if is_deep_ensemble(config.method):
        member_seeds = config.seeds
    else:
        member_seeds = (seed,)
    return tuple(
        train_member(examples, dims, config, hyper, s, vocab_sha256, on_step)
        for s in member_seeds
    )


def evaluate_loss(model: TrainedModel, examples) -> float:
    """Mean next-token cross-entropy with dropout off (first batch-ensemble
    member for that method)."""
    examples = list(examples)
    if not examples:
        raise InputError("evaluation needs at least one example")
    structure = build_rows(examples, model.dims)
    rows = np.arange(len(structure.targets))
    loss, _ = _loss_and_grads(model, structure, rows, be_member=None, dropout_seed=None)
    return loss


# ---------------------------------------------------------------------------
# Bundle serialization.


def _array_field(payload, key, shape, where):
    if key not in payload:
        raise ValidationError(f"{where} is missing array {key!r}")
    arr = np.asarray(payload[key], dtype=float)
    if arr.shape != shape:
        raise ValidationError(
            f"{where} array {key!r} has shape {arr.shape}, expected {shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{where} array {key!r} contains non-finite values")
    return arr


def _member_payload(model: TrainedModel) -> dict:
    params = model.params
    out = {
        "seed": model.seed,
        "loss_history": list(model.loss_history),
        "embed": params.embed.tolist(),
        "w_h": params.w_h.tolist(),
        "b_h": params.b_h.tolist(),
        "w_o": None if params.w_o is None else params.w_o.tolist(),
        "b_o": None if params.b_o is None else params.b_o.tolist(),
        "be": None,
        "sngp": None,
    }
    if model.be_state is not None:
        out["be"] = {"r": model.be_state.r.tolist(), "s": model.be_state.s.tolist()}
    if model.sngp_state is not None:
        st = model.sngp_state
        out["sngp"] = {
            "w_r": st.w_r.tolist(),
            "b_r": st.b_r.tolist(),
            "beta": st.beta.tolist(),
            "precision": st.precision.tolist(),
            "covariance_valid": st.covariance_valid,
        }
    return out


def write_bundle(members, path) -> None:
    members = tuple(members)
    if not members:
        raise InputError("bundle needs at least one member")
    first = members[0]
    for m in members[1:]:
        if m.config != first.config or m.dims != first.dims:
            raise ValidationError("bundle members disagree on method or dimensions")
        if m.vocab_sha256 != first.vocab_sha256:
            raise ValidationError("bundle members disagree on vocabulary hash")
    payload = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "method": asdict(first.config),
        "dims": asdict(first.dims),
        "vocab_sha256": first.vocab_sha256,
        "members": [_member_payload(m) for m in members],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")


def _load_member(payload, dims: ModelDims, config: MethodConfig, vocab_sha256, where):
    if not isinstance(payload, dict):
        raise ValidationError(f"{where} must be an object")
    seed = payload.get("seed")
    if not isinstance(seed, int):
        raise ValidationError(f"{where} has a missing or non-integer seed")
    history = payload.get("loss_history", [])
    if not isinstance(history, list):
        raise ValidationError(f"{where} loss_history must be a list")
    d, dh, v = dims.embed_dim, dims.hidden_dim, dims.vocab_size
    params = ModelParams(
        embed=_array_field(payload, "embed", (v, d), where),
        w_h=_array_field(payload, "w_h", (dh, 2 * d), where),
        b_h=_array_field(payload, "b_h", (dh,), where),
    )
    be_state = None
    sngp_state = None
    if uses_gp(config.method):
        if payload.get("sngp") is None:
            raise ValidationError(f"{where} is missing its gaussian-process state")
        sp = payload["sngp"]
        big_d = config.sngp.rff_dim
        sngp_state = SngpState(
            w_r=_array_field(sp, "w_r", (big_d, dh), where),
            b_r=_array_field(sp, "b_r", (big_d,), where),
            beta=_array_field(sp, "beta", (v, big_d), where),
            precision=_array_field(sp, "precision", (big_d, big_d), where),
            covariance_valid=bool(sp.get("covariance_valid", False)),
        )
    else:
        params.w_o = _array_field(payload, "w_o", (v, dh), where)
        params.b_o = _array_field(payload, "b_o", (v,), where)
    if config.method == "be":
        if payload.get("be") is None:
            raise ValidationError(f"{where} is missing its batch-ensemble state")
        bep = payload["be"]
        be_state = BatchEnsembleState(
            r=_array_field(bep, "r", (config.be_size, dh), where),
            s=_array_field(bep, "s", (config.be_size, 2 * d), where),
        )
    return TrainedModel(
        dims=dims, config=config, params=params, be_state=be_state,
        sngp_state=sngp_state, seed=seed, vocab_sha256=vocab_sha256,
        loss_history=tuple(float(x) for x in history),
    )


def read_bundle(path) -> tuple[TrainedModel, ...]:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bundle {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValidationError(f"bundle {path} must be a JSON object")
    version = payload.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise ValidationError(
            f"bundle {path} has format_version {version!r}, expected {BUNDLE_FORMAT_VERSION}"
        )
    for key in ("method", "dims", "vocab_sha256", "members"):
        if key not in payload:
            raise ValidationError(f"bundle {path} is missing {key!r}")
    try:
        method_raw = dict(payload["method"])
        sngp_raw = method_raw.pop("sngp", {})
        method_raw["seeds"] = tuple(method_raw.get("seeds", ()))
        config = MethodConfig(sngp=SngpConfig(**sngp_raw), **method_raw)
        dims = ModelDims(**payload["dims"])
    except (TypeError, ConfigurationError) as exc:
        raise ValidationError(f"bundle {path} has an invalid header: {exc}") from exc
    members_raw = payload["members"]
    if not isinstance(members_raw, list) or not members_raw:
        raise ValidationError(f"bundle {path} must contain at least one member")
    expected = len(config.seeds) if is_deep_ensemble(config.method) else 1
    if len(members_raw) != expected:
        raise ValidationError(
            f"bundle {path} has {len(members_raw)} members, method {config.method} expects {expected}"
        )
    vocab_sha = payload["vocab_sha256"]
    if not isinstance(vocab_sha, str):
        raise ValidationError(f"bundle {path} vocab_sha256 must be a string")
    return tuple(
        _load_member(raw, dims, config, vocab_sha, f"bundle {path} member {i}")
        for i, raw in enumerate(members_raw)
    )


def check_vocab_match(members, vocab_sha256: str) -> None:
    """Refuse to run models against a vocabulary they were not trained on."""
    for m in members:
        if m.vocab_sha256 and vocab_sha256 and m.vocab_sha256 != vocab_sha256:
            raise ValidationError(
                "model was trained against a different vocabulary "
                f"({m.vocab_sha256[:12]}... vs {vocab_sha256[:12]}...)"
            )
