"""Small conditional autoregressive model with pluggable probabilistic heads.

The architecture is deliberately tiny so the exact backward pass stays
hand-checkable:

    ctx    = mean of input-token embeddings                  (d,)
    state  = mean of emitted-prefix embeddings, or the       (d,)
             bos embedding when the prefix is empty
    z      = [ctx; state]                                    (2d,)
    a      = W_h z + b_h                                     (d',)
    h      = dropout(tanh(a))                                (d',)
    logits = W_o h + b_o                                     (|V|,)

Heads modify this skeleton:

  batch ensemble   member k owns rank-1 fast weights (r_k, s_k) that
                   modulate the shared hidden weight elementwise,
                   a = r_k * (W_h (s_k * z)) + b_h
  gaussian process the output layer becomes random cosine features
                   phi(h) = sqrt(2/D) cos(W_r h + b_r) with trainable
                   weights beta, plus a momentum-updated Laplace precision
                   over phi that supplies a predictive variance for
                   mean-field logit scaling at inference time
  dropout          inverted dropout on the hidden activation only, active
                   for the mc-dropout method variants

All arrays are float64.  Forward passes here return raw logits; the
posterior machinery in inference.py applies mean-field scaling and the
softmax.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve

from .errors import (
    ConfigurationError,
    InputError,
    NumericalStateError,
)
from .rng import stream

METHODS = ("base", "mcd", "be", "sngp", "sngp_mcd", "de", "sngp_de")

# Ridge added inside every precision update; keeps the matrix positive
# definite even for rank-deficient feature batches.
PRECISION_RIDGE = 1e-6


def uses_dropout(method: str) -> bool:
    return method in ("mcd", "sngp_mcd")


def uses_gp(method: str) -> bool:
    return method in ("sngp", "sngp_mcd", "sngp_de")


def is_deep_ensemble(method: str) -> bool:
    return method in ("de", "sngp_de")


@dataclass(frozen=True)
class ModelDims:
    """Shape card for one model, including the special ids decoding needs."""

    vocab_size: int
    embed_dim: int = 16
    hidden_dim: int = 32
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigurationError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("embed_dim and hidden_dim must be >= 1")
        for name in ("bos_id", "eos_id"):
            idx = getattr(self, name)
            if not 0 <= idx < self.vocab_size:
                raise ConfigurationError(f"{name} {idx} outside 0..{self.vocab_size - 1}")
        if self.bos_id == self.eos_id:
            raise ConfigurationError("bos_id and eos_id must differ")


@dataclass(frozen=True)
class SngpConfig:
    rff_dim: int = 128
    kernel_scale: float = 1.0
    mean_field_factor: float = 1e-4
    cov_momentum: float = 0.999
    spec_norm_bound: float = 1.0
    power_iters: int = 100

    def __post_init__(self):
        if self.rff_dim < 1:
            raise ConfigurationError(f"rff_dim must be >= 1, got {self.rff_dim}")
        if self.kernel_scale <= 0.0:
            raise ConfigurationError(f"kernel_scale must be positive, got {self.kernel_scale}")
        if self.mean_field_factor < 0.0:
            raise ConfigurationError(
                f"mean_field_factor must be nonnegative, got {self.mean_field_factor}"
            )
        if not 0.0 < self.cov_momentum < 1.0:
            raise ConfigurationError(
                f"cov_momentum must lie in (0, 1), got {self.cov_momentum}"
            )
        if self.spec_norm_bound <= 0.0:
            raise ConfigurationError(
                f"spec_norm_bound must be positive, got {self.spec_norm_bound}"
            )
        if self.power_iters < 1:
            raise ConfigurationError(f"power_iters must be >= 1, got {self.power_iters}")


@dataclass(frozen=True)
class MethodConfig:
    """One probabilistic method plus its knobs.

    `samples` is the stochastic forward count for the mc-dropout variants;
    `seeds` lists one training seed per deep-ensemble member and must be
    empty for single-model methods.
    """

    method: str
    samples: int = 10
    dropout_rate: float = 0.1
    be_size: int = 5
    sngp: SngpConfig = field(default_factory=SngpConfig)
    seeds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.samples < 1:
            raise ConfigurationError(f"samples must be >= 1, got {self.samples}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(
                f"dropout_rate must lie in [0, 1), got {self.dropout_rate}"
            )
        if self.be_size < 1:
            raise ConfigurationError(f"be_size must be >= 1, got {self.be_size}")
        if is_deep_ensemble(self.method):
            if len(self.seeds) < 2:
                raise ConfigurationError(
                    f"{self.method} needs at least 2 member seeds, got {len(self.seeds)}"
                )
            if len(set(self.seeds)) != len(self.seeds):
                raise ConfigurationError("ensemble member seeds must be distinct")
        elif self.seeds and len(self.seeds) != 1:
            raise ConfigurationError(
                f"single-model method {self.method} takes at most one seed"
            )


@dataclass
class ModelParams:
    """Trainable arrays.  w_o/b_o are None when a gaussian-process head owns
    the output layer (its beta lives in SngpState)."""

    embed: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray | None = None
    b_o: np.ndarray | None = None


@dataclass
class BatchEnsembleState:
    """Rank-1 fast weights, one (r_k, s_k) pair per member."""

    r: np.ndarray  # (members, hidden_dim)
    s: np.ndarray  # (members, 2 * embed_dim)

    @property
    def size(self) -> int:
        return self.r.shape[0]


@dataclass
class SngpState:
    """Frozen random features, trainable output weights, Laplace precision."""

    w_r: np.ndarray  # (rff_dim, hidden_dim), frozen
    b_r: np.ndarray  # (rff_dim,), frozen
    beta: np.ndarray  # (vocab, rff_dim), trainable
    precision: np.ndarray  # (rff_dim, rff_dim)
    covariance_valid: bool = False
    # cached lower-triangular factor of precision; reset on every update
    chol: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class TrainedModel:
    """One trained member: parameters, head state, and provenance."""

    dims: ModelDims
    config: MethodConfig
    params: ModelParams
    be_state: BatchEnsembleState | None = None
    sngp_state: SngpState | None = None
    seed: int = 0
    vocab_sha256: str = ""
    loss_history: tuple[float, ...] = ()


@dataclass
class Gradients:
    """Mirror of the trainable arrays; None where the head has no such array."""

    embed: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray | None = None
    b_o: np.ndarray | None = None
    beta: np.ndarray | None = None
    be_r: np.ndarray | None = None
    be_s: np.ndarray | None = None


def init_model(dims: ModelDims, config: MethodConfig, seed: int) -> TrainedModel:
    """Seeded initialization: weights uniform(-0.1, 0.1), biases zero,
    batch-ensemble fast weights near one, random features standard normal
    scaled by 1/kernel_scale with phases uniform over [0, 2pi)."""
    rs = stream(seed, "init")
    embed = rs.uniform(-0.1, 0.1, size=(dims.vocab_size, dims.embed_dim))
    w_h = rs.uniform(-0.1, 0.1, size=(dims.hidden_dim, 2 * dims.embed_dim))
    b_h = np.zeros(dims.hidden_dim)
    params = ModelParams(embed=embed, w_h=w_h, b_h=b_h)
    sngp_state = None
    be_state = None
    if uses_gp(config.method):
        cfg = config.sngp
        beta = rs.uniform(-0.1, 0.1, size=(dims.vocab_size, cfg.rff_dim))
        feat = stream(seed, "rff")
        w_r = feat.standard_normal((cfg.rff_dim, dims.hidden_dim)) / cfg.kernel_scale
        b_r = feat.uniform(0.0, 2.0 * math.pi, size=cfg.rff_dim)
        sngp_state = SngpState(
            w_r=w_r, b_r=b_r, beta=beta, precision=np.eye(cfg.rff_dim)
        )
    else:
        params.w_o = rs.uniform(-0.1, 0.1, size=(dims.vocab_size, dims.hidden_dim))
        params.b_o = np.zeros(dims.vocab_size)
    if config.method == "be":
        be_state = BatchEnsembleState(
            r=1.0 + rs.uniform(-0.1, 0.1, size=(config.be_size, dims.hidden_dim)),
            s=1.0 + rs.uniform(-0.1, 0.1, size=(config.be_size, 2 * dims.embed_dim)),
        )
    return TrainedModel(
        dims=dims, config=config, params=params, be_state=be_state,
        sngp_state=sngp_state, seed=seed,
    )


def _check_tokens(tokens, vocab_size: int, what: str) -> None:
    for t in tokens:
        if not 0 <= int(t) < vocab_size:
            raise InputError(f"{what} token id {t} outside 0..{vocab_size - 1}")


def _mean_embedding(embed: np.ndarray, tokens, bos_id: int) -> np.ndarray:
    if len(tokens) == 0:
        return embed[bos_id].copy()
    return embed[np.asarray(tokens, dtype=int)].mean(axis=0)


def dropout_mask(seed: int, rate: float, shape) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by 1/(1-rate)."""
    keep = stream(seed, "dropout-mask").random(shape) >= rate
    return keep.astype(float) / (1.0 - rate)


def _hidden_rows(params: ModelParams, z: np.ndarray, be_member_weights=None):
    """Pre-activation and tanh activation for a stack of z rows.

    Returns intermediates the backward pass needs: for batch-ensemble
    members also the scaled input (s*z) and the pre-modulation product.
    """
    if be_member_weights is None:
        a = z @ params.w_h.T + params.b_h
        return {"a": a, "h_raw": np.tanh(a)}
    r_k, s_k = be_member_weights
    zs = z * s_k
    pre = zs @ params.w_h.T
    a = pre * r_k + params.b_h
    return {"a": a, "h_raw": np.tanh(a), "zs": zs, "pre": pre}


def gp_features(h, state: SngpState) -> np.ndarray:
    """Random cosine features phi_i = sqrt(2/D) cos(<w_i, h> + b_i).

    Works on a single activation vector or a stack of rows; the squared
    norm of each feature vector is at most 2 by construction.
    """
    h = np.asarray(h, dtype=float)
    big_d = state.w_r.shape[0]
    return math.sqrt(2.0 / big_d) * np.cos(h @ state.w_r.T + state.b_r)


def _output_logits(params: ModelParams, sngp_state, h: np.ndarray):
    if sngp_state is None:
        return h @ params.w_o.T + params.b_o, None
    phi = gp_features(h, sngp_state)
    return phi @ sngp_state.beta.T, phi


def forward_logits(
    model: TrainedModel,
    input_tokens,
    prefix_tokens,
    mode: str = "infer",
    sample_seed: int | None = None,
    be_member: int | None = None,
) -> np.ndarray:
    """Raw output logits for one (input, prefix) pair.

    Dropout fires only for the mc-dropout method variants and only when a
    sample_seed is supplied; other methods ignore the seed entirely, so
    their logits are deterministic.  mode='train' with a dropout method
    requires a seed, making stochastic training explicit at the call site.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    dims = model.dims
    _check_tokens(input_tokens, dims.vocab_size, "input")
    _check_tokens(prefix_tokens, dims.vocab_size, "prefix")
    config = model.config
    dropout_active = (
        uses_dropout(config.method)
        and config.dropout_rate > 0.0
        and sample_seed is not None
    )
    if mode == "train" and uses_dropout(config.method) and config.dropout_rate > 0.0 and sample_seed is None:
        raise ConfigurationError(
            "training forward for a dropout method needs a sample_seed"
        )
    embed = model.params.embed
    ctx = _mean_embedding(embed, tuple(input_tokens), dims.bos_id)
    state = _mean_embedding(embed, tuple(prefix_tokens), dims.bos_id)
    z = np.concatenate([ctx, state])[None, :]
    member_weights = None
    if model.be_state is not None:
        k = 0 if be_member is None else be_member
        if not 0 <= k < model.be_state.size:
            raise InputError(f"batch-ensemble member {k} outside 0..{model.be_state.size - 1}")
        member_weights = (model.be_state.r[k], model.be_state.s[k])
    hidden = _hidden_rows(model.params, z, member_weights)
    h = hidden["h_raw"]
    if dropout_active:
        h = h * dropout_mask(sample_seed, config.dropout_rate, h.shape[1])
    logits, _ = _output_logits(model.params, model.sngp_state, h)
    out = logits[0]
    if not np.all(np.isfinite(out)):
        raise NumericalStateError("forward pass produced non-finite logits")
    return out


def spectral_normalize(w: np.ndarray, bound: float, power_iters: int) -> np.ndarray:
    """Rescale `w` so its top singular value is at most `bound`.

    Power iteration estimates the top singular pair; the start vector is
    drawn from a stream keyed by the matrix bytes, so the result is
    deterministic and no fixed direction can be orthogonal to the top
    subspace by construction.  When the estimate stays within the bound
    the matrix is returned unchanged (columns keep their direction; any
    scaling is uniform).
    """
    if power_iters < 1:
        raise ConfigurationError(f"power_iters must be >= 1, got {power_iters}")
    if bound <= 0.0:
        raise ConfigurationError(f"spectral bound must be positive, got {bound}")
    w = np.asarray(w, dtype=float)
    if w.ndim != 2:
        raise InputError(f"spectral_normalize expects a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericalStateError("spectral_normalize got non-finite entries")
    if not np.any(w):
        return w.copy()
    rs = stream("spectral-start", hashlib.sha256(w.tobytes()).hexdigest())
    v = rs.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    u = None
    for _ in range(power_iters):
        wv = w @ v
        norm_wv = np.linalg.norm(wv)
        if norm_wv == 0.0:
            v = rs.standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        u = wv / norm_wv
        wu = w.T @ u
        norm_wu = np.linalg.norm(wu)
        if norm_wu == 0.0:
            v = rs.standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = wu / norm_wu
    if u is None:
        return w.copy()
    sigma = float(u @ (w @ v))
    if sigma <= bound:
        return w.copy()
    return w * (bound / sigma)


def update_precision(
    state: SngpState, phi_batch: np.ndarray, momentum: float, ridge: float = PRECISION_RIDGE
) -> SngpState:
    """Momentum update of the feature precision matrix.

        precision <- m * precision + (1 - m) * mean_b(phi_b phi_b^T + ridge I)

    Accepts the degenerate momenta 0 and 1 (the latter leaves the matrix
    bitwise unchanged).  The result is symmetrized and stays positive
    definite for any ridge > 0; the cached factorization is dropped and
    covariance_valid reset, since the estimate is stale until finalized.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {momentum}")
    if ridge < 0.0:
        raise ConfigurationError(f"ridge must be nonnegative, got {ridge}")
    phi = np.atleast_2d(np.asarray(phi_batch, dtype=float))
    big_d = state.precision.shape[0]
    if phi.shape[1] != big_d:
        raise InputError(
            f"feature batch has dimension {phi.shape[1]}, precision expects {big_d}"
        )
    if momentum == 1.0:
        new = state.precision.copy()
    else:
        batch_term = phi.T @ phi / phi.shape[0] + ridge * np.eye(big_d)
        new = momentum * state.precision + (1.0 - momentum) * batch_term
        new = (new + new.T) / 2.0
    return SngpState(
        w_r=state.w_r, b_r=state.b_r, beta=state.beta, precision=new,
        covariance_valid=False, chol=None,
    )


def finalize_covariance(state: SngpState) -> SngpState:
    """Mark the precision estimate usable for predictive variances."""
    return replace(state, covariance_valid=True, chol=None)


def predictive_variance(state: SngpState, phi_rows: np.ndarray) -> np.ndarray:
    """Per-row variance phi^T precision^{-1} phi via a Cholesky solve.

    Never forms the explicit inverse.  Tiny negative results from rounding
    are clipped to zero.
    """
    if not state.covariance_valid:
        raise NumericalStateError(
            "predictive variance requested before the precision was finalized"
        )
    phi = np.atleast_2d(np.asarray(phi_rows, dtype=float))
    if state.chol is None:
        try:
            state.chol = np.linalg.cholesky(state.precision)
        except np.linalg.LinAlgError as exc:
            raise NumericalStateError(
                f"precision matrix is not positive definite: {exc}"
            ) from exc
    solved = cho_solve((state.chol, True), phi.T)
    sigma2 = np.einsum("bd,db->b", phi, solved)
    return np.maximum(sigma2, 0.0)


def mean_field_logits(logits, variances, factor: float) -> np.ndarray:
    """Scale logits by 1/sqrt(1 + factor * variance).

    factor=0 returns the logits unchanged.  Variances broadcast against
    the logits, so a scalar variance shared across classes is the common
    case; negative variances are a numerical-state error.
    """
    logits = np.asarray(logits, dtype=float)
    if factor < 0.0:
        raise ConfigurationError(f"mean-field factor must be nonnegative, got {factor}")
    if factor == 0.0:
        return logits.copy()
    variances = np.asarray(variances, dtype=float)
    if np.any(variances < 0.0):
        raise NumericalStateError(
            f"negative predictive variance {variances.min()} in mean-field scaling"
        )
    scale = np.sqrt(1.0 + factor * variances)
    if logits.ndim == 2 and variances.ndim == 1:
        return logits / scale[:, None]
    return logits / scale


# ---------------------------------------------------------------------------
# Teacher-forced rows and the hand-written backward pass.


@dataclass(frozen=True)
class RowStructure:
    """Averaging-weight form of a batch of teacher-forced decode steps.

    ctx_weights @ embed gives the input context row and prefix_weights @
    embed the prefix state row, which keeps the loss an explicit linear
    chain in the embedding table for the backward pass.  row_spans maps
    each example to its slice of rows.
    """

    ctx_weights: np.ndarray  # (rows, vocab)
    prefix_weights: np.ndarray  # (rows, vocab)
    targets: np.ndarray  # (rows,)
    row_spans: tuple[tuple[int, int], ...]


def build_rows(examples, dims: ModelDims) -> RowStructure:
    """Rows for next-token prediction: one per reference position plus the
    closing eos step."""
    ctx_rows = []
    prefix_rows = []
    targets = []
    spans = []
    v = dims.vocab_size
    for ex in examples:
        _check_tokens(ex.input, v, "input")
        _check_tokens(ex.reference, v, "reference")
        ctx = np.zeros(v)
        for t in ex.input:
            ctx[t] += 1.0
        ctx /= len(ex.input)
        ref = tuple(ex.reference)
        start = len(targets)
        running = np.zeros(v)
        for t in range(len(ref) + 1):
            if t == 0:
                row = np.zeros(v)
                row[dims.bos_id] = 1.0
            else:
                running[ref[t - 1]] += 1.0
                row = running / t
            ctx_rows.append(ctx)
            prefix_rows.append(row.copy())
            targets.append(ref[t] if t < len(ref) else dims.eos_id)
        spans.append((start, len(targets)))
    return RowStructure(
        ctx_weights=np.asarray(ctx_rows),
        prefix_weights=np.asarray(prefix_rows),
        targets=np.asarray(targets, dtype=int),
        row_spans=tuple(spans),
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _forward_rows(model: TrainedModel, structure: RowStructure, rows, *,
                  be_member: int | None, dropout_seed: int | None):
    """Forward over selected rows; returns a cache for the backward pass."""
    params = model.params
    ctx_w = structure.ctx_weights[rows]
    pre_w = structure.prefix_weights[rows]
    ctx = ctx_w @ params.embed
    pre = pre_w @ params.embed
    z = np.concatenate([ctx, pre], axis=1)
    member_weights = None
    if model.be_state is not None:
        k = 0 if be_member is None else be_member
        member_weights = (model.be_state.r[k], model.be_state.s[k])
    hidden = _hidden_rows(params, z, member_weights)
    h = hidden["h_raw"]
    mask = None
    if dropout_seed is not None and uses_dropout(model.config.method) and model.config.dropout_rate > 0.0:
        mask = dropout_mask(dropout_seed, model.config.dropout_rate, h.shape)
        h = h * mask
    logits, phi = _output_logits(params, model.sngp_state, h)
    return {
        "ctx_w": ctx_w, "pre_w": pre_w, "z": z, "hidden": hidden, "mask": mask,
        "h": h, "logits": logits, "phi": phi, "member_weights": member_weights,
        "be_member": 0 if be_member is None else be_member,
    }


def _rows_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(targets)), targets]
    return float(np.mean(lse - picked))


def batch_loss(model: TrainedModel, examples, *, be_member: int | None = None,
               dropout_seed: int | None = None) -> float:
    """Mean cross-entropy over all teacher-forced rows of the batch."""
    structure = build_rows(examples, model.dims)
    rows = np.arange(len(structure.targets))
    cache = _forward_rows(model, structure, rows, be_member=be_member,
                          dropout_seed=dropout_seed)
    return _rows_loss(cache["logits"], structure.targets)


def backprop_gradients(model: TrainedModel, examples, *, be_member: int | None = None,
                       dropout_seed: int | None = None) -> Gradients:
    """Hand-written gradients of the mean cross-entropy for the batch."""
    structure = build_rows(examples, model.dims)
    rows = np.arange(len(structure.targets))
    _, grads = _loss_and_grads(model, structure, rows, be_member=be_member,
                               dropout_seed=dropout_seed)
    return grads


def _loss_and_grads(model: TrainedModel, structure: RowStructure, rows, *,
                    be_member: int | None, dropout_seed: int | None):
    params = model.params
    targets = structure.targets[rows]
    cache = _forward_rows(model, structure, rows, be_member=be_member,
                          dropout_seed=dropout_seed)
    logits = cache["logits"]
    n = len(targets)
    loss = _rows_loss(logits, targets)

    dlogits = _softmax_rows(logits)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n

    grads = Gradients(
        embed=np.zeros_like(params.embed),
        w_h=np.zeros_like(params.w_h),
        b_h=np.zeros_like(params.b_h),
    )

    if model.sngp_state is None:
        grads.w_o = dlogits.T @ cache["h"]
        grads.b_o = dlogits.sum(axis=0)
        dh = dlogits @ params.w_o
    else:
        state = model.sngp_state
        phi = cache["phi"]
        grads.beta = dlogits.T @ phi
        dphi = dlogits @ state.beta
        big_d = state.w_r.shape[0]
        # phi = sqrt(2/D) cos(u) with u = h W_r^T + b_r
        u_arg = cache["h"] @ state.w_r.T + state.b_r
        du = dphi * (-math.sqrt(2.0 / big_d) * np.sin(u_arg))
        dh = du @ state.w_r

    if cache["mask"] is not None:
        dh = dh * cache["mask"]

    hidden = cache["hidden"]
    da = dh * (1.0 - hidden["h_raw"] ** 2)

    if cache["member_weights"] is None:
        grads.w_h = da.T @ cache["z"]
        grads.b_h = da.sum(axis=0)
        dz = da @ params.w_h
    else:
        r_k, s_k = cache["member_weights"]
        k = cache["be_member"]
        grads.b_h = da.sum(axis=0)
        g_r = (da * hidden["pre"]).sum(axis=0)
        da_pre = da * r_k
        grads.w_h = da_pre.T @ hidden["zs"]
        dzs = da_pre @ params.w_h
        g_s = (dzs * cache["z"]).sum(axis=0)
        dz = dzs * s_k
        grads.be_r = np.zeros_like(model.be_state.r)
        grads.be_s = np.zeros_like(model.be_state.s)
        grads.be_r[k] = g_r
        grads.be_s[k] = g_s

    d = model.dims.embed_dim
    dctx = dz[:, :d]
    dpre = dz[:, d:]
    grads.embed = cache["ctx_w"].T @ dctx + cache["pre_w"].T @ dpre
    return loss, grads
