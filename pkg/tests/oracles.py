"""Independent brute-force implementations used to cross-check the package.

Everything here favors obviousness over speed: plain python loops, O(n^2)
rank counting, exhaustive enumeration.  These are the second route for
every derived quantity the test suite freezes.
"""

import itertools
import math

import numpy as np


def ece_oracle(pairs, k):
    """Scan each pair over the bin edges (k-1)/K < p <= k/K."""
    n = len(pairs)
    bins = [[] for _ in range(k)]
    for p in pairs:
        for b in range(1, k + 1):
            low = (b - 1) / k
            high = b / k
            if low < p.confidence <= high:
                bins[b - 1].append(p)
                break
        else:
            raise AssertionError(f"confidence {p.confidence} fell outside every bin")
    total = 0.0
    for members in bins:
        if not members:
            continue
        conf = sum(m.confidence for m in members) / len(members)
        acc = sum(1.0 for m in members if m.correct) / len(members)
        total += len(members) / n * abs(conf - acc)
    return total


def ranks_oracle(values):
    """O(n^2) average ranks: 1 + #smaller + (#equal - 1) / 2."""
    out = []
    for v in values:
        smaller = sum(1 for w in values if w < v)
        equal = sum(1 for w in values if w == v)
        out.append(1.0 + smaller + (equal - 1) / 2.0)
    return out


def pearson_oracle(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    vx = sum((a - mx) ** 2 for a in x)
    vy = sum((b - my) ** 2 for b in y)
    return cov / math.sqrt(vx * vy)


def spearman_oracle(u, q):
    return pearson_oracle(ranks_oracle(list(u)), ranks_oracle(list(q)))


def auc_oracle(u, quality, theta):
    """All good-bad pairs compared one by one; ties count one half."""
    goods = [ui for ui, qi in zip(u, quality) if qi > theta]
    bads = [ui for ui, qi in zip(u, quality) if not qi > theta]
    total = 0.0
    for g in goods:
        for b in bads:
            if g > b:
                total += 1.0
            elif g == b:
                total += 0.5
    return total / (len(goods) * len(bads))


def abstention_oracle(records, quality_key, alphas):
    ordered = sorted(records, key=lambda r: (r.uncertainty, r.id))
    quals = [r.quality[quality_key] for r in ordered]
    n = len(quals)
    out = []
    for a in alphas:
        drop = int(math.floor(a * n))
        kept = quals[drop:]
        out.append(math.fsum(kept) / len(kept))
    return out


def rouge_n_oracle(hyp, ref, n):
    """Counting route shared with test_rouge; returns (p, r, f1)."""
    def grams(seq):
        out = {}
        for i in range(len(seq) - n + 1):
            g = tuple(seq[i : i + n])
            out[g] = out.get(g, 0) + 1
        return out

    hg, rg = grams(hyp), grams(ref)
    overlap = sum(min(c, rg[g]) for g, c in hg.items() if g in rg)
    th = sum(hg.values())
    tr = sum(rg.values())
    p = overlap / th if th else 0.0
    r = overlap / tr if tr else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def lcs_oracle(a, b):
    """Exhaustive subsequence enumeration; fine for len <= 10."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    for k in range(len(short), 0, -1):
        for combo in itertools.combinations(short, k):
            if is_subseq(combo, long_):
                return k
    return 0


def rouge_l_oracle(hyp, ref):
    if not hyp or not ref:
        return 0.0, 0.0, 0.0
    lcs = lcs_oracle(tuple(hyp), tuple(ref))
    p = lcs / len(hyp)
    r = lcs / len(ref)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def forward_oracle(model, input_tokens, prefix_tokens):
    """Scalar-loop forward pass for the deterministic heads.

    Mirrors the documented architecture directly: mean embeddings, tanh
    hidden layer, then either the linear output layer or the cosine
    feature head.  No dropout, base batch-ensemble member only.
    """
    params = model.params
    d = model.dims.embed_dim
    dh = model.dims.hidden_dim

    def mean_embed(tokens):
        if len(tokens) == 0:
            return [float(params.embed[model.dims.bos_id, j]) for j in range(d)]
        acc = [0.0] * d
        for t in tokens:
            for j in range(d):
                acc[j] += float(params.embed[t, j])
        return [a / len(tokens) for a in acc]

    z = mean_embed(input_tokens) + mean_embed(prefix_tokens)
    hidden = []
    for i in range(dh):
        a = float(params.b_h[i])
        for j in range(2 * d):
            a += float(params.w_h[i, j]) * z[j]
        hidden.append(math.tanh(a))
    if model.sngp_state is None:
        logits = []
        for v in range(model.dims.vocab_size):
            out = float(params.b_o[v])
            for i in range(dh):
                out += float(params.w_o[v, i]) * hidden[i]
            logits.append(out)
        return np.array(logits)
    state = model.sngp_state
    big_d = state.w_r.shape[0]
    phi = []
    for i in range(big_d):
        arg = float(state.b_r[i])
        for j in range(dh):
            arg += float(state.w_r[i, j]) * hidden[j]
        phi.append(math.sqrt(2.0 / big_d) * math.cos(arg))
    logits = []
    for v in range(model.dims.vocab_size):
        out = 0.0
        for i in range(big_d):
            out += float(state.beta[v, i]) * phi[i]
        logits.append(out)
    return np.array(logits)


def finite_difference_gradient(loss_fn, array, coords, step=1e-3):
    """Central differences of loss_fn at the given flat coordinates."""
    grads = {}
    flat = array.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = loss_fn()
        flat[c] = orig - step
        down = loss_fn()
        flat[c] = orig
        grads[c] = (up - down) / (2.0 * step)
    return grads


# The two decoding oracles below deliberately reuse posterior_mean_dist:
# they cross-check the search strategy, not the distribution itself
# (forward_oracle covers that).

def greedy_oracle(members, input_tokens, config, run_seed, example_id):
    """Greedy reference: one path, eos candidates collected along the way."""
    from seqcal.inference import posterior_mean_dist

    eos = members[0].dims.eos_id
    vocab = members[0].dims.vocab_size
    prefix = ()
    logps = []
    total = 0.0
    candidates = []
    for step in range(config.max_len):
        dist = posterior_mean_dist(members, input_tokens, prefix,
                                   run_seed=run_seed, example_id=example_id,
                                   step=step)
        logd = np.log(dist)
        if step > 0:
            candidates.append((tuple(prefix), tuple(logps), total, float(logd[eos])))
        best_v = min(
            (v for v in range(vocab) if v != eos),
            key=lambda v: (-float(logd[v]), v),
        )
        lp = float(logd[best_v])
        prefix = prefix + (best_v,)
        logps.append(lp)
        total += lp
    dist = posterior_mean_dist(members, input_tokens, prefix, run_seed=run_seed,
                               example_id=example_id, step=config.max_len)
    candidates.append((tuple(prefix), tuple(logps), total, float(np.log(dist[eos]))))

    def key(c):
        tokens, _, tot, eos_lp = c
        score = (tot + eos_lp) / (len(tokens) + 1) if config.length_norm else tot + eos_lp
        return (-score, tokens)

    return min(candidates, key=key)


def exhaustive_oracle(members, input_tokens, config, run_seed, example_id):
    """Score every content sequence up to max_len; independent of search."""
    from seqcal.inference import posterior_mean_dist

    eos = members[0].dims.eos_id
    vocab = members[0].dims.vocab_size
    content = [v for v in range(vocab) if v != eos]
    best = None
    best_key = None
    seqs = [()]
    all_seqs = []
    for _ in range(config.max_len):
        seqs = [s + (v,) for s in seqs for v in content]
        all_seqs.extend(seqs)
    for seq in all_seqs:
        logps = []
        for t in range(len(seq)):
            dist = posterior_mean_dist(members, input_tokens, seq[:t],
                                       run_seed=run_seed, example_id=example_id,
                                       step=t)
            logps.append(float(np.log(dist[seq[t]])))
        dist = posterior_mean_dist(members, input_tokens, seq, run_seed=run_seed,
                                   example_id=example_id, step=len(seq))
        eos_lp = float(np.log(dist[eos]))
        total = sum(logps) + eos_lp
        score = total / (len(seq) + 1) if config.length_norm else total
        key = (-score, seq)
        if best_key is None or key < best_key:
            best_key = key
            best = (seq, tuple(logps), eos_lp)
    return best
