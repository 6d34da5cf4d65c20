"""Command-line pipeline: gen-data, train, infer, eval.

One JSON run-config drives all four stages against one output directory:

    seqcal gen-data --config run.json --out runs/demo
    seqcal train    --config run.json --out runs/demo --method mcd
    seqcal infer    --config run.json --out runs/demo --method mcd
    seqcal eval     --config run.json --out runs/demo

Layout under --out:

    manifest.json            resolved config echo plus derived values
    vocab.json               vocabulary for every later stage
    train.jsonl dev.jsonl test.jsonl
    models/<method>.json     trained member bundle
    preds/<method>.jsonl     decoded predictions for the eval split
    reports/*.csv            calibration, correlation, selection reports

Every stochastic choice derives from the single top-level seed, so a
rerun of any stage writes byte-identical files.  Model-intrinsic knobs
(sample count, dropout rate, ensemble sizes) travel inside the bundle;
the config's decode section only controls the search.

Exit codes: 0 on success, 1 for configuration or file-validation
problems, 2 for runtime numerical failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

from .calib import (
    EceConfig,
    QUALITY_KEYS,
    _average_ranks,
    _fmt_float,
    abstention_curve,
    bootstrap_std,
    ece,
    roc_auc,
    sequence_pairs,
    token_pairs,
    write_abstention_csv,
    write_corr_csv,
    write_ece_csv,
    write_roc_csv,
)
from .corpus import (
    TaskSpec,
    generate_corpus,
    make_vocabulary,
    read_records,
    read_vocabulary,
    split_corpus,
    vocabulary_sha256,
    write_records,
    write_vocabulary,
)
from .errors import (
    ConfigurationError,
    InputError,
    MetricError,
    NumericalStateError,
    TrainingError,
    UndefinedCorrelationError,
    ValidationError,
)
from .inference import (
    PosteriorConfig,
    decode_corpus,
    join_with_references,
    read_predictions,
    write_predictions,
)
from .model import METHODS, MethodConfig, ModelDims, SngpConfig, is_deep_ensemble
from .rng import derive_seed
from .training import (
    TrainHyper,
    check_vocab_match,
    evaluate_loss,
    read_bundle,
    train_method,
    write_bundle,
)

MAX_SEED = 2**64 - 1


# ---------------------------------------------------------------------------
# Run configuration: a JSON file with strict keys and full defaults.


@dataclass(frozen=True)
class TaskSection:
    kind: str = "copy"
    input_len: int = 5
    output_len: int = 5
    noise_rate: float = 0.0
    num_keywords: int = 4


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 16
    hidden_dim: int = 32


@dataclass(frozen=True)
class TrainSection:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 0.5


@dataclass(frozen=True)
class MethodsSection:
    samples: int = 10
    dropout_rate: float = 0.1
    be_size: int = 5
    de_size: int = 10
    sngp: SngpConfig = field(default_factory=SngpConfig)


@dataclass(frozen=True)
class DecodeSection:
    beam_size: int = 3
    length_norm: bool = True
    prune_length_norm: bool = False


@dataclass(frozen=True)
class EvalSection:
    ece_bins: int = 15
    thresholds: tuple = (("rouge1", 40.0), ("rouge2", 15.0), ("rougeL", 30.0))
    alphas: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    bootstrap_resamples: int = 200

    def threshold_map(self) -> dict:
        return dict(self.thresholds)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    vocab_size: int = 20
    n_examples: int = 2000
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    methods: MethodsSection = field(default_factory=MethodsSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def task_spec(self, vocab) -> TaskSpec:
        t = self.task
        keyword_ids = ()
        if t.kind == "keyword-extract":
            if t.num_keywords < 1:
                raise ConfigurationError(
                    f"task.num_keywords must be >= 1, got {t.num_keywords}"
                )
            content = vocab.content_ids
            if t.num_keywords > len(content):
                raise ConfigurationError(
                    f"task.num_keywords {t.num_keywords} exceeds the "
                    f"{len(content)} content tokens"
                )
            keyword_ids = tuple(content[: t.num_keywords])
        spec = TaskSpec(
            kind=t.kind,
            input_len=t.input_len,
            output_len=t.output_len,
            noise_rate=t.noise_rate,
            seed=derive_seed(self.seed, "task"),
            keyword_ids=keyword_ids,
        )
        spec.validate(vocab)
        return spec

    def dims(self, vocab) -> ModelDims:
        return ModelDims(
            vocab_size=vocab.size,
            embed_dim=self.model.embed_dim,
            hidden_dim=self.model.hidden_dim,
            bos_id=vocab.bos_id,
            eos_id=vocab.eos_id,
        )

    def method_config(self, method: str) -> MethodConfig:
        m = self.methods
        seeds = ()
        if is_deep_ensemble(method):
            if m.de_size < 2:
                raise ConfigurationError(f"methods.de_size must be >= 2, got {m.de_size}")
            seeds = tuple(
                derive_seed(self.seed, "train", method, i) for i in range(m.de_size)
            )
        return MethodConfig(
            method=method,
            samples=m.samples,
            dropout_rate=m.dropout_rate,
            be_size=m.be_size,
            sngp=m.sngp,
            seeds=seeds,
        )

    def train_hyper(self) -> TrainHyper:
        t = self.train
        return TrainHyper(steps=t.steps, batch_size=t.batch_size,
                          learning_rate=t.learning_rate)

    def posterior_config(self) -> PosteriorConfig:
        d = self.decode
        return PosteriorConfig(
            beam_size=d.beam_size,
            max_len=self.task.output_len,
            length_norm=d.length_norm,
            prune_length_norm=d.prune_length_norm,
        )

    def train_seed(self, method: str) -> int:
        return derive_seed(self.seed, "train", method)

    def run_seed(self, method: str) -> int:
        return derive_seed(self.seed, "infer", method)

    def bootstrap_seed(self, method: str, metric: str) -> int:
        return derive_seed(self.seed, "bootstrap", method, metric)


def _expect(payload, where: str, fields: dict) -> dict:
    """Pick known keys out of a JSON object, rejecting unknown ones and
    enforcing scalar types.  `fields` maps name -> (type tuple, default)."""
    if not isinstance(payload, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = sorted(set(payload) - set(fields))
    if unknown:
        raise ConfigurationError(f"{where} has unknown keys {unknown}")
    out = {}
    for name, (types, default) in fields.items():
        if name not in payload:
            out[name] = default
            continue
        value = payload[name]
        if types is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        expected = (types,) if not isinstance(types, tuple) else types
        if not isinstance(value, expected) or isinstance(value, bool) and bool not in expected:
            raise ConfigurationError(
                f"{where}.{name} must be {getattr(types, '__name__', types)}, "
                f"got {type(value).__name__}"
            )
        out[name] = value
    return out


def _int_field(value, where, minimum=None, maximum=None):
    if minimum is not None and value < minimum:
        raise ConfigurationError(f"{where} must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        raise ConfigurationError(f"{where} must be <= {maximum}, got {value}")
    return value


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    top = _expect(payload, "config", {
        "seed": (int, 0),
        "vocab_size": (int, 20),
        "n_examples": (int, 2000),
        "task": (dict, {}),
        "model": (dict, {}),
        "train": (dict, {}),
        "methods": (dict, {}),
        "decode": (dict, {}),
        "eval": (dict, {}),
    })
    _int_field(top["seed"], "config.seed", 0, MAX_SEED)
    _int_field(top["vocab_size"], "config.vocab_size", 4)
    _int_field(top["n_examples"], "config.n_examples", 1)

    task = _expect(top["task"], "task", {
        "kind": (str, "copy"),
        "input_len": (int, 5),
        "output_len": (int, 5),
        "noise_rate": (float, 0.0),
        "num_keywords": (int, 4),
    })
    model = _expect(top["model"], "model", {
        "embed_dim": (int, 16),
        "hidden_dim": (int, 32),
    })
    _int_field(model["embed_dim"], "model.embed_dim", 1)
    _int_field(model["hidden_dim"], "model.hidden_dim", 1)
    train = _expect(top["train"], "train", {
        "steps": (int, 300),
        "batch_size": (int, 32),
        "learning_rate": (float, 0.5),
    })
    methods = _expect(top["methods"], "methods", {
        "samples": (int, 10),
        "dropout_rate": (float, 0.1),
        "be_size": (int, 5),
        "de_size": (int, 10),
        "sngp": (dict, {}),
    })
    sngp = _expect(methods["sngp"], "methods.sngp", {
        "rff_dim": (int, 128),
        "kernel_scale": (float, 1.0),
        "mean_field_factor": (float, 1e-4),
        "cov_momentum": (float, 0.999),
        "spec_norm_bound": (float, 1.0),
        "power_iters": (int, 100),
    })
    decode = _expect(top["decode"], "decode", {
        "beam_size": (int, 3),
        "length_norm": (bool, True),
        "prune_length_norm": (bool, False),
    })
    ev = _expect(top["eval"], "eval", {
        "ece_bins": (int, 15),
        "thresholds": (dict, {}),
        "alphas": (list, [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
        "bootstrap_resamples": (int, 200),
    })
    thresholds = _expect(ev["thresholds"], "eval.thresholds", {
        "rouge1": (float, 40.0),
        "rouge2": (float, 15.0),
        "rougeL": (float, 30.0),
    })
    for key, value in thresholds.items():
        if not 0.0 <= value <= 100.0:
            raise ConfigurationError(
                f"eval.thresholds.{key} must lie in [0, 100], got {value}"
            )
    alphas = ev["alphas"]
    if not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in alphas):
        raise ConfigurationError("eval.alphas must be a list of numbers")
    alphas = tuple(float(a) for a in alphas)
    _int_field(ev["bootstrap_resamples"], "eval.bootstrap_resamples", 2)
    _int_field(ev["ece_bins"], "eval.ece_bins", 1)

    return RunConfig(
        seed=top["seed"],
        vocab_size=top["vocab_size"],
        n_examples=top["n_examples"],
        task=TaskSection(**task),
        model=ModelSection(**model),
        train=TrainSection(**train),
        methods=MethodsSection(
            samples=methods["samples"],
            dropout_rate=methods["dropout_rate"],
            be_size=methods["be_size"],
            de_size=methods["de_size"],
            sngp=SngpConfig(**sngp),
        ),
        decode=DecodeSection(**decode),
        eval=EvalSection(
            ece_bins=ev["ece_bins"],
            thresholds=tuple(sorted(thresholds.items())),
            alphas=alphas,
            bootstrap_resamples=ev["bootstrap_resamples"],
        ),
    )


# ---------------------------------------------------------------------------
# Output directory layout.


class OutDir:
    def __init__(self, root):
        self.root = str(root)

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def vocab(self):
        return self.path("vocab.json")

    @property
    def manifest(self):
        return self.path("manifest.json")

    def split(self, name: str):
        return self.path(f"{name}.jsonl")

    def model_bundle(self, method: str):
        return self.path("models", f"{method}.json")

    def predictions(self, method: str):
        return self.path("preds", f"{method}.jsonl")

    def report(self, name: str):
        return self.path("reports", name)

    def ensure(self, *parts) -> None:
        os.makedirs(self.path(*parts) if parts else self.root, exist_ok=True)


def _resolve_methods(arg: str) -> list[str]:
    if arg == "all":
        return list(METHODS)
    out = []
    for name in arg.split(","):
        name = name.strip()
        if name not in METHODS:
            raise ConfigurationError(
                f"unknown method {name!r}; choose from {', '.join(METHODS)} or 'all'"
            )
        out.append(name)
    if not out:
        raise ConfigurationError("no method given")
    return out


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_gen_data(config: RunConfig, out: OutDir) -> None:
    vocab = make_vocabulary(config.vocab_size)
    spec = config.task_spec(vocab)
    records = generate_corpus(spec, config.n_examples, vocab)
    train, dev, test = split_corpus(records, seed=config.seed)
    out.ensure()
    write_vocabulary(vocab, out.vocab)
    for name, part in (("train", train), ("dev", dev), ("test", test)):
        write_records(part, out.split(name))
    manifest = {
        "config": asdict(config),
        "derived": {
            "task_seed": spec.seed,
            "keyword_ids": list(spec.keyword_ids),
            "vocab_sha256": vocabulary_sha256(vocab),
            "splits": {"train": len(train), "dev": len(dev), "test": len(test)},
        },
    }
    with open(out.manifest, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(records)} {spec.kind} examples to {out.root} "
          f"(train {len(train)}, dev {len(dev)}, test {len(test)})")


def cmd_train(config: RunConfig, out: OutDir, method_arg: str) -> None:
    vocab = read_vocabulary(out.vocab)
    sha = vocabulary_sha256(vocab)
    examples = read_records(out.split("train"))
    dev = read_records(out.split("dev"))
    dims = config.dims(vocab)
    hyper = config.train_hyper()
    out.ensure("models")
    for method in _resolve_methods(method_arg):
        mcfg = config.method_config(method)
        members = train_method(
            examples, dims, mcfg, hyper,
            seed=config.train_seed(method), vocab_sha256=sha,
        )
        write_bundle(members, out.model_bundle(method))
        train_ce = evaluate_loss(members[0], examples)
        dev_ce = evaluate_loss(members[0], dev)
        print(f"trained {method}: {len(members)} member(s), "
              f"train CE {train_ce:.4f}, dev CE {dev_ce:.4f}")


def cmd_infer(config: RunConfig, out: OutDir, method_arg: str, split: str) -> None:
    vocab = read_vocabulary(out.vocab)
    sha = vocabulary_sha256(vocab)
    examples = read_records(out.split(split))
    out.ensure("preds")
    for method in _resolve_methods(method_arg):
        bundle_path = out.model_bundle(method)
        if not os.path.exists(bundle_path):
            raise ConfigurationError(
                f"no trained model for {method!r} at {bundle_path}; run train first"
            )
        members = read_bundle(bundle_path)
        if members[0].config.method != method:
            raise ValidationError(
                f"bundle at {bundle_path} holds method "
                f"{members[0].config.method!r}, expected {method!r}"
            )
        check_vocab_match(members, sha)
        preds = decode_corpus(
            members, examples, config.posterior_config(),
            run_seed=config.run_seed(method),
        )
        write_predictions(preds, out.predictions(method))
        print(f"decoded {len(preds)} examples with {method} -> "
              f"{out.predictions(method)}")


def _eval_one_method(method, joined, config: RunConfig, gaps):
    """All metric rows for one method; failures become gap entries."""
    ev = config.eval
    rows = {"ece": [], "corr": [], "roc": [], "abstention": []}
    headline = {}
    seq = sequence_pairs(joined)
    for level, pairs in (("sequence", seq), ("token", token_pairs(joined).pairs)):
        try:
            value = ece(pairs, EceConfig(bins=ev.ece_bins, level=level))
            rows["ece"].append((method, level, ev.ece_bins, value))
            if level == "sequence":
                headline["ece"] = value
        except (MetricError, ConfigurationError) as exc:
            gaps.append((method, "ece", level, str(exc)))
    u = [r.uncertainty for r in joined]
    thresholds = ev.threshold_map()
    for metric in QUALITY_KEYS:
        q = [r.quality[metric] for r in joined]
        seed = config.bootstrap_seed(method, metric)
        try:
            boot = bootstrap_std(u, q, ev.bootstrap_resamples, seed)
            rows["corr"].append(
                (method, metric, boot.rho, boot.std, ev.bootstrap_resamples, seed)
            )
            if metric == "rougeL":
                headline["rho"] = boot.rho
        except (UndefinedCorrelationError, MetricError) as exc:
            gaps.append((method, "corr", metric, str(exc)))
        theta = thresholds[metric]
        try:
            auc = roc_auc(u, q, theta)
            rows["roc"].append((method, metric, theta, auc))
            if metric == "rougeL":
                headline["auc"] = auc
        except MetricError as exc:
            gaps.append((method, "roc", metric, str(exc)))
        try:
            curve = abstention_curve(joined, metric, ev.alphas)
            for alpha, value in zip(curve.alphas, curve.values):
                rows["abstention"].append((method, metric, alpha, value))
        except MetricError as exc:
            gaps.append((method, "abstention", metric, str(exc)))
    return rows, headline


def _summary_rows(headlines: dict) -> list[tuple]:
    """Per-method headline values plus average ranks; lower rank is better
    on every column, absent values leave empty cells."""
    methods = list(headlines)
    columns = (("ece", 1.0), ("rho", -1.0), ("auc", -1.0))
    ranks = {m: {} for m in methods}
    for name, sign in columns:
        have = [m for m in methods if name in headlines[m]]
        if have:
            values = [sign * headlines[m][name] for m in have]
            for m, rank in zip(have, _average_ranks(values)):
                ranks[m][name] = float(rank)
    rows = []
    for m in methods:
        rank_values = [ranks[m][name] for name, _ in columns if name in ranks[m]]
        mean_rank = sum(rank_values) / len(rank_values) if rank_values else None
        rows.append((m, headlines[m], ranks[m], mean_rank))
    rows.sort(key=lambda r: (r[3] is None, r[3] if r[3] is not None else 0.0, r[0]))
    out = []
    for m, head, rank, mean_rank in rows:
        out.append((
            m,
            _fmt_float(head["ece"]) if "ece" in head else "",
            _fmt_float(head["rho"]) if "rho" in head else "",
            _fmt_float(head["auc"]) if "auc" in head else "",
            _fmt_float(rank["ece"]) if "ece" in rank else "",
            _fmt_float(rank["rho"]) if "rho" in rank else "",
            _fmt_float(rank["auc"]) if "auc" in rank else "",
            _fmt_float(mean_rank) if mean_rank is not None else "",
        ))
    return out


def cmd_eval(config: RunConfig, out: OutDir, method_arg: str | None) -> None:
    test = read_records(out.split("test"))
    if method_arg is None:
        methods = [m for m in METHODS if os.path.exists(out.predictions(m))]
        if not methods:
            raise ConfigurationError(
                f"no prediction files under {out.path('preds')}; run infer first"
            )
    else:
        methods = _resolve_methods(method_arg)
        for m in methods:
            if not os.path.exists(out.predictions(m)):
                raise ConfigurationError(
                    f"no predictions for {m!r} at {out.predictions(m)}; run infer first"
                )
    out.ensure("reports")
    all_rows = {"ece": [], "corr": [], "roc": [], "abstention": []}
    gaps = []
    headlines = {}
    for method in methods:
        joined = join_with_references(read_predictions(out.predictions(method)), test)
        rows, headline = _eval_one_method(method, joined, config, gaps)
        for key in all_rows:
            all_rows[key].extend(rows[key])
        headlines[method] = headline
        shown = {k: f"{v:.4f}" for k, v in headline.items()}
        print(f"eval {method}: " + (", ".join(f"{k} {v}" for k, v in shown.items())
                                    or "no headline metrics"))
    write_ece_csv(all_rows["ece"], out.report("ece.csv"))
    write_corr_csv(all_rows["corr"], out.report("corr.csv"))
    write_roc_csv(all_rows["roc"], out.report("roc.csv"))
    write_abstention_csv(all_rows["abstention"], out.report("abstention.csv"))
    with open(out.report("summary.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,ece_sequence,spearman_rougeL,auc_rougeL,"
                 "rank_ece,rank_spearman,rank_auc,mean_rank\n")
        for row in _summary_rows(headlines):
            fh.write(",".join(row) + "\n")
    with open(out.report("gaps.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,report,metric,reason\n")
        for method, report, metric, reason in gaps:
            reason = reason.replace('"', "'")
            fh.write(f'{method},{report},{metric},"{reason}"\n')
    note = f", {len(gaps)} metric gap(s) listed in gaps.csv" if gaps else ""
    print(f"wrote reports for {len(methods)} method(s) to {out.path('reports')}{note}")


# ---------------------------------------------------------------------------
# Argument parsing and exit-code mapping.


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqcal",
        description="Sequence uncertainty pipeline: synthetic data, "
                    "probabilistic seq2seq training, posterior-mean decoding, "
                    "calibration reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=False):
        p.add_argument("--config", required=True, help="run-config JSON file")
        p.add_argument("--out", required=True, help="output directory")
        if method:
            p.add_argument("--method", required=True,
                           help=f"one of {', '.join(METHODS)}, a comma list, or 'all'")

    g = sub.add_parser("gen-data", help="generate vocabulary, corpus, and splits")
    common(g)
    t = sub.add_parser("train", help="train model members for a method")
    common(t, method=True)
    i = sub.add_parser("infer", help="decode a split with a trained method")
    common(i, method=True)
    i.add_argument("--split", default="test", choices=("train", "dev", "test"),
                   help="which split to decode (default test)")
    e = sub.add_parser("eval", help="score predictions and write reports")
    common(e)
    e.add_argument("--method", default=None,
                   help="restrict to these methods (default: all with predictions)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        out = OutDir(args.out)
        if args.command == "gen-data":
            cmd_gen_data(config, out)
        elif args.command == "train":
            cmd_train(config, out, args.method)
        elif args.command == "infer":
            cmd_infer(config, out, args.method, args.split)
        elif args.command == "eval":
            cmd_eval(config, out, args.method)
        return 0
    except (ConfigurationError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InputError, TrainingError, NumericalStateError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
