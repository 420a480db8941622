"""Stage-oriented command line: synth, run, label, train, eval, bench, chain.

Every stage reads its persisted inputs from the output directory plus the
run config, and writes files whose first line (or ``header`` key) carries the
schema version, master seed and config digest.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import bench, classifier, labels, store
from .gate import GateConfig, PadPolicy
from .lm import GenerationParams, SyntheticTaskSpec, make_contexts, make_synthetic_pair
from .utility import OracleScorer, PivotOracleConfig, make_utility

log = logging.getLogger("padsd")

TASK_SCHEMA = "padsd.task/1"
REPORT_SCHEMA = "padsd.report/1"
AUDIT_SCHEMA = "padsd.audit/1"
TRAIN_SCHEMA = "padsd.train-report/1"
EVAL_SCHEMA = "padsd.eval/1"
BENCH_SCHEMA = "padsd.bench/1"
LABEL_STATS_SCHEMA = "padsd.label-audit/1"

LABEL_STREAM = 0
EVAL_STREAM = 1

DEFAULT_CONFIG = {
    "seed": 0,
    "task": {
        "vocab_size": 5,
        "order": 2,
        "perturbation": 0.5,
        "d_h": 32,
        "task": {"kind": "substring", "bigram": [2, 3]},
        "eos_mass": 0.02,
        "n_contexts": 800,
        "context_len": 3,
        "dirichlet_alpha": 0.5,
    },
    "generation": {"temperature": 1.0, "top_p": 1.0, "top_k": None, "max_len": 24},
    "gamma": 10,
    "gate": {"sigma": 0.7, "prob_floor": 1e-4},
    "label": {
        "alpha": 0.8,
        "n_rollouts": 32,
        "max_steps": 24,
        "exact": False,
        "max_samples_per_context": None,
        "rollout_budget": None,
    },
    "train": {"d_u": 32, "d_v": 8, "d_f": 32, "lr": 0.05, "epochs": 60, "batch_size": 64, "split": 0.8},
    "profile": {"t_draft": 1.0, "t_target": 3.94, "classifier_cost": 0.0},
    "bench": {"sigmas": [0.7, 0.5, 0.3], "samples_per_context": 1, "n_contexts": 400, "oracle": False},
    "jobs": 1,
}


def merge(base: dict, override: dict, _depth: int = 0) -> dict:
    """Recursive dict merge; the utility-task dict inside ``task`` is replaced whole."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and not (_depth > 0 and k == "task"):
            out[k] = merge(out[k], v, _depth + 1)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        cfg = merge(cfg, json.loads(Path(args.config).read_text()))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "sigma", None) is not None:
        cfg["gate"]["sigma"] = args.sigma
    if getattr(args, "prob_floor", None) is not None:
        cfg["gate"]["prob_floor"] = args.prob_floor
    if getattr(args, "alpha", None) is not None:
        cfg["label"]["alpha"] = args.alpha
    if getattr(args, "gamma", None) is not None:
        cfg["gamma"] = args.gamma
    if getattr(args, "rollouts", None) is not None:
        cfg["label"]["n_rollouts"] = args.rollouts
    if getattr(args, "profile", None):
        p = bench.TimingProfile.parse(args.profile)
        cfg["profile"].update(t_draft=p.t_draft, t_target=p.t_target)
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "oracle", False):
        cfg["bench"]["oracle"] = True
    if cfg["task"].get("seed") is None:
        cfg["task"]["seed"] = cfg["seed"]
    return cfg


def digest_view(cfg: dict) -> dict:
    """The part of the config that determines outputs (jobs never does)."""
    return {k: v for k, v in cfg.items() if k != "jobs"}


def header(schema: str, cfg: dict, **extra) -> dict:
    return store.make_header(schema, cfg["seed"], digest_view(cfg), **extra)


def gen_params(cfg: dict) -> GenerationParams:
    return GenerationParams(seed=cfg["seed"], **cfg["generation"])


# ---------------------------------------------------------------- task bundle


def write_task(path: Path, spec: SyntheticTaskSpec, hdr: dict) -> None:
    store.write_json(path, hdr, {"spec": spec.to_dict()})


def read_task(out: Path) -> SyntheticTaskSpec:
    data = store.read_json(out / "task.json", TASK_SCHEMA)
    return SyntheticTaskSpec.from_dict(data["spec"])


def load_models(out: Path):
    spec = read_task(out)
    target, draft = make_synthetic_pair(spec)
    return spec, target, draft, make_utility(spec.task, spec.vocab_size)


def cmd_synth(cfg: dict, out: Path) -> Path:
    spec = SyntheticTaskSpec.from_dict(cfg["task"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "task.json"
    write_task(path, spec, header(TASK_SCHEMA, cfg))
    (out / "config.json").write_text(json.dumps(digest_view(cfg), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- decoding runs


def load_classifier(out: Path, path: str | None = None) -> classifier.MLPParams:
    src = Path(path) if path else out / "classifier.txt"
    if not src.exists():
        raise FileNotFoundError(f"no classifier at {src}; train one or pass --oracle")
    params, _ = classifier.params_from_text(src.read_text())
    return params


def make_pad_policy(cfg: dict, out: Path, target, u, sigma: float, oracle: bool, classifier_path=None) -> PadPolicy:
    gate = GateConfig(sigma=sigma, prob_floor=cfg["gate"]["prob_floor"])
    if oracle:
        ocfg = PivotOracleConfig(epsilon=0.0, n_rollouts=cfg["label"]["n_rollouts"], params=gen_params(cfg))
        return PadPolicy(OracleScorer(target, u, ocfg, seed=cfg["seed"]), gate)
    params = load_classifier(out, classifier_path)
    return PadPolicy(classifier.MLPScorer(params), gate, classifier.position_features(target))


def run_decoder(cfg: dict, out: Path, kind: str, sigma: float | None = None, oracle: bool = False,
                classifier_path: str | None = None, write: bool = True) -> bench.RunReport:
    spec, target, draft, u = load_models(out)
    contexts = make_contexts(spec, EVAL_STREAM, cfg["bench"]["n_contexts"])
    profile = bench.TimingProfile(**cfg["profile"])
    policy = None
    if kind == "pad":
        sigma = cfg["gate"]["sigma"] if sigma is None else sigma
        policy = make_pad_policy(cfg, out, target, u, sigma, oracle, classifier_path)
    name = bench.decoder_id(kind, sigma if kind == "pad" else None)
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    audit_path = rdir / f"{name}.audit.jsonl"
    audit_fh = open(audit_path, "w", encoding="utf-8", newline="\n") if write else None
    try:
        if audit_fh:
            audit_fh.write(json.dumps(header(AUDIT_SCHEMA, cfg, decoder=name)) + "\n")
        report = bench.simulate_run(
            kind, target, draft, contexts, u, cfg["gamma"], gen_params(cfg), profile, cfg["seed"],
            policy=policy, name=name, samples_per_context=cfg["bench"]["samples_per_context"], audit=audit_fh,
        )
    finally:
        if audit_fh:
            audit_fh.close()
    if write:
        store.write_json(rdir / f"{name}.json", header(REPORT_SCHEMA, cfg, decoder=name), {"report": report.to_dict()})
        (rdir / f"{name}.timing.json").write_text(json.dumps({"decoder": name, "wall_clock_s": report.wall_clock}) + "\n")
    return report


# ---------------------------------------------------------------- labeling


def label_config(cfg: dict) -> labels.LabelConfig:
    return labels.LabelConfig(params=gen_params(cfg), seed=cfg["seed"], **cfg["label"])


def cmd_label(cfg: dict, out: Path) -> tuple[Path, dict]:
    spec, target, draft, u = load_models(out)
    contexts = make_contexts(spec, LABEL_STREAM)
    judge = labels.CancelPairJudge(spec.vocab_size)
    results = labels.harvest_and_label(contexts, target, draft, u, label_config(cfg), judge, jobs=cfg["jobs"])
    hdr = header(labels.LABELS_SCHEMA, cfg, fields=list(labels.RECORD_FIELDS))
    rows = [s.to_record() for r in results for s in r.samples]
    truncated = [i for i, r in enumerate(results) if r.truncated]
    if truncated:
        rows.append({"truncated": True, "contexts": truncated})
    path = out / "labels.jsonl"
    store.write_jsonl(path, hdr, rows)
    stats = {
        "n_contexts": len(contexts),
        "sd_rejections": sum(r.n_rejections for r in results),
        "per_context_rejections": [r.n_rejections for r in results],
        "n_samples": sum(len(r.samples) for r in results),
        "n_pivot": sum(s.label == labels.PIVOT for r in results for s in r.samples),
        "n_judge_flipped": sum(s.judge_flipped for r in results for s in r.samples),
        "truncated_contexts": truncated,
    }
    store.write_json(out / "labels.audit.json", header(LABEL_STATS_SCHEMA, cfg), {"stats": stats})
    return path, stats


def read_labels(path: Path) -> tuple[dict, list[labels.LabeledSample]]:
    hdr, rows = store.read_jsonl(path, labels.LABELS_SCHEMA)
    samples = [labels.LabeledSample.from_record(r) for r in rows if "truncated" not in r]
    return hdr, samples


# ---------------------------------------------------------------- classifier


def train_config(cfg: dict) -> classifier.TrainConfig:
    return classifier.TrainConfig(seed=cfg["seed"], **cfg["train"])


def cmd_train(cfg: dict, out: Path, dataset: Path | None = None) -> tuple[Path, classifier.TrainReport]:
    _, samples = read_labels(dataset or out / "labels.jsonl")
    if not samples:
        raise classifier.DegenerateDatasetError("label file holds no samples")
    H, S, y = labels.dataset_arrays(samples)
    tcfg = train_config(cfg)
    params, report = classifier.train(H, S, y, tcfg)
    path = out / "classifier.txt"
    path.write_text(classifier.params_to_text(params, {**header("padsd.mlp", cfg), "train": tcfg.to_dict()}))
    store.write_json(out / "train_report.json", header(TRAIN_SCHEMA, cfg), {"report": report.to_dict()})
    return path, report


def cmd_eval(cfg: dict, out: Path, params_path: Path | None = None, dataset: Path | None = None) -> dict:
    src = params_path or out / "classifier.txt"
    params, phdr = classifier.params_from_text(src.read_text())
    _, samples = read_labels(dataset or out / "labels.jsonl")
    H, S, y = labels.dataset_arrays(samples)
    split = phdr.get("train", {}).get("split", cfg["train"]["split"])
    seed = phdr.get("train", {}).get("seed", cfg["seed"])
    _, test = classifier.split_indices(len(y), split, seed)
    points, auc = classifier.roc_auc(params, H[test], S[test], y[test])
    n_pos, n_neg = int(y[test].sum()), int(len(test) - y[test].sum())
    se = classifier.auc_stderr(auc, n_pos, n_neg)
    result = {"auc": auc, "auc_se": se, "n_pos": n_pos, "n_neg": n_neg, "above_baseline": auc > 0.5 + 3 * se}
    store.write_json(out / "eval.json", header(EVAL_SCHEMA, cfg), {"eval": result})
    with open(out / "roc.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# schema=padsd.roc/1 seed={cfg['seed']} config_digest={store.config_digest(digest_view(cfg))}\n")
        fh.write("threshold,fpr,tpr\n")
        for thr, fpr, tpr in points:
            fh.write(f"{thr!r},{fpr!r},{tpr!r}\n")
    return result


# ---------------------------------------------------------------- bench


def cmd_bench(cfg: dict, out: Path) -> bench.Comparison:
    oracle = cfg["bench"]["oracle"]
    reports = [run_decoder(cfg, out, "target"), run_decoder(cfg, out, "sd")]
    for sigma in cfg["bench"]["sigmas"]:
        reports.append(run_decoder(cfg, out, "pad", sigma=sigma, oracle=oracle))
    reports.append(run_decoder(cfg, out, "draft"))
    table = bench.compare_report(reports)
    hdr = header(BENCH_SCHEMA, cfg)
    (out / "bench.txt").write_text(
        f"# schema={BENCH_SCHEMA} seed={cfg['seed']} config_digest={hdr['config_digest']}\n" + table.text()
    )
    store.write_jsonl(out / "bench.jsonl", hdr, table.records())
    return table


def cmd_chain(cfg: dict, out: Path) -> bench.Comparison:
    cmd_synth(cfg, out)
    cmd_label(cfg, out)
    cmd_train(cfg, out)
    cmd_eval(cfg, out)
    return cmd_bench(cfg, out)


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="padsd", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (missing keys take defaults)")
    common.add_argument("--out", required=True, help="output directory holding the task bundle")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--sigma", type=float, help="pivot-score threshold for overrides")
    common.add_argument("--prob-floor", type=float, dest="prob_floor", help="minimum target prob for an override")
    common.add_argument("--alpha", type=float, help="labeling tolerance")
    common.add_argument("--gamma", type=int, help="draft block length")
    common.add_argument("--rollouts", type=int, help="rollouts per utility estimate")
    common.add_argument("--profile", help="t_draft,t_target cost units")
    common.add_argument("--jobs", type=int, help="worker processes for labeling")
    common.add_argument("--oracle", action="store_true", help="use the exact pivot oracle instead of the MLP")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write the task bundle")
    run = sub.add_parser("run", parents=[common], help="run one decoder and write its report")
    run.add_argument("--decoder", choices=["target", "draft", "sd", "pad"], required=True)
    run.add_argument("--classifier", help="classifier params file (default OUT/classifier.txt)")
    sub.add_parser("label", parents=[common], help="harvest and label SD-rejected candidates")
    tr = sub.add_parser("train", parents=[common], help="train the pivot classifier")
    tr.add_argument("--dataset", help="label file (default OUT/labels.jsonl)")
    ev = sub.add_parser("eval", parents=[common], help="ROC/AUC of the classifier on the held-out split")
    ev.add_argument("--params", help="classifier params file")
    ev.add_argument("--dataset", help="label file")
    sub.add_parser("bench", parents=[common], help="target / SD / PAD sweep / draft comparison table")
    sub.add_parser("chain", parents=[common], help="synth, label, train, eval and bench in one go")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            print(cmd_synth(cfg, out))
        elif args.command == "run":
            report = run_decoder(cfg, out, args.decoder, oracle=args.oracle, classifier_path=args.classifier)
            print(json.dumps(report.to_dict(), indent=2))
        elif args.command == "label":
            path, stats = cmd_label(cfg, out)
            print(f"{path}: {stats['n_samples']} samples, {stats['n_pivot']} pivot")
        elif args.command == "train":
            path, report = cmd_train(cfg, out, Path(args.dataset) if args.dataset else None)
            print(f"{path}: best epoch {report.best_epoch}, val loss {report.best_val_loss:.4f}")
        elif args.command == "eval":
            res = cmd_eval(cfg, out, Path(args.params) if args.params else None,
                           Path(args.dataset) if args.dataset else None)
            print(f"AUC {res['auc']:.3f} +/- {res['auc_se']:.3f} (pos={res['n_pos']}, neg={res['n_neg']})")
        elif args.command == "bench":
            sys.stdout.write(cmd_bench(cfg, out).text())
        elif args.command == "chain":
            sys.stdout.write(cmd_chain(cfg, out).text())
    except (ValueError, FileNotFoundError, store.SchemaError) as exc:
        print(f"padsd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
