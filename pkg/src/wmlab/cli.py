"""Command-line entry point: ``wmlab <subcommand> [options]``.

Token files are line-delimited JSON records ``{"ids": [...], "source_model":
..., "prompt": [...]}``; detection output records carry the fields
statistic, p_value, verdict, scheme, tokens_scored.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from wmlab import __version__, kernels
from wmlab.config import REFERENCE_CONFIG, load_config
from wmlab.errors import WmlabError


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.data["seeds"] = [args.seed]
    if args.out_dir is not None:
        cfg.data["out_dir"] = args.out_dir
    if args.workers is not None:
        cfg.data["workers"] = args.workers
    return cfg


def _world(cfg):
    from wmlab.harness import World

    return World(cfg)


def _read_records(path):
    from wmlab.lm import TokenSequence

    fh = sys.stdin if path == "-" else open(path, encoding="utf-8")
    out = []
    with fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append((TokenSequence(rec["ids"], rec.get("source_model", "external")), rec))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise WmlabError(f"{path}:{n}: bad token record ({exc})") from None
    return out


def _write_records(path, records):
    fh = sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8")
    for r in records:
        fh.write(json.dumps(r, sort_keys=True) + "\n")
    if fh is not sys.stdout:
        fh.close()


def cmd_train_lm(args):
    from wmlab.lm import load_corpus, train_ngram

    cfg = _load(args)
    if args.corpus:
        vocab, flat, _ = load_corpus(args.corpus, cap=args.vocab_cap)
        model = train_ngram(flat, args.order, args.smoothing_k, args.model_id or Path(args.corpus).stem, vocab)
    else:
        world = _world(cfg)
        if args.model_id not in world.models:
            raise WmlabError(f"unknown model {args.model_id!r}; config has {world.model_ids}")
        model = world.models[args.model_id]
    model.save(args.output)
    print(f"saved {model.model_id}: order {model.order}, |V|={model.vocab_size}, k={model.smoothing_k} -> {args.output}")


def cmd_generate(args):
    from wmlab.lm import NGramModel
    from wmlab.watermark import watermarked_generate

    cfg = _load(args)
    world = _world(cfg)
    model = NGramModel.load(args.model) if Path(args.model).exists() else world.models[args.model]
    scheme = world.keyed(args.scheme, args.key_model or model.model_id) if args.scheme else None
    if args.prompt is not None:
        prompts = [model.vocab.encode(args.prompt.lower().split())] * args.count
    else:
        prompts = world.prompts(args.count, args.seed or 0, 0x6E6)
    recs = []
    for j, p in enumerate(prompts):
        t = watermarked_generate(model, p, scheme, args.length, rng_seed=kernels.derive_seed(args.seed or 0, j),
                                 sampler=args.sampler)
        recs.append({"ids": t.ids.tolist(), "prompt": np.asarray(p).tolist(), "source_model": model.model_id,
                     "scheme": scheme.name if scheme else None, "text": " ".join(model.vocab.decode(t.ids))})
    _write_records(args.output, recs)


def cmd_detect(args):
    from wmlab.detector import detect, flag_model

    cfg = _load(args)
    world = _world(cfg)
    key_model = args.key_model or world.model_ids[0]
    scheme = world.keyed(args.scheme, key_model)
    det = cfg["detection"]
    results = []
    for j, (text, _) in enumerate(_read_records(args.input)):
        text.validate(world.V)
        results.append(detect(text, scheme, world.V, det["z_threshold"], det["alpha"], det["num_permutations"],
                              rng_seed=j))
    _write_records(args.output, [r.to_record() for r in results])
    if results:
        v = flag_model(results, det["flag_rate_threshold"])
        print(f"# {v.outputs_flagged}/{v.outputs_tested} flagged, model_flagged={v.model_flagged}", file=sys.stderr)


def cmd_attack(args):
    from wmlab.attacks import AttackConfig, apply_attack

    cfg = _load(args)
    world = _world(cfg)
    if args.attack not in world.attacks:
        raise WmlabError(f"unknown attack {args.attack!r}; config has {sorted(world.attacks)}")
    a = world.attacks[args.attack]
    recs = []
    for j, (text, rec) in enumerate(_read_records(args.input)):
        ac = AttackConfig(a["kind"], a["edit_rate"], a["window"], a["perplexity_budget"],
                          rng_seed=kernels.derive_seed(args.seed or 0, j), name=a["name"])
        out = apply_attack(text, ac, world.table, world.reference_lm, prefix=rec.get("prompt"))
        recs.append({**rec, "ids": out.ids.tolist(), "attack": a["name"],
                     "text": " ".join(world.vocab.decode(out.ids))})
    _write_records(args.output, recs)


def cmd_classify(args):
    from wmlab.classifier import f1_change
    from wmlab.harness import SeedData

    cfg = _load(args)
    if args.train_sizes:
        cfg.data["dataset"]["train_per_class"] = max(args.train_sizes + [cfg["dataset"]["train_per_class"]])
    world = _world(cfg)
    recs = []
    for seed in cfg["seeds"]:
        sd = SeedData(world, seed)
        if args.scenario == "A":
            X = sd.nw["X"]
        elif args.scenario == "C":
            X = sd.wm(args.scheme)["X"]
        else:
            X = sd.nw["X"].copy()
            blk = sd.block(args.model)
            X[blk] = sd.wm(args.scheme)["X"][blk]
        labels = np.array(sd.labels)
        sizes = args.train_sizes or [sd.n_train]
        for n in sizes:
            tr = np.sort(np.concatenate([sd.train_idx[labels[sd.train_idx] == m][:n] for m in world.model_ids]))
            met = sd.fit(X, tr)
            rec = {"scenario": args.scenario, "scheme": args.scheme, "model": args.model, "seed": seed,
                   "train_per_class": n, **met.to_record()}
            if args.scenario != "A":
                rec["f1_change"] = f1_change(met.macro_f1, sd.fit(sd.nw["X"], tr).macro_f1)
            recs.append(rec)
    _write_records(args.output, recs)


def cmd_steal(args):
    from wmlab.harness import cell_steal

    cfg = _load(args)
    world = _world(cfg)
    recs = []
    seeds = range(args.trials) if args.trials else cfg["seeds"]
    for s in seeds:
        for x in ["none"] + sorted(cfg["stealing"]["schemes"]):
            recs.append(cell_steal(world, {"scheme": x, "seed": s}))
    _write_records(args.output, recs)


def cmd_experiment(args):
    from wmlab.harness import run_experiment

    cfg = _load(args)
    res = run_experiment(cfg, log=None if args.quiet else lambda s: print(s, file=sys.stderr, flush=True))
    print(f"{len(res.executed)} cells executed, {len(res.failed)} failed; report in {res.out_dir}")
    return 1 if res.failed else 0


def cmd_plot_data(args):
    from wmlab.harness import PLOT_KINDS, emit_plot_data, load_report

    cfg = _load(args)
    out = Path(cfg["out_dir"])
    report = load_report(out)
    for kind in args.kind or PLOT_KINDS:
        print(emit_plot_data(report, kind, out / "plot_data"))


def build_parser() -> argparse.ArgumentParser:
    def globals_(parser, suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--config", default=d(str(REFERENCE_CONFIG)), help="experiment config (YAML)")
        parser.add_argument("--seed", type=int, default=d(None), help="run a single seed")
        parser.add_argument("--out-dir", default=d(None))
        parser.add_argument("--workers", type=int, default=d(None))

    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    globals_(common, suppress=True)
    p = argparse.ArgumentParser(prog="wmlab", description=__doc__.splitlines()[0])
    globals_(p, suppress=False)
    p.add_argument("--version", action="version", version=f"wmlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-lm", parents=[common], help="train and save an n-gram model")
    s.add_argument("--corpus", help="UTF-8 text file (default: the config's shard for --model-id)")
    s.add_argument("--model-id", default="m0")
    s.add_argument("--order", type=int, default=3)
    s.add_argument("--smoothing-k", type=float, default=0.01)
    s.add_argument("--vocab-cap", type=int, default=5000)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_train_lm)

    s = sub.add_parser("generate", parents=[common], help="sample (watermarked) completions")
    s.add_argument("--model", default="m0", help="saved model file or config model id")
    s.add_argument("--scheme", help="config scheme name (omit for no watermark)")
    s.add_argument("--key-model", help="whose key to use (default: the generating model)")
    s.add_argument("--prompt", help="prompt text (default: prompts from the corpus pool)")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--length", type=int, default=200)
    s.add_argument("--sampler", choices=["multinomial", "greedy"], default="multinomial")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("detect", parents=[common], help="run the IP checker on token records")
    s.add_argument("--input", required=True)
    s.add_argument("--scheme", required=True)
    s.add_argument("--key-model", help="whose key to test with (default: first model)")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("attack", parents=[common], help="attack token records")
    s.add_argument("--input", required=True)
    s.add_argument("--attack", required=True, help="config attack name")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("classify", parents=[common], help="train/evaluate the cross-model classifier")
    s.add_argument("--scenario", choices=["A", "B", "C"], default="A")
    s.add_argument("--scheme", help="scheme for scenarios B and C")
    s.add_argument("--model", help="watermarked model for scenario B")
    s.add_argument("--train-sizes", type=lambda v: [int(x) for x in v.split(",")], default=None,
                   help="comma-separated per-class training sizes (learning curve)")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("steal", parents=[common], help="distill surrogates and check radioactivity")
    s.add_argument("--trials", type=int, default=0, help="paired seeds (default: the config seeds)")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_steal)

    s = sub.add_parser("experiment", parents=[common], help="run (or resume) the full experiment")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("plot-data", parents=[common], help="emit columnar plot data from a report")
    s.add_argument("--kind", action="append", choices=["f1_bars", "attack_tradeoff", "learning_curve", "n_sweep"])
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "classify" and args.scenario != "A" and not args.scheme:
        print("wmlab: error: --scheme is required for scenarios B and C", file=sys.stderr)
        return 2
    if args.command == "classify" and args.scenario == "B" and not args.model:
        print("wmlab: error: --model is required for scenario B", file=sys.stderr)
        return 2
    try:
        return int(args.func(args) or 0)
    except WmlabError as exc:
        print(f"wmlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
