"""``copycat`` command line.

Every subcommand maps onto one library operation and writes its outputs
under the work directory (``--workdir``, else ``$COPYCAT_WORKDIR``, else the
current directory). Relative paths are resolved against the work directory.

Option values come from, in decreasing priority: command-line flags, the
``--config`` JSON file (top-level keys, or a section named after the
subcommand), and built-in defaults. JSON reports are written with sorted
keys and no timestamps; run metadata goes to a ``.meta.json`` sidecar.
"""

import argparse
import datetime
import json
import logging
import os
import sys

from . import __version__
from .errors import CopycatError, ValidationError
from .seeding import derive_seed

logger = logging.getLogger("copycat")

_SUPPRESS = argparse.SUPPRESS
STOCHASTIC = {"prepare-data", "train-target", "steal", "balance", "train-copycat", "finetune", "curve",
              "robustness", "lrp", "features"}


class _Command:
    """Collects a subparser's options and their defaults."""

    def __init__(self, sub, name, help_text):
        self.name = name
        self.parser = sub.add_parser(name, help=help_text, description=help_text,
                                     argument_default=_SUPPRESS)
        self.defaults = {}
        self.required_paths = []

    def opt(self, flag, default=None, must_exist=False, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if must_exist:
            self.required_paths.append(dest)
        shown = "" if default is None else f" (default: {default})"
        kw["help"] = kw.get("help", "") + shown
        self.parser.add_argument(flag, dest=dest, **kw)
        return self


def _train_opts(c, epochs, lr=0.01, step_epochs=2):
    c.opt("--arch", "SMALL", choices=["SMALL", "LARGE"], help="model architecture")
    c.opt("--epochs", epochs, type=int, help="training epochs")
    c.opt("--lr", lr, type=float, help="SGD learning rate")
    c.opt("--momentum", 0.9, type=float)
    c.opt("--weight-decay", 5e-4, type=float)
    c.opt("--gamma", 0.1, type=float, help="step-down factor")
    c.opt("--step-epochs", step_epochs, type=int, help="epochs between learning-rate drops")
    c.opt("--batch-size", 64, type=int)
    c.opt("--nondeterministic", False, action="store_true", help="allow multi-threaded training")


def _oracle_opts(c):
    c.opt("--oracle-checkpoint", help="local target checkpoint (in-process oracle)")
    c.opt("--oracle-url", help="base URL of a running oracle service")
    c.opt("--budget", type=int, help="query budget (default: unlimited)")
    c.opt("--price", "1", help="price per 1000 queries")


def build_parser():
    parser = argparse.ArgumentParser(prog="copycat", description="Copycat model-extraction toolkit.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed (required by stochastic commands)")
    parser.add_argument("--workers", type=int, help="worker threads for remote queries / parallel training")
    parser.add_argument("--workdir", help="output root (default: $COPYCAT_WORKDIR or .)")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    cmds = {}

    def cmd(name, help_text):
        cmds[name] = c = _Command(sub, name, help_text)
        return c

    c = cmd("prepare-data", "Build the desk-scale corpora: digits ODD/PDD/TDD splits and surrogate pools.")
    c.opt("--out-dir", "data", help="directory for the manifests")
    c.opt("--npdd-count", 20000, type=int, help="rendered-letter surrogate images")
    c.opt("--random-count", 0, type=int, help="random-pixel images (0 to skip)")
    c.opt("--fractions", [0.6, 0.2, 0.2], type=float, nargs=3, help="ODD PDD TDD fractions")

    c = cmd("train-target", "Train the target network on the ODD.")
    c.opt("--data", "data/odd.jsonl", must_exist=True, help="ODD manifest")
    c.opt("--test", help="TDD manifest for the target's accuracy report")
    c.opt("--subtract-mean", False, action="store_true", help="subtract the training mean image")
    c.opt("--out", "checkpoints/target.ckpt")
    _train_opts(c, epochs=30, step_epochs=12)

    c = cmd("serve-oracle", "Serve a checkpoint over HTTP as a hard-label oracle.")
    c.opt("--checkpoint", "checkpoints/target.ckpt", must_exist=True)
    c.opt("--host", "127.0.0.1")
    c.opt("--port", 8080, type=int)
    c.opt("--rate-limit", type=float, help="requests per second per client")

    c = cmd("steal", "Query the oracle for hard labels of surrogate images.")
    _oracle_opts(c)
    c.opt("--pool", "data/npdd.jsonl", must_exist=True, help="surrogate pool manifest")
    c.opt("--count", type=int, help="number of queries (default: whole pool)")
    c.opt("--out", "stolen_labels.jsonl")

    c = cmd("balance", "Balance stolen labels into a fake dataset.")
    c.opt("--stolen", "stolen_labels.jsonl", must_exist=True)
    c.opt("--num-classes", 10, type=int)
    c.opt("--target-per-class", type=int, help="records per class (default: median count)")
    c.opt("--split", "NPDD", choices=["NPDD", "PDD"], help="split of the balanced images")
    c.opt("--out", "fake_dataset.jsonl")

    c = cmd("train-copycat", "Train a copycat on a stolen-label dataset.")
    c.opt("--data", "fake_dataset.jsonl", must_exist=True)
    c.opt("--num-classes", type=int, help="class count (default: from the manifest)")
    c.opt("--out", "checkpoints/copycat.ckpt")
    _train_opts(c, epochs=10, step_epochs=4)

    c = cmd("finetune", "Continue training a copycat on PDD images with stolen labels.")
    c.opt("--checkpoint", "checkpoints/copycat.ckpt", must_exist=True)
    c.opt("--data", "pdd_fake_dataset.jsonl", must_exist=True)
    c.opt("--out", "checkpoints/copycat.finetuned.ckpt")
    _train_opts(c, epochs=2, lr=0.001)

    c = cmd("eval", "Evaluate a model on the TDD against a target.")
    c.opt("--checkpoint", "checkpoints/copycat.ckpt", must_exist=True)
    c.opt("--test", "data/tdd.jsonl", must_exist=True)
    c.opt("--target-checkpoint", help="target checkpoint (its TDD accuracy is the reference)")
    c.opt("--target-accuracy", type=float, help="reference accuracy when no target checkpoint is given")
    c.opt("--baseline-accuracy", type=float)
    c.opt("--stolen", help="stolen labels for the label-distribution statistics")
    c.opt("--out", "reports/eval.json")

    c = cmd("curve", "Data-curve experiment: copy performance versus stolen labels.")
    _oracle_opts(c)
    c.opt("--pool", "data/npdd.jsonl", must_exist=True)
    c.opt("--pdd-pool", help="PDD manifest for fine-tuned curve points")
    c.opt("--test", "data/tdd.jsonl", must_exist=True)
    c.opt("--target-accuracy", type=float, help="default: measured from --oracle-checkpoint")
    c.opt("--sizes", [1000, 5000, 20000], type=int, nargs="+", help="query sizes")
    c.opt("--preset", choices=["desk", "full"], help="named size grid (overrides --sizes)")
    c.opt("--out-dir", "runs/curve")
    _train_opts(c, epochs=10, step_epochs=4)

    c = cmd("robustness", "Repeat target training and the copy attack over several seeds.")
    _oracle_opts(c)
    c.opt("--odd", "data/odd.jsonl", help="ODD for per-seed targets (unused with an --oracle-* flag)")
    c.opt("--target-arch", "SMALL", choices=["SMALL", "LARGE"])
    c.opt("--target-epochs", 30, type=int)
    c.opt("--pool", "data/npdd.jsonl", must_exist=True)
    c.opt("--test", "data/tdd.jsonl", must_exist=True)
    c.opt("--target-accuracy", type=float, help="default: measured from --oracle-checkpoint")
    c.opt("--count", 20000, type=int, help="queries per run")
    c.opt("--repeats", 3, type=int, help="number of seeds (derived from --seed)")
    c.opt("--out", "reports/robustness.json")
    _train_opts(c, epochs=10, step_epochs=4)

    c = cmd("lrp", "Compare target and copycat relevance heatmaps on TDD images.")
    c.opt("--target-checkpoint", "checkpoints/target.ckpt", must_exist=True)
    c.opt("--checkpoint", "checkpoints/copycat.ckpt", must_exist=True)
    c.opt("--test", "data/tdd.jsonl", must_exist=True)
    c.opt("--count", 20, type=int, help="images to explain")
    c.opt("--out-dir", "reports/lrp")

    c = cmd("features", "Feature-space coverage of stolen-label images (ODD vs NPDD-SL).")
    c.opt("--target-checkpoint", "checkpoints/target.ckpt", must_exist=True)
    c.opt("--odd", "data/odd.jsonl", must_exist=True)
    c.opt("--npdd", "stolen_labels.jsonl", must_exist=True, help="stolen labels (or an NPDD-SL manifest)")
    c.opt("--per-class", 100, type=int)
    c.opt("--neighbors", 3, type=int)
    c.opt("--pool-size", 20000, type=int)
    c.opt("--out", "reports/features.jsonl")

    c = cmd("cost", "Attack cost, break-even batch price and viability verdict.")
    c.opt("--labeling", help="annotation cost of the ODD")
    c.opt("--queries", type=int, help="queries needed for a successful copy (NPDD size)")
    c.opt("--price", "1", help="price per 1000 queries")
    c.opt("--currency", "$")
    c.opt("--table", False, action="store_true", help="also export the reference cost table")
    c.opt("--out", "reports/cost.json")

    return parser, cmds


# Option resolution ---------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def resolve(argv=None):
    """Parse ``argv`` and merge flags over config over defaults."""
    parser, cmds = build_parser()
    ns = parser.parse_args(argv)
    cmd = cmds[ns.command]
    cfg = _load_config(ns.config)
    section = cfg.get(ns.command, {})
    merged = dict(cmd.defaults)
    for source in ({k: v for k, v in cfg.items() if not isinstance(v, dict)}, section):
        for k, v in source.items():
            key = k.replace("-", "_")
            if key in merged:
                merged[key] = v
    flags = vars(ns)
    for key in cmd.defaults:
        if key in flags:
            merged[key] = flags[key]
    for key in ("seed", "workers", "workdir"):
        merged[key] = flags.get(key) if flags.get(key) is not None else cfg.get(key)
    merged["command"] = ns.command
    merged["verbose"] = ns.verbose
    args = argparse.Namespace(**merged)
    args.workdir = os.path.abspath(args.workdir or os.environ.get("COPYCAT_WORKDIR") or ".")
    if ns.command in STOCHASTIC and args.seed is None:
        raise ValidationError(f"'{ns.command}' needs a seed (--seed or \"seed\" in the config)")
    for key in cmd.required_paths:
        path = _path(args, getattr(args, key))
        if not os.path.exists(path):
            raise ValidationError(f"--{key.replace('_', '-')}: {path} does not exist")
    return args


def _path(args, p):
    if p is None:
        return None
    return p if os.path.isabs(p) else os.path.join(args.workdir, p)


def _write_json(args, path, payload):
    path = _path(args, path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    meta = {"command": args.command, "seed": args.seed, "version": __version__,
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


# Shared helpers ------------------------------------------------------------

def _train_config(args, seed):
    from .model_zoo import TrainConfig

    return TrainConfig(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       step_epochs=args.step_epochs, gamma=args.gamma, max_epochs=args.epochs,
                       batch_size=args.batch_size, seed=seed, deterministic=not args.nondeterministic)


def _oracle(args):
    from . import model_zoo
    from .oracle import OracleHandle

    if bool(args.oracle_checkpoint) == bool(args.oracle_url):
        raise ValidationError("give exactly one of --oracle-checkpoint and --oracle-url")
    if args.oracle_url:
        return OracleHandle.remote(args.oracle_url, args.budget, args.price, workers=args.workers or 4)
    path = _path(args, args.oracle_checkpoint)
    if not os.path.exists(path):
        raise ValidationError(f"--oracle-checkpoint: {path} does not exist")
    return OracleHandle.local(model_zoo.load_checkpoint(path), args.budget, args.price)


def _manifest(args, path):
    from .data import load_manifest

    return load_manifest(_path(args, path))


def _attack_side(manifest, flag):
    from .data import Split

    if manifest.split is Split.ODD:
        raise ValidationError(f"{flag}: attack-side commands never read the ODD")
    return manifest


def _target_accuracy(args, test):
    from . import evaluation, model_zoo

    if args.target_accuracy is not None:
        return float(args.target_accuracy)
    ckpt_path = getattr(args, "target_checkpoint", None) or getattr(args, "oracle_checkpoint", None)
    if not ckpt_path:
        raise ValidationError("need --target-accuracy (no local target checkpoint to measure)")
    return evaluation.accuracy_on(model_zoo.load_checkpoint(_path(args, ckpt_path)), test)


# Subcommands ---------------------------------------------------------------

def cmd_prepare_data(args):
    from .data import Split, generate_random_pixels, save_manifest, split_problem
    from .data.corpora import digits_corpus, letters_corpus
    from .data.pipeline import dedup

    out = _path(args, args.out_dir)
    # dedup before splitting so the three splits are disjoint by pixel content, not just by ref
    odd, pdd, tdd = split_problem(dedup(digits_corpus()), tuple(args.fractions), derive_seed(args.seed, "split"))
    written = {}
    for name, m in (("odd", odd), ("pdd", pdd), ("tdd", tdd)):
        written[name] = len(m)
        save_manifest(m, os.path.join(out, f"{name}.jsonl"), os.path.join(out, "images"))
    if args.npdd_count:
        npdd = dedup(letters_corpus(args.npdd_count, derive_seed(args.seed, "letters")))
        written["npdd"] = len(npdd)
        save_manifest(npdd, os.path.join(out, "npdd.jsonl"), os.path.join(out, "images"))
    if args.random_count:
        rnd = generate_random_pixels(args.random_count, (32, 32, 1), derive_seed(args.seed, "random"))
        written["random"] = len(rnd)
        save_manifest(rnd.replace(split=Split.NPDD), os.path.join(out, "random.jsonl"), os.path.join(out, "images"))
    _write_json(args, os.path.join(out, "summary.json"), {"sizes": written})
    return {"sizes": written, "out_dir": out}


def cmd_train_target(args):
    from . import evaluation, model_zoo
    from .data import Split

    odd = _manifest(args, args.data)
    if odd.split is not Split.ODD:
        raise ValidationError("--data: the target is trained on an ODD manifest")
    spec = model_zoo.ModelSpec.create(args.arch, odd.num_classes, name="target", subtract_mean=args.subtract_mean)
    cfg = _train_config(args, derive_seed(args.seed, "train-target"))
    ckpt = model_zoo.train(model_zoo.build_model(spec, derive_seed(args.seed, "init-target")), odd, cfg,
                           workers=args.workers)
    out = _path(args, args.out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    model_zoo.save_checkpoint(ckpt, out)
    report = {"checkpoint": ckpt.content_hash, "arch": args.arch, "epochs": ckpt.epochs_completed,
              "train_accuracy": evaluation.accuracy_on(ckpt, odd)}
    if args.test:
        report["test_accuracy"] = evaluation.accuracy_on(ckpt, _manifest(args, args.test))
    _write_json(args, os.path.splitext(out)[0] + ".report.json", report)
    return report


def cmd_serve_oracle(args):
    from . import model_zoo
    from .oracle import OracleServer

    ckpt = model_zoo.load_checkpoint(_path(args, args.checkpoint))
    server = OracleServer(ckpt, (args.host, args.port), args.rate_limit)
    _emit({"url": server.url, "num_classes": ckpt.model_spec.num_classes})
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return None


def cmd_steal(args):
    from .attack import steal_labels
    from .data import save_stolen

    oracle = _oracle(args)
    pool = _attack_side(_manifest(args, args.pool), "--pool")
    count = len(pool) if args.count is None else args.count
    stolen = steal_labels(oracle, pool, count, derive_seed(args.seed, "steal"))
    out = _path(args, args.out)
    save_stolen(stolen, out)
    status = oracle.status()
    _write_json(args, out + ".status.json", status)
    return {"stolen": len(stolen), "budget_used": oracle.used, "cost": status["accumulated_cost"]}


def cmd_balance(args):
    from .data import Split, balance, load_stolen, save_manifest

    stolen = load_stolen(_path(args, args.stolen))
    fake, report = balance(stolen, args.num_classes, args.target_per_class, derive_seed(args.seed, "balance"))
    fake = fake.replace(split=Split(args.split))
    out = _path(args, args.out)
    save_manifest(fake, out)
    _write_json(args, os.path.splitext(out)[0] + ".balance_report.json", report.to_dict())
    return {"records": len(fake), "target_per_class": report.target_per_class}


def cmd_train_copycat(args):
    from . import attack, model_zoo

    fake = _attack_side(_manifest(args, args.data), "--data")
    k = args.num_classes or fake.num_classes
    spec = model_zoo.ModelSpec.create(args.arch, k, name="copycat")
    cfg = _train_config(args, derive_seed(args.seed, "train-copycat"))
    ckpt = attack.train_copycat(fake, spec, cfg, init_seed=derive_seed(args.seed, "init-copycat"),
                                workers=args.workers)
    out = _path(args, args.out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    model_zoo.save_checkpoint(ckpt, out)
    return {"checkpoint": ckpt.content_hash, "records": len(fake)}


def cmd_finetune(args):
    from . import attack, model_zoo

    ckpt = model_zoo.load_checkpoint(_path(args, args.checkpoint))
    pdd_sl = _attack_side(_manifest(args, args.data), "--data")
    cfg = _train_config(args, derive_seed(args.seed, "finetune"))
    tuned = attack.finetune(ckpt, pdd_sl, cfg, workers=args.workers)
    out = _path(args, args.out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    model_zoo.save_checkpoint(tuned, out)
    return {"checkpoint": tuned.content_hash, "records": len(pdd_sl)}


def cmd_eval(args):
    from . import evaluation, model_zoo
    from .data import load_stolen

    ckpt = model_zoo.load_checkpoint(_path(args, args.checkpoint))
    test = _attack_side(_manifest(args, args.test), "--test")
    target_acc = _target_accuracy(args, test)
    sample = None
    if args.stolen:
        sample = [r.hard_label for r in load_stolen(_path(args, args.stolen))]
    report = evaluation.evaluate(ckpt, test, target_acc, args.baseline_accuracy, sample)
    out = _path(args, args.out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    report.save(out, os.path.splitext(out)[0] + ".confusion.csv")
    _write_json(args, out, report.to_dict())  # same bytes, plus the metadata sidecar
    return {"copycat_accuracy": report.copycat_accuracy, "perf_over_target": report.perf_over_target}


def _figures(run, out_dir, target_acc, k):
    from . import evaluation, plotting

    tuned = run.curve(finetuned=True) if run.pdd_stolen else None
    plotting.data_curve(run.curve(), os.path.join(out_dir, "figures", "data_curve"), target_acc, k, tuned)
    counts, _, _ = evaluation.label_distribution_stats([r.hard_label for r in run.stolen], k)
    plotting.label_distribution({"stolen": counts}, os.path.join(out_dir, "figures", "label_distribution"))


def cmd_curve(args):
    from . import attack, model_zoo

    oracle = _oracle(args)
    pool = _attack_side(_manifest(args, args.pool), "--pool")
    test = _attack_side(_manifest(args, args.test), "--test")
    pdd = _attack_side(_manifest(args, args.pdd_pool), "--pdd-pool") if args.pdd_pool else None
    sizes = {"desk": attack.DESK_CURVE_SIZES, "full": attack.FULL_CURVE_SIZES}.get(args.preset, args.sizes)
    target_acc = _target_accuracy(args, test)
    spec = model_zoo.ModelSpec.create(args.arch, oracle.num_classes, name="copycat")
    cfg = _train_config(args, 0)
    plan = attack.AttackPlan(oracle, pool.unlabeled(), list(sizes), spec, cfg, test, target_acc,
                             seed=derive_seed(args.seed, "curve"), pdd_pool=pdd)
    run = attack.run_data_curve(plan, workers=args.workers)
    out_dir = _path(args, args.out_dir)
    attack.save_run(run, out_dir)
    _figures(run, out_dir, target_acc, spec.num_classes)
    curve = [{"size": s, "macro_accuracy": a} for s, a in run.curve()]
    _write_json(args, os.path.join(out_dir, "curve.json"), {"target_accuracy": target_acc, "curve": curve})
    return {"curve": curve, "budget_used": oracle.used}


def cmd_robustness(args):
    from . import attack, evaluation, model_zoo
    from .oracle import OracleHandle

    fixed = bool(args.oracle_checkpoint or args.oracle_url)
    pool = _attack_side(_manifest(args, args.pool), "--pool")
    test = _attack_side(_manifest(args, args.test), "--test")
    odd = None if fixed else _manifest(args, args.odd)

    def runner(seed):
        if fixed:
            oracle = _oracle(args)
            target_acc = _target_accuracy(args, test)
        else:
            # defender side: a fresh target per seed, seen by the attack only through its oracle
            spec = model_zoo.ModelSpec.create(args.target_arch, odd.num_classes, name="target")
            tcfg = model_zoo.TrainConfig(max_epochs=args.target_epochs, seed=derive_seed(seed, "train-target"),
                                         step_epochs=12)
            target = model_zoo.train(model_zoo.build_model(spec, derive_seed(seed, "init-target")), odd, tcfg)
            target_acc = evaluation.accuracy_on(target, test)
            oracle = OracleHandle.local(target, args.budget, args.price)
        stolen = attack.steal_labels(oracle, pool, args.count, derive_seed(seed, "steal"))
        fake, _ = attack.build_fake_dataset(stolen, oracle.num_classes, None, derive_seed(seed, "balance"))
        spec = model_zoo.ModelSpec.create(args.arch, oracle.num_classes, name="copycat")
        cfg = _train_config(args, derive_seed(seed, "train"))
        ckpt = attack.train_copycat(fake, spec, cfg, init_seed=derive_seed(seed, "init"), workers=args.workers)
        return evaluation.evaluate(ckpt, test, target_acc)

    seeds = [derive_seed(args.seed, "robustness", i) for i in range(args.repeats)]
    summary = evaluation.robustness(seeds, runner)
    payload = dict(summary.to_dict(), count=args.count, per_seed_target=not fixed)
    _write_json(args, args.out, payload)
    return {"mean": summary.mean, "std": summary.std}


def cmd_lrp(args):
    import numpy as np

    from . import lrp, model_zoo, plotting
    from .data import images

    target = model_zoo.load_checkpoint(_path(args, args.target_checkpoint))
    copycat = model_zoo.load_checkpoint(_path(args, args.checkpoint))
    test = _attack_side(_manifest(args, args.test), "--test")
    n = min(args.count, len(test))
    picks = sorted(np.random.default_rng(derive_seed(args.seed, "lrp")).choice(len(test), n, replace=False).tolist())
    out_dir = _path(args, args.out_dir)
    rows = []
    for i in picks:
        rec = test.records[i]
        raw = images.load_image(rec.ref)
        x = images.to_model_input(raw, target.model_spec.input_shape)
        cmp_ = lrp.compare(target, copycat, x, rec.label)
        stem = os.path.join(out_dir, f"{i:05d}")
        lrp.export_heatmap(cmp_.target, stem + ".target")
        lrp.export_heatmap(cmp_.copycat, stem + ".copycat")
        plotting.heatmap_png(cmp_.target.values, stem + ".target.png", x)
        plotting.heatmap_png(cmp_.copycat.values, stem + ".copycat.png", x)
        rows.append(dict(cmp_.to_dict(), index=i, truth=int(rec.label)))
    groups = {}
    for r in rows:
        groups.setdefault(r["agreement"], []).append(r["similarity"])
    summary = {g: {"count": len(v), "mean_similarity": float(np.mean(v))} for g, v in sorted(groups.items())}
    _write_json(args, os.path.join(out_dir, "summary.json"), {"pairs": rows, "by_agreement": summary})
    return {"pairs": len(rows), "by_agreement": summary}


def cmd_features(args):
    from . import feature_space as fs
    from . import model_zoo, plotting
    from .data import load_stolen

    target = model_zoo.load_checkpoint(_path(args, args.target_checkpoint))
    odd = _manifest(args, args.odd)
    npdd_path = _path(args, args.npdd)
    try:
        npdd = _attack_side(_manifest(args, args.npdd), "--npdd")
        n_refs, n_labels = npdd.refs, npdd.labels
        first = {}
        for r, y in zip(n_refs, n_labels):
            first.setdefault(r, y)  # replicated records count once
        n_refs, n_labels = list(first), list(first.values())
    except (KeyError, ValidationError):
        stolen = load_stolen(npdd_path)
        n_refs, n_labels = [r.image_ref for r in stolen], [r.hard_label for r in stolen]
    if any(y is None for y in n_labels):
        raise ValidationError("--npdd must carry stolen labels")
    oi = fs.sample_odd(odd, args.per_class, derive_seed(args.seed, "sample-odd"))
    pi = fs.sample_pool(len(n_refs), args.pool_size, derive_seed(args.seed, "pool"))
    odd_f = fs.featurize(target, fs.Origin.ODD_OL, [odd.refs[i] for i in oi], [odd.labels[i] for i in oi])
    npdd_f = fs.featurize(target, fs.Origin.NPDD_SL, [n_refs[i] for i in pi], [n_labels[i] for i in pi])
    sel = fs.select_neighbors(odd_f, npdd_f, args.neighbors, derive_seed(args.seed, "order"))
    out = _path(args, args.out)
    rows = fs.export_points(odd_f, npdd_f, sel, out, {
        "seed": args.seed, "pool_size": len(pi), "checkpoint": target.content_hash,
        "per_class": args.per_class, "neighbors": args.neighbors, "metric": "euclidean"})
    pts = fs.read_points(out)
    if pts:
        proj = fs.pca_2d([v for _, _, v in pts])
        plotting.feature_scatter([(o, c, p) for (o, c, _), p in zip(pts, proj)], os.path.splitext(out)[0] + ".pca")
    return {"rows": rows, "odd": len(sel.odd_indices), "npdd": len(sel.npdd_indices)}


def cmd_cost(args):
    from . import economics as eco

    out = {}
    if args.labeling is not None or args.queries is not None:
        if args.labeling is None or args.queries is None:
            raise ValidationError("--labeling and --queries go together")
        model = eco.CostModel(args.price, args.labeling, args.queries)
        rep = eco.viability_report(model).to_dict(args.currency)
        out.update(rep)
        out["minimum_batch_price"] = rep["break_even_price_display"]
    if args.table:
        table = eco.cost_table()
        csv_path = os.path.splitext(_path(args, args.out))[0] + ".table.csv"
        os.makedirs(os.path.dirname(csv_path), exist_ok=True)
        eco.export_csv(table, csv_path, args.currency)
        out["table"] = [{"problem": r["problem"], "minimum_batch_price": eco.format_money(
            r["minimum_batch_price"], args.currency)} for r in table]
    if not out:
        raise ValidationError("nothing to compute: give --labeling/--queries and/or --table")
    _write_json(args, args.out, out)
    return out


COMMANDS = {name: globals()["cmd_" + name.replace("-", "_")] for name in (
    "prepare-data", "train-target", "serve-oracle", "steal", "balance", "train-copycat", "finetune", "eval",
    "curve", "robustness", "lrp", "features", "cost")}


def main(argv=None):
    try:
        args = resolve(argv)
    except CopycatError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except CopycatError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}, sort_keys=True), file=sys.stderr)
        return 1
    if result is not None:
        _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
