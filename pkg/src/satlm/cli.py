"""Command-line entry point: ``satlm <subcommand> [options]``.

Option values are resolved as command-line flags, then a ``--config`` file,
then built-in defaults.  The config file is flat ``key = value`` text, one
setting per line, ``#`` starting a comment; keys are the long option names
with or without dashes (``per-count = 200`` or ``per_count = 200``).

Every run writes ``run_manifest.json`` into its ``--out`` directory.  When
``SOURCE_DATE_EPOCH`` is set, manifest timestamps use it, so reruns of a
deterministic subcommand reproduce every output byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .errors import SatlmError

MANIFEST = "run_manifest.json"


# -- small parsers ------------------------------------------------------------------

def parse_int_list(text: str) -> list[int]:
    """``"6..14"``, ``"6,8,10"`` or a mix such as ``"6..8,12"``."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out += list(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"empty integer list {text!r}")
    return out


def parse_ratio(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).split(":")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split ratio looks like 100:1:1")
    return tuple(parts)


def parse_lambda(text: str) -> tuple[str, Fraction]:
    """Return the display form and ``lambda**2`` as an exact rational.

    ``sqrt(2)``, ``sqrt2`` and ``√2`` denote the square root; anything
    else is read as a rational number such as ``2`` or ``3/2``.
    """
    t = str(text).strip().replace(" ", "")
    for head in ("sqrt(", "√(", "sqrt", "√"):
        if t.startswith(head):
            body = t[len(head):].rstrip(")")
            try:
                return f"sqrt({body})", Fraction(body)
            except (ValueError, ZeroDivisionError) as exc:
                raise argparse.ArgumentTypeError(f"bad lambda {text!r}") from exc
    try:
        lam = Fraction(t)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad lambda {text!r}") from exc
    return t, lam * lam


# -- manifests and output ---------------------------------------------------------------

def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def _jsonable(value):
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, tuple):
        return list(value)
    return value


def write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")


def write_manifest(out: Path, command: str, config: dict, started: str, outputs: list[str]) -> None:
    canonical = json.dumps(config, sort_keys=True, default=_jsonable)
    write_json(out / MANIFEST, {
        "command": command,
        "config": json.loads(canonical),
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.get("seed"),
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": sorted(outputs),
    })


# -- subcommand implementations -------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> list[str]:
    from .datagen import CorpusSpec, build_corpus

    spec = CorpusSpec(var_counts=cfg["vars"], formulas_per_count=cfg["per_count"],
                      split_ratio=cfg["split"], seed=cfg["seed"], alpha=Fraction(cfg["alpha"]))
    manifest = build_corpus(spec, out, threads=cfg["threads"])
    for entry in manifest["counts"]:
        sizes = "/".join(str(entry["splits"][s]["examples"]) for s in ("train", "dev", "test"))
        print(f"vars={entry['vars']} clauses={entry['clauses']} train/dev/test={sizes}")
    files = ["manifest.json"]
    for v in spec.var_counts:
        files += [f"vars{v:02d}/{s}.tsv" for s in ("train", "dev", "test")]
    return files


def _read_formula(cfg: dict):
    from .formula import dimacs_decode

    if cfg.get("dimacs") and cfg.get("formula"):
        raise SatlmError("give either --dimacs or --formula, not both")
    if cfg.get("dimacs"):
        text = Path(cfg["dimacs"]).read_text(encoding="utf-8").strip()
    elif cfg.get("formula"):
        text = cfg["formula"]
    else:
        raise SatlmError("probe-localprob needs --dimacs FILE or --formula TEXT")
    return dimacs_decode(text, allow_duplicates=cfg["lenient"], var_count=cfg.get("var_count"))


def cmd_probe_localprob(cfg: dict, out: Path) -> list[str]:
    from .formula import cnf3_to_formula, count_satisfying, dimacs_encode
    from .language import FULL_SUPPORT, SatWeightedLanguage, SeparationProbe, separation_gap

    cnf = _read_formula(cfg)
    phi = cnf3_to_formula(cnf)
    shown, lam_sq = cfg["lambda"]
    full = cfg["variant"] == FULL_SUPPORT
    probe = SeparationProbe.for_lambda(lam_sq, cfg["epsilon"], squared=True, full_support=full)
    if cfg.get("k"):
        probe = SeparationProbe(lam_sq, cfg["k"], Fraction(cfg["epsilon"]))
    L = SatWeightedLanguage(cfg["variant"], Fraction(cfg["epsilon"]))
    r = separation_gap(L, phi, probe)
    payload = {
        "formula_dimacs": dimacs_encode(cnf),
        "variant": cfg["variant"],
        "k": r.k,
        "lambda": shown,
        "lambda_squared": str(lam_sq),
        "p0_exact_num": r.p0.numerator,
        "p0_exact_den": r.p0.denominator,
        "bound": str(r.bound),
        "decided_sat": bool(r.decided_sat),
        "satisfiers": count_satisfying(phi),
    }
    write_json(out / "probe.json", payload)
    print(json.dumps(payload, sort_keys=True))
    return ["probe.json"]


def cmd_witness_check(cfg: dict, out: Path) -> list[str]:
    from .witness import witness_check

    sizes = [cfg["n"]] if cfg.get("n_min") is None else list(range(cfg["n_min"], cfg["n"] + 1))
    results, total, seconds = [], 0, 0.0
    for n in sizes:
        r = witness_check(n)
        total += r.mismatches
        seconds += r.seconds
        results.append({"n": n, "strings": r.strings, "members": r.members,
                        "mismatches": r.mismatches})
    write_json(out / "witness.json", {"sizes": results, "mismatches": total})
    print(f"mismatches: {total}")
    print(f"seconds: {seconds:.3f}")
    if total:
        raise SatlmError(f"witness disagrees with the language on {total} strings")
    return ["witness.json"]


def _load_corpus_seqs(cfg: dict, split: str):
    from .datagen import corpus_var_counts, load_split
    from .seqmodel import ContextVocab, seq_from_example

    corpus = Path(cfg["corpus"])
    var_counts = cfg.get("vars") or corpus_var_counts(corpus)
    vocab = ContextVocab(max(64, max(var_counts)))
    return {v: [seq_from_example(e, vocab) for e in load_split(corpus, v, split)]
            for v in var_counts}, vocab


def _make_ar(cfg: dict, vocab):
    from .seqmodel import GatedRnn, NgramSoftmax, corpus_trie

    if cfg["kind"] == "trie":
        return corpus_trie()
    if cfg["kind"] == "ngram":
        return NgramSoftmax(cfg["order"], seed=cfg["seed"])
    return GatedRnn(len(vocab), cfg["hidden"], cfg["layers"], seed=cfg["seed"])


def cmd_train_ar(cfg: dict, out: Path) -> list[str]:
    from .seqmodel import TrainConfig, evaluate_ar, single_satisfier, train_ar

    train, vocab = _load_corpus_seqs(cfg, "train")
    dev, _ = _load_corpus_seqs(cfg, "dev")
    model = _make_ar(cfg, vocab)
    tcfg = TrainConfig(lr=cfg["lr"], batch=cfg["batch"], seed=cfg["seed"],
                       early_stop_patience=cfg["patience"], max_epochs=cfg["epochs"],
                       momentum=cfg["momentum"])
    all_train = [s for v in sorted(train) for s in train[v]]
    all_dev = [s for v in sorted(dev) for s in dev[v]]
    before = evaluate_ar(model, all_dev, assignment_filter=single_satisfier).to_dict()
    result = train_ar(model, all_train, all_dev, tcfg)
    model.save(out / "model.npz")
    write_json(out / "curve.json", {"train": result.train_curve, "dev": result.dev_curve,
                                    "best_epoch": result.best_epoch, "dev_before": before})
    print(f"best epoch {result.best_epoch}, dev loss {min(result.dev_curve):.4f}")
    return ["model.npz", "curve.json"]


def cmd_eval_ar(cfg: dict, out: Path) -> list[str]:
    from .seqmodel import evaluate_ar, load_model, single_satisfier

    data, vocab = _load_corpus_seqs(cfg, cfg["split"])
    model = load_model(cfg["model"]) if cfg.get("model") else _make_ar(cfg, vocab)
    per_var = {}
    for v in sorted(data):
        report = evaluate_ar(model, data[v]).to_dict()
        single = evaluate_ar(model, data[v], assignment_filter=single_satisfier)
        report["assignment_ppl_single"] = single.assignment_ppl
        per_var[str(v)] = report
    overall = evaluate_ar(model, [s for v in sorted(data) for s in data[v]]).to_dict()
    payload = {"model": model.kind, "split": cfg["split"], "per_vars": per_var, "overall": overall}
    write_json(out / "eval.json", payload)
    print(json.dumps(overall, sort_keys=True))
    return ["eval.json"]


def _toy_data(cfg: dict):
    from .rebm import ToyTask

    task = ToyTask()
    if cfg.get("corpus"):
        folder = Path(cfg["corpus"])
        read = lambda name: (folder / f"{name}.txt").read_text(encoding="utf-8").split("\n")[:-1]
        return task, read("train"), read("dev"), read("test")
    seed = cfg["seed"]
    return (task, task.sample(cfg["train_size"], [seed, 0]), task.sample(cfg["dev_size"], [seed, 1]),
            task.sample(cfg["test_size"], [seed, 2]))


def _rebm_from_dir(folder: Path):
    from .rebm import Discriminator, RebmModel, TruncatedBase
    from .seqmodel import load_model

    meta = json.loads((folder / "rebm.json").read_text(encoding="utf-8"))
    base = TruncatedBase(load_model(folder / "base.npz"), meta["T"])
    disc = Discriminator(meta["alphabet"], meta["T"], meta["activation"])
    with np.load(folder / "disc.npz") as data:
        disc.params = {k: data[k].copy() for k in data.files}
    return RebmModel(base, disc), meta


def cmd_train_rebm(cfg: dict, out: Path) -> list[str]:
    from .rebm import (Discriminator, RebmModel, RebmTrainConfig, TruncatedBase,
                       exact_toy_report, fit_unigram_base, train_rebm)
    from .seqmodel import load_model

    task, train, dev, test = _toy_data(cfg)
    if cfg.get("base"):
        base = TruncatedBase(load_model(cfg["base"]), task.T)
    else:
        base = fit_unigram_base(train, task.alphabet, task.T)
    disc = Discriminator(task.alphabet, task.T, cfg["activation"], seed=cfg["seed"])
    m = RebmModel(base, disc)
    rcfg = RebmTrainConfig(lr=cfg["lr"], batch=cfg["batch"], K=cfg["K"], seed=cfg["seed"],
                           max_epochs=cfg["epochs"], patience=cfg["patience"])
    result = train_rebm(m, train, dev, rcfg)
    base.model.save(out / "base.npz")
    buf = out / "disc.npz"
    with open(buf, "wb") as fh:
        np.savez(fh, **disc.params)
    for name, rows in (("train", train), ("dev", dev), ("test", test)):
        (out / f"{name}.txt").write_text("".join(x + "\n" for x in rows), encoding="utf-8")
    exact = exact_toy_report(task, m)
    write_json(out / "rebm.json", {"alphabet": task.alphabet, "T": task.T,
                                   "activation": cfg["activation"], "K": cfg["K"]})
    write_json(out / "curve.json", {"train": result.train_curve, "dev": result.dev_curve,
                                    "best_epoch": result.best_epoch,
                                    "kl_base": exact.kl_base, "kl_residual": exact.kl_residual})
    print(f"KL(p||q0) = {exact.kl_base:.6f}, KL(p||p_theta) = {exact.kl_residual:.6f}")
    return ["base.npz", "disc.npz", "rebm.json", "curve.json", "train.txt", "dev.txt", "test.txt"]


def cmd_eval_rebm(cfg: dict, out: Path) -> list[str]:
    from .rebm import ToyTask, bootstrap_report, exact_toy_report

    folder = Path(cfg["model"])
    m, meta = _rebm_from_dir(folder)
    test = (folder / "test.txt").read_text(encoding="utf-8").split("\n")[:-1]
    report = bootstrap_report(m, test, cfg["n_boot"], cfg["n_z"], cfg["M"], cfg["seed"])
    payload = {"configuration": {"activation": meta["activation"], "K": meta["K"]},
               **report.to_dict()}
    task = ToyTask(meta["alphabet"], meta["T"])
    exact = exact_toy_report(task, m)
    payload["exact"] = {"kl_base": exact.kl_base, "kl_residual": exact.kl_residual,
                        "Z": exact.Z, "ll_improvement": exact.ll_improvement_exact}
    write_json(out / "rebm_eval.json", payload)
    print(json.dumps(payload["ll_improvement"], sort_keys=True))
    return ["rebm_eval.json"]


def cmd_kl_check(cfg: dict, out: Path) -> list[str]:
    from .rebm import kl_decomposition

    rng = np.random.default_rng(cfg["seed"])
    rows, worst = [], 0.0
    for i in range(cfg["instances"]):
        n = cfg["support"]
        p, qa, qb = (rng.dirichlet(np.ones(n)) for _ in range(3))
        g = rng.normal(0.0, 1.0, n)
        lhs, rhs = kl_decomposition(p, qa, qb, g)
        worst = max(worst, abs(lhs - rhs))
        rows.append({"instance": i, "lhs": lhs, "rhs": rhs})
    write_json(out / "kl_check.json", {"instances": rows, "max_abs_diff": worst})
    print(f"max |lhs - rhs| = {worst:.3e}")
    if worst > cfg["tolerance"]:
        raise SatlmError(f"identity violated by {worst}")
    return ["kl_check.json"]


def cmd_report(cfg: dict, out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    for path in cfg["inputs"]:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        label = Path(path).parent.name or Path(path).stem
        for v, rep in sorted(data.get("per_vars", {}).items(), key=lambda kv: int(kv[0])):
            rows.append({"run": label, "model": data.get("model", ""), "vars": int(v),
                         **{k: rep[k] for k in ("enumeration_ppl", "enumeration_ppl_oracle",
                                                "assignment_ppl", "assignment_ppl_oracle",
                                                "token_ppl", "n_examples")}})
    if not rows:
        raise SatlmError("no per-variable-count results found in the inputs")
    fields = list(rows[0])
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    written = ["results.csv"]
    for metric in ("enumeration_ppl", "assignment_ppl"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for run in sorted({r["run"] for r in rows}):
            pts = [(r["vars"], r[metric]) for r in rows if r["run"] == run]
            ax.plot(*zip(*pts), marker="o", label=run)
        ax.set_xlabel("variable count")
        ax.set_ylabel(metric.replace("_", " "))
        ax.legend()
        fig.tight_layout()
        name = f"{metric}_vs_vars.png"
        fig.savefig(out / name, metadata={"Software": None})
        plt.close(fig)
        written.append(name)
    print(f"wrote {len(rows)} rows")
    return written


# -- parser -----------------------------------------------------------------------------

COMMANDS: dict[str, tuple[Callable, str, dict]] = {
    "gen-data": (cmd_gen_data, "generate a random 3-SAT corpus",
                 {"vars": [6, 7, 8, 9, 10, 11, 12, 13, 14], "per_count": 1020,
                  "split": (100, 1, 1), "alpha": "4.2667"}),
    "probe-localprob": (cmd_probe_localprob, "exact local probability after add-one blow-up",
                        {"lambda": ("2", Fraction(4)), "variant": "members_only", "epsilon": "1",
                         "lenient": False}),
    "witness-check": (cmd_witness_check, "compare the witness network with the language",
                      {"n": 12}),
    "train-ar": (cmd_train_ar, "train an autoregressive baseline on a corpus",
                 {"kind": "rnn", "order": 3, "hidden": 64, "layers": 1, "lr": 0.1, "batch": 32,
                  "epochs": 10, "patience": 2, "momentum": 0.9}),
    "eval-ar": (cmd_eval_ar, "corpus metrics for a checkpoint",
                {"kind": "trie", "order": 3, "hidden": 64, "layers": 1, "split": "test"}),
    "train-rebm": (cmd_train_rebm, "fit a residual discriminator on the toy task",
                   {"activation": "tanh2", "K": 25, "lr": 0.05, "batch": 16, "epochs": 30,
                    "patience": 1, "train_size": 2000, "dev_size": 200, "test_size": 1000}),
    "eval-rebm": (cmd_eval_rebm, "bootstrap improvement report for a trained residual model",
                  {"n_boot": 1000, "n_z": 32, "M": 512}),
    "kl-check": (cmd_kl_check, "check the base-swap KL identity on random instances",
                 {"instances": 20, "support": 12, "tolerance": 1e-9}),
    "report": (cmd_report, "render evaluation JSON into CSV and plots", {}),
}

COMMON_DEFAULTS = {"seed": 0, "threads": os.cpu_count() or 1}


def _add_options(name: str, p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=S, help="master seed (default 0)")
    p.add_argument("--out", default=S, help="output directory (default runs/<command>)")
    p.add_argument("--threads", type=int, default=S,
                   help="worker processes where supported (default: all cores)")
    p.add_argument("--config", default=S, help="flat key=value file of option defaults")
    if name == "gen-data":
        p.add_argument("--vars", type=parse_int_list, default=S, help="e.g. 6..14 or 6,8,10")
        p.add_argument("--per-count", type=int, default=S)
        p.add_argument("--split", type=parse_ratio, default=S, help="train:dev:test, e.g. 100:1:1")
        p.add_argument("--alpha", default=S, help="clause density as a decimal or fraction")
    elif name == "probe-localprob":
        p.add_argument("--dimacs", default=S, help="file holding modified-DIMACS text")
        p.add_argument("--formula", default=S, help="modified-DIMACS text given inline")
        p.add_argument("--var-count", type=int, default=S)
        p.add_argument("--lambda", dest="lambda", type=parse_lambda, default=S,
                       help="approximation factor, e.g. 2, 10 or sqrt(2)")
        p.add_argument("--k", type=int, default=S, help="override the blow-up parameter")
        p.add_argument("--variant", choices=["members_only", "full_support"], default=S)
        p.add_argument("--epsilon", default=S)
        p.add_argument("--lenient", action="store_true", default=S,
                       help="accept clauses that repeat a variable")
    elif name == "witness-check":
        p.add_argument("--n", type=int, default=S, help="string length to check")
        p.add_argument("--n-min", type=int, default=S, help="check every length n-min..n")
    elif name in ("train-ar", "eval-ar"):
        p.add_argument("--corpus", default=S)
        p.add_argument("--vars", type=parse_int_list, default=S)
        p.add_argument("--kind", choices=["trie", "ngram", "rnn"], default=S)
        p.add_argument("--order", type=int, default=S)
        p.add_argument("--hidden", type=int, default=S)
        p.add_argument("--layers", type=int, default=S)
        if name == "train-ar":
            p.add_argument("--lr", type=float, default=S)
            p.add_argument("--batch", type=int, default=S)
            p.add_argument("--epochs", type=int, default=S)
            p.add_argument("--patience", type=int, default=S)
            p.add_argument("--momentum", type=float, default=S)
        else:
            p.add_argument("--model", default=S, help="checkpoint written by train-ar")
            p.add_argument("--split", choices=["train", "dev", "test"], default=S)
    elif name == "train-rebm":
        p.add_argument("--base", default=S, help="base checkpoint (default: fit a unigram)")
        p.add_argument("--corpus", default=S, help="folder with train/dev/test.txt")
        p.add_argument("--activation", choices=["tanh2", "softplus"], default=S)
        p.add_argument("--K", type=int, default=S, help="noise samples per item")
        p.add_argument("--lr", type=float, default=S)
        p.add_argument("--batch", type=int, default=S)
        p.add_argument("--epochs", type=int, default=S)
        p.add_argument("--patience", type=int, default=S)
        p.add_argument("--train-size", type=int, default=S)
        p.add_argument("--dev-size", type=int, default=S)
        p.add_argument("--test-size", type=int, default=S)
    elif name == "eval-rebm":
        p.add_argument("--model", default=S, help="output folder of train-rebm")
        p.add_argument("--n-boot", type=int, default=S)
        p.add_argument("--n-z", type=int, default=S)
        p.add_argument("--M", type=int, default=S)
    elif name == "kl-check":
        p.add_argument("--instances", type=int, default=S)
        p.add_argument("--support", type=int, default=S)
        p.add_argument("--tolerance", type=float, default=S)
    elif name == "report":
        p.add_argument("inputs", nargs="+", help="eval.json files from eval-ar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satlm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text, _) in COMMANDS.items():
        _add_options(name, sub.add_parser(name, help=help_text, description=help_text))
    return parser


def _option_types(parser: argparse.ArgumentParser, command: str) -> dict[str, Callable]:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    types = {}
    for action in sub.choices[command]._actions:
        if isinstance(action, argparse._StoreTrueAction):
            types[action.dest] = lambda v: str(v).strip().lower() in ("1", "true", "yes", "on")
        elif action.dest != "help":
            types[action.dest] = action.type or str
    return types


def read_config(path: str, types: dict[str, Callable]) -> dict:
    values = {}
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SatlmError(f"{path}:{number}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in types:
            raise SatlmError(f"{path}:{number}: unknown option {key!r}")
        try:
            values[key] = types[key](value)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise SatlmError(f"{path}:{number}: bad value for {key}: {exc}") from exc
    return values


def resolve(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    config = {}
    if "config" in flags:
        config = read_config(flags.pop("config"), _option_types(parser, ns.command))
    cfg = {**COMMON_DEFAULTS, **COMMANDS[ns.command][2], **config, **flags}
    cfg.setdefault("out", str(Path("runs") / ns.command))
    return cfg


def dispatch(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    started = _now()
    try:
        cfg = resolve(parser, ns)
        if ns.command in ("train-ar", "eval-ar") and "corpus" not in cfg:
            raise SatlmError(f"{ns.command} needs --corpus")
        if ns.command == "eval-rebm" and "model" not in cfg:
            raise SatlmError("eval-rebm needs --model")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[ns.command][0](cfg, out)
        write_manifest(out, ns.command, cfg, started, outputs)
    except (SatlmError, OSError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
