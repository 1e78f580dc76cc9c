"""Command-line entry point: train, ablate, export-kernel, saliency, kmeans.

Settings are resolved in three layers: built-in defaults, then a key=value
config file (``--config``), then explicit flags. The resolved settings are
written to ``config.txt`` in the output directory, and that file can be
passed back through ``--config`` to repeat the run.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Dataset, kmeans, load_dense_csv, load_mnist_dir, make_circle_ring
from .kernel import block_contrast, export_kernel, gaussian_kernel, pairwise_sq_dist, write_pgm, sigma_rule
from .loss import TERM_NAMES
from .metrics import acc, nmi
from .network import guided_backprop, load_checkpoint
from .trainer import (
    DEFAULT_LR,
    PAPER_ITERATIONS,
    PAPER_RUNS,
    TrainConfig,
    network_inputs,
    train_multi,
    vote_ensemble,
)

log = logging.getLogger("ddc")


class UsageError(Exception):
    """Bad flags or dataset spec; exit status 2."""


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _terms(text: str) -> tuple[str, ...]:
    names = tuple(t.strip() for t in str(text).replace("+", ",").split(",") if t.strip())
    bad = [t for t in names if t not in TERM_NAMES]
    if bad or not names:
        raise UsageError(f"--terms must name some of {','.join(TERM_NAMES)}, got {text!r}")
    return names


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text in (None, "", "None", "default") else float(text)


def _opt_int(text):
    return None if text in (None, "", "None") else int(text)


# key -> (parser, default); shared by flags and config files
SETTINGS = {
    "data": (str, None),
    "digits": (str, ""),
    "per_class": (_opt_int, None),
    "data_seed": (int, 0),
    "labels": (_bool, True),
    "arch": (str, "mlp"),
    "k": (int, 2),
    "batch_size": (int, 100),
    "learning_rate": (_opt_float, None),
    "iterations": (int, 3000),
    "seed": (int, 0),
    "runs": (int, 5),
    "vote_top": (int, 3),
    "terms": (str, ",".join(TERM_NAMES)),
    "paper_scale": (_bool, False),
    "parallel_runs": (int, 1),
    "repeats": (int, 3),
    "checkpoint": (str, None),
    "sample": (int, 500),
    "indices": (str, "0,1,2,3"),
    "restarts": (int, 10),
    "out": (str, None),
}

COMMAND_KEYS = {
    "train": ["data", "digits", "per_class", "data_seed", "labels", "arch", "k", "batch_size",
              "learning_rate", "iterations", "seed", "runs", "vote_top", "terms", "paper_scale",
              "parallel_runs", "out"],
    "ablate": ["data", "digits", "per_class", "data_seed", "labels", "arch", "k", "batch_size",
               "learning_rate", "iterations", "seed", "runs", "paper_scale", "parallel_runs",
               "repeats", "out"],
    "export-kernel": ["checkpoint", "data", "digits", "per_class", "data_seed", "labels", "sample",
                      "seed", "out"],
    "saliency": ["checkpoint", "data", "digits", "per_class", "data_seed", "labels", "indices", "out"],
    "kmeans": ["data", "digits", "per_class", "data_seed", "labels", "k", "restarts", "seed", "out"],
}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "command":
            continue
        if key not in SETTINGS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def write_config(path, command: str, settings: dict) -> None:
    lines = [f"command = {command}"]
    for key in COMMAND_KEYS[command]:
        value = settings[key]
        lines.append(f"{key} = {'' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(command: str, args: argparse.Namespace) -> dict:
    raw = {key: default for key, (_, default) in SETTINGS.items()}
    explicit = set()
    if getattr(args, "config", None):
        from_file = read_config(args.config)
        raw.update(from_file)
        explicit |= set(from_file)
    for key in COMMAND_KEYS[command]:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
            explicit.add(key)
    settings = {}
    for key in COMMAND_KEYS[command]:
        parse = SETTINGS[key][0]
        try:
            settings[key] = raw[key] if raw[key] is None else parse(raw[key])
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
    if "paper_scale" in settings and settings["paper_scale"]:
        # the full-scale protocol replaces the desk-scale budget unless set explicitly
        if "iterations" not in explicit:
            settings["iterations"] = PAPER_ITERATIONS
        if "runs" not in explicit:
            settings["runs"] = PAPER_RUNS
    if "arch" in settings and settings.get("learning_rate") is None:
        if settings["arch"] not in DEFAULT_LR:
            raise UsageError(f"--arch must be one of {sorted(DEFAULT_LR)}")
        settings["learning_rate"] = DEFAULT_LR[settings["arch"]]
    if "terms" in settings:
        settings["terms"] = ",".join(_terms(settings["terms"]))
    if settings.get("data") is None:
        raise UsageError("--data is required")
    return settings


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def load_dataset(settings: dict) -> Dataset:
    """``synth:rings``, ``mnist:<dir>`` or ``csv:<path>``."""
    spec = settings["data"]
    kind, _, arg = spec.partition(":")
    digits = _int_list(settings.get("digits") or "") or None
    cap = settings.get("per_class")
    seed = settings.get("data_seed", 0)
    if kind == "synth":
        if arg not in ("rings", "circle-ring"):
            raise UsageError(f"unknown synthetic dataset {arg!r} (available: rings)")
        n = cap if cap is not None else 500
        return make_circle_ring(n_per_class=n, seed=seed)
    if kind == "mnist":
        if not arg:
            raise UsageError("mnist: needs a directory, e.g. mnist:data/mnist")
        if not Path(arg).is_dir():
            raise UsageError(f"dataset directory not found: {arg}")
        return load_mnist_dir(arg, digits, cap, seed)
    if kind == "csv":
        if not Path(arg).is_file():
            raise UsageError(f"dataset file not found: {arg}")
        data = load_dense_csv(arg, has_labels=settings.get("labels", True))
        if digits is not None or cap is not None:
            raise UsageError("--digits/--per-class apply to mnist: data only")
        return data
    raise UsageError(f"unknown dataset spec {spec!r}; use synth:rings, mnist:<dir> or csv:<path>")


def _out_dir(settings: dict, default: str) -> Path:
    out = Path(settings.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _train_config(settings: dict, terms=None) -> TrainConfig:
    return TrainConfig(
        arch=settings["arch"],
        k=settings["k"],
        batch_size=settings["batch_size"],
        learning_rate=settings["learning_rate"],
        iterations=settings["iterations"],
        seed=settings["seed"],
        runs=settings["runs"],
        vote_top=min(settings.get("vote_top", 3), settings["runs"]),
        terms=tuple(terms) if terms is not None else _terms(settings["terms"]),
    )


def report_table(rows: list[tuple[str, float, float]]) -> str:
    lines = ["Method, NMI, ACC[%]"]
    lines += [f"{name}, {n:.4f}, {100 * a:.2f}" for name, n, a in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    settings = resolve("train", args)
    data = load_dataset(settings)
    cfg = _train_config(settings)
    out = _out_dir(settings, "ddc-out")
    write_config(out / "config.txt", "train", settings)
    metrics = out / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    best, results = train_multi(data, cfg, metrics, out / "checkpoints", settings["parallel_runs"])
    ok = [r for r in results if not r.failed]
    vote = vote_ensemble(results, min(cfg.vote_top, len(ok)), cfg.k)

    summary = {"best_run": best.run, "runs": []}
    for r in results:
        entry = r.summary()
        if data.labels is not None and not r.failed:
            entry["nmi"] = nmi(data.labels, r.assignments)
            entry["acc"] = acc(data.labels, r.assignments)
        summary["runs"].append(entry)
    np.savetxt(out / "assignments.csv", np.stack([best.assignments, vote], axis=1),
               fmt="%d", delimiter=",", header="ddc,ddc_vote", comments="")

    lines = [f"best run {best.run} (seed {best.seed}), final loss {best.final_loss['total']:.6f}"]
    if data.labels is not None:
        rows = [("DDC", nmi(data.labels, best.assignments), acc(data.labels, best.assignments)),
                ("DDC-VOTE", nmi(data.labels, vote), acc(data.labels, vote))]
        summary["ddc"] = {"nmi": rows[0][1], "acc": rows[0][2]}
        summary["ddc_vote"] = {"nmi": rows[1][1], "acc": rows[1][2]}
        table = report_table(rows)
        lines.append(table.rstrip())
    else:
        table = "no labels: metrics not computed\n"
        lines.append(table.rstrip())
    (out / "runs.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def term_subsets() -> list[tuple[str, ...]]:
    """All non-empty subsets of the loss terms, singletons first."""
    return [s for r in range(1, len(TERM_NAMES) + 1) for s in itertools.combinations(TERM_NAMES, r)]


def cmd_ablate(args) -> int:
    settings = resolve("ablate", args)
    data = load_dataset(settings)
    if data.labels is None:
        raise UsageError("ablation needs a labelled dataset")
    if settings["repeats"] < 1:
        raise UsageError("--repeats must be at least 1")
    out = _out_dir(settings, "ddc-ablate")
    write_config(out / "config.txt", "ablate", settings)
    rows = []
    for subset in term_subsets():
        tag = "+".join(subset)
        metrics = out / f"metrics_{tag}.jsonl"
        metrics.unlink(missing_ok=True)
        accs = []
        for rep in range(settings["repeats"]):
            # disjoint run seeds per repeat
            cfg = _train_config({**settings, "seed": settings["seed"] + rep * settings["runs"]}, subset)
            best, _ = train_multi(data, cfg, metrics, None, settings["parallel_runs"])
            accs.append(acc(data.labels, best.assignments))
        accs = np.asarray(accs)
        rows.append({"terms": tag, "mean": float(accs.mean()), "std": float(accs.std()),
                     "max": float(accs.max()), "acc": accs.tolist()})
        log.info("%s: %s", tag, accs)
    lines = ["Terms, ACC mean[%], ACC std[%], ACC max[%]"]
    lines += [f"{r['terms']}, {100 * r['mean']:.2f}, {100 * r['std']:.2f}, {100 * r['max']:.2f}" for r in rows]
    text = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(text)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(text, end="")
    return 0


def _load_net(path):
    if not path:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_export_kernel(args) -> int:
    settings = resolve("export-kernel", args)
    net, _ = _load_net(settings["checkpoint"])
    data = load_dataset(settings)
    if data.labels is None:
        raise UsageError("export-kernel sorts rows by class and needs a labelled dataset")
    rng = np.random.default_rng(settings["seed"])
    n = min(settings["sample"], data.n)
    if n < 2:
        raise UsageError("--sample must be at least 2")
    idx = np.sort(rng.choice(data.n, size=n, replace=False))
    sample = data.subset(idx)
    _, hidden = net.predict(network_inputs(sample, net.arch))
    d = pairwise_sq_dist(hidden.astype(np.float64))
    k = gaussian_kernel(d, sigma_rule(d)).data
    out = _out_dir(settings, "ddc-kernel")
    write_config(out / "config.txt", "export-kernel", settings)
    sorted_k = export_kernel(k, sample.labels, out / "kernel.csv", out / "kernel.pgm")
    within, between = block_contrast(k, sample.labels)
    print(f"kernel {sorted_k.shape[0]}x{sorted_k.shape[1]}, sigma {sigma_rule(d):.6g}")
    print(f"mean within-class {within:.6f}, mean between-class {between:.6f}")
    return 0


def saliency_image(grad: np.ndarray) -> np.ndarray:
    """Scale |grad| to [0, 255]; an all-zero map stays zero."""
    mag = np.abs(np.asarray(grad, dtype=np.float64))
    top = mag.max() if mag.size else 0.0
    return np.zeros_like(mag) if top == 0 else 255.0 * mag / top


def cmd_saliency(args) -> int:
    settings = resolve("saliency", args)
    net, _ = _load_net(settings["checkpoint"])
    data = load_dataset(settings)
    if not data.is_image:
        raise UsageError("saliency maps need an image dataset")
    if net.arch != "conv":
        log.warning("checkpoint is an %s network: the flat saliency map is reshaped to the image", net.arch)
    indices = _int_list(settings["indices"])
    bad = [i for i in indices if not 0 <= i < data.n]
    if bad:
        raise UsageError(f"sample indices out of range: {bad}")
    out = _out_dir(settings, "ddc-saliency")
    write_config(out / "config.txt", "saliency", settings)
    probs, _ = net.predict(network_inputs(data.subset(indices), net.arch))
    for i, p in zip(indices, probs):
        image = data.features[i]
        unit = int(np.argmax(p))
        grad = guided_backprop(net, image, unit).reshape(image.shape)
        write_pgm(out / f"sample{i:05d}_input.pgm", 255.0 * np.clip(image[0], 0.0, 1.0))
        write_pgm(out / f"sample{i:05d}_saliency.pgm", saliency_image(grad[0]))
        print(f"sample {i}: cluster {unit}")
    return 0


def cmd_kmeans(args) -> int:
    settings = resolve("kmeans", args)
    data = load_dataset(settings)
    labels = kmeans(data.flat(), settings["k"], settings["restarts"], settings["seed"])
    if settings.get("out"):
        out = _out_dir(settings, "")
        write_config(out / "config.txt", "kmeans", settings)
        np.savetxt(out / "assignments.csv", labels, fmt="%d")
    if data.labels is not None:
        print(report_table([("k-means", nmi(data.labels, labels), acc(data.labels, labels))]), end="")
    else:
        print(f"cluster sizes: {np.bincount(labels, minlength=settings['k']).tolist()}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="synth:rings | mnist:<dir> | csv:<path>")
    p.add_argument("--digits", help="comma-separated classes to keep (mnist)")
    p.add_argument("--per-class", dest="per_class", type=int, help="balanced per-class cap (points per class for synth)")
    p.add_argument("--data-seed", dest="data_seed", type=int, help="seed for dataset generation and subsampling")
    p.add_argument("--no-labels", dest="labels", action="store_const", const=False,
                   help="csv has no trailing label column")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", choices=sorted(DEFAULT_LR))
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float, help="default 1e-3 conv, 1e-5 mlp")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--paper-scale", dest="paper_scale", action="store_const", const=True,
                   help=f"{PAPER_ITERATIONS} iterations x {PAPER_RUNS} runs unless overridden")
    p.add_argument("--parallel-runs", dest="parallel_runs", type=int, help="worker processes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddc", description="Deep divergence-based clustering")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="best-of-N training with voting ensemble")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--vote-top", dest="vote_top", type=int)
    p.add_argument("--terms", help="loss terms to enable, e.g. l1,l2,l3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train with every non-empty subset of loss terms")
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--repeats", type=int, help="independent best-of-N selections per subset")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-kernel", help="label-sorted hidden-space kernel matrix as CSV and PGM")
    p.add_argument("--checkpoint")
    _data_flags(p)
    p.add_argument("--sample", type=int, help="number of points (default 500)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_export_kernel)

    p = sub.add_parser("saliency", help="guided-backprop maps for selected samples")
    p.add_argument("--checkpoint")
    _data_flags(p)
    p.add_argument("--indices", help="comma-separated sample indices")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("kmeans", help="k-means baseline")
    _data_flags(p)
    p.add_argument("--k", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_kmeans)

    for p in sub.choices.values():
        p.add_argument("--config", help="key=value settings file (flags take precedence)")
        p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ddc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"ddc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
