"""Command-line pipeline: ``python -m eadtransfer <subcommand> [options]``.

Settings come from three layers, later ones winning: built-in defaults, an
optional INI-style config file (``--config``), and command-line flags.  The
config file has the sections of :data:`SCHEMA`; an unknown section or key is
an error.

Every run writes into ``<out>/<subcommand>-<hash>/`` where ``hash`` is taken
over the run manifest (resolved settings plus digests of every input file),
so identical inputs land in the same directory with identical bytes.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path


from . import __version__
from . import evaluation as E
from . import mnist
from . import models as M
from .attacks import CwEadConfig, PgdConfig

log = logging.getLogger("eadtransfer")


class ConfigError(ValueError):
    """Bad config file, unknown key, or unparsable value."""


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _strs(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _opt(kind):
    def parse(text):
        return None if text in (None, "", "none", "None") else kind(text)

    return parse


# section -> key -> (parser, default)
SCHEMA = {
    "data": {"dir": (_opt(str), None), "split": (str, "test")},
    "model": {"arch": (str, "desk")},
    "train": {
        "mode": (str, "natural"),
        "epsilon": (float, 0.3),
        "epochs": (int, 1),
        "lr": (float, 1e-3),
        "batch_size": (int, 50),
        "seed": (int, 0),
        "max_examples": (_opt(int), None),
        "pgd_steps": (int, 40),
        "step_size": (_opt(float), None),
        "warmup_steps": (int, 0),
    },
    "attack": {
        "name": (str, "ead"),
        "mode": (str, "targeted"),
        "source": (_strs, []),
        "target": (_opt(str), None),
        "n": (int, 100),
        "seed": (int, 0),
        "kappa": (float, 0.0),
        "beta": (float, 1e-2),
        "epsilon": (float, 0.3),
        "steps": (int, 40),
        "c0": (float, 1e-3),
        "binary_steps": (int, 9),
        "iters": (int, 1000),
    },
    "sweep": {"kappa": (_floats, [0.0]), "beta": (_floats, [1e-2]), "epsilon": (_floats, [0.3])},
    "report": {"inputs": (_strs, [])},
    "render": {"outcomes": (_strs, []), "n": (int, 8)},
    "run": {"out": (str, "runs"), "workers": (int, 1)},
}

COMMAND_SECTIONS = {
    "fetch-data": ("data", "run"),
    "train": ("data", "model", "train", "run"),
    "attack": ("data", "attack", "run"),
    "sweep": ("data", "attack", "sweep", "run"),
    "report": ("report", "run"),
    "render": ("data", "render", "run"),
    "selftest": ("run",),
}


def read_config(path) -> dict:
    """Parse an INI file into ``{section: {key: value}}``, rejecting unknown names."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = raw
    return out


def resolve(command, file_values: dict, flags: dict) -> dict:
    """Merge defaults, file values and flags for the sections ``command`` uses."""
    settings = {}
    for section in COMMAND_SECTIONS[command]:
        settings[section] = {}
        for key, (parse, default) in SCHEMA[section].items():
            value = default
            if key in file_values.get(section, {}):
                value = file_values[section][key]
            if flags.get(f"{section}.{key}") is not None:
                value = flags[f"{section}.{key}"]
            try:
                settings[section][key] = parse(value) if isinstance(value, str) else value
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    return settings


# ---------------------------------------------------------------------------
# run directories


def _digest(path) -> str:
    return mnist.file_digest(path, "sha256")


def start_run(command, settings, inputs=(), extra=None):
    """Create the content-addressed run directory and write its manifest."""
    # the output root only says where results go, so it stays out of the hash
    recorded = {k: v for k, v in settings.items() if k != "run"}
    recorded["run"] = {k: v for k, v in settings["run"].items() if k != "out"}
    manifest = {
        "command": command,
        "version": __version__,
        "settings": recorded,
        "inputs": {str(p): _digest(p) for p in inputs},
    }
    manifest.update(extra or {})
    run_dir = Path(settings["run"]["out"]) / f"{command}-{E.manifest_hash(manifest)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    E.write_manifest(run_dir / "manifest.json", manifest)
    return run_dir, manifest


def _load_models(paths):
    if not paths:
        raise ConfigError("no source checkpoint given (--source)")
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    return [M.load_checkpoint(p) for p in paths]


def _source(models):
    return models[0] if len(models) == 1 else M.Ensemble(models)


def _modes(mode):
    try:
        return {"targeted": [True], "nontargeted": [False], "both": [True, False]}[mode]
    except KeyError:
        raise ConfigError(f"mode must be targeted, nontargeted or both, not {mode!r}") from None


def _samples(settings):
    a = settings["attack"]
    data = mnist.load_mnist(settings["data"]["split"], settings["data"]["dir"])
    return mnist.sample_subset(data, a["n"], a["seed"])


def _attack_config(a, name, **over):
    if name in ("ifgm", "pgd"):
        eps = over.get("epsilon", a["epsilon"])
        return PgdConfig(eps, a["steps"], None, random_start=(name == "pgd"))
    if name in ("cw", "ead"):
        cfg = CwEadConfig(kappa=a["kappa"], beta=a["beta"], c0=a["c0"], binary_steps=a["binary_steps"], iters=a["iters"])
        cfg = replace(cfg, **{k: v for k, v in over.items() if k in ("kappa", "beta")})
        return replace(cfg, beta=0.0) if name == "cw" else cfg
    if name == "fgm":
        return None
    raise ConfigError(f"unknown attack {name!r}")


def _hyper(name, cfg, a, over):
    if name in ("cw", "ead"):
        h = {"confidence": cfg.kappa}
        if name == "ead":
            h = {"beta": cfg.beta, **h}
        return h
    return {"epsilon": over.get("epsilon", a["epsilon"])}


def _write_rows(run_dir, rows):
    (run_dir / "rows.json").write_text(E.canonical_json([r.to_dict() for r in rows]))
    (run_dir / "report.csv").write_text(E.report_table(rows, "csv"))
    (run_dir / "report.md").write_text(E.report_table(rows, "markdown"))


def _run_grid(settings, run_dir, points):
    """Craft and score every (mode, overrides) point; returns EvalRows."""
    a = settings["attack"]
    workers = settings["run"]["workers"]
    name = a["name"]
    source = _source(_load_models(a["source"]))
    target = M.load_checkpoint(a["target"]) if a["target"] else None
    samples, idx = _samples(settings)
    rows = []
    for k, (targeted, over) in enumerate(points):
        goals = mnist.make_goals(samples.labels, targeted, a["seed"])
        cfg = _attack_config(a, name, **over)
        eps = over.get("epsilon", a["epsilon"])
        t0 = time.perf_counter()
        outs = E.craft(name, source, samples.images, goals, epsilon=eps, config=cfg, seed=a["seed"], workers=workers)
        log.info("point %d/%d (%s, %s): %.1fs", k + 1, len(points), "targeted" if targeted else "non-targeted", over, time.perf_counter() - t0)
        tag = ("t" if targeted else "n") + "".join(f"_{key}{val:g}" for key, val in sorted(over.items()))
        E.outcomes_to_npz(run_dir / f"outcomes_{tag}.npz", outs, goals, idx)
        hyper = _hyper(name, cfg, a, over)
        if target is not None:
            rows.append(
                E.transfer_evaluate(
                    outs, target, goals, attack=E.ATTACK_NAMES[name], hyper=hyper, seed=a["seed"], sample_hash=samples.digest()
                )
            )
        else:
            # no target: score against the source itself (white-box rates)
            rows.append(
                E.transfer_evaluate(
                    outs, source, goals, attack=E.ATTACK_NAMES[name], hyper=hyper, seed=a["seed"], sample_hash=samples.digest()
                )
            )
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_fetch_data(settings, args):
    root = mnist.data_dir(settings["data"]["dir"])
    written = mnist.fetch(root, manifest=mnist.read_manifest())
    for p in written:
        print(f"downloaded {p}")
    if args.verify:
        bad = mnist.verify_files(root, mnist.read_manifest())
        if bad:
            raise ValueError(f"checksum mismatch for {', '.join(bad)}")
    for split in ("train", "test"):
        ds = mnist.load_mnist(split, root)
        print(f"{split}: {len(ds)} images, sha256 {ds.digest()[:16]}")
    return 0


def cmd_train(settings, args):
    t = settings["train"]
    spec = M.NetworkSpec.named(settings["model"]["arch"])
    data = mnist.load_mnist("train", settings["data"]["dir"])
    run_dir, _ = start_run("train", settings, extra={"train_digest": data.digest()})
    cfg = M.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"], max_examples=t["max_examples"])
    t0 = time.perf_counter()
    if t["mode"] == "natural":
        model = M.train_natural(spec, data, cfg)
    elif t["mode"] == "adversarial":
        adv = M.AdvTrainConfig(t["epsilon"], t["pgd_steps"], t["step_size"], warmup_steps=t["warmup_steps"])
        model = M.train_adversarial(spec, data, adv, cfg)
    else:
        raise ConfigError(f"train mode must be natural or adversarial, not {t['mode']!r}")
    path = M.save_checkpoint(model, run_dir / "model.ckpt")
    test = mnist.load_mnist("test", settings["data"]["dir"])
    collapsed, share, cls = M.prediction_collapse(model, test)
    log.info("trained in %.1fs", time.perf_counter() - t0)
    print(f"{path}  clean accuracy {100 * M.accuracy(model, test):.2f}%  top-class share {100 * share:.1f}% (class {cls})")
    return 0


def _attack_inputs(settings):
    a = settings["attack"]
    return list(a["source"]) + ([a["target"]] if a["target"] else [])


def cmd_attack(settings, args):
    a = settings["attack"]
    _load_models(a["source"])  # fail before creating the run directory
    run_dir, _ = start_run("attack", settings, _attack_inputs(settings))
    rows = _run_grid(settings, run_dir, [(m, {}) for m in _modes(a["mode"])])
    _write_rows(run_dir, rows)
    print(run_dir)
    sys.stdout.write(E.report_table(rows))
    return 0


def cmd_sweep(settings, args):
    a, s = settings["attack"], settings["sweep"]
    _load_models(a["source"])
    name = a["name"]
    if name == "ead":
        grid = [{"beta": b, "kappa": k} for b in s["beta"] for k in s["kappa"]]
    elif name == "cw":
        grid = [{"kappa": k} for k in s["kappa"]]
    else:
        grid = [{"epsilon": e} for e in s["epsilon"]]
    run_dir, _ = start_run("sweep", settings, _attack_inputs(settings))
    rows = _run_grid(settings, run_dir, [(m, g) for g in grid for m in _modes(a["mode"])])
    _write_rows(run_dir, rows)
    print(run_dir)
    sys.stdout.write(E.report_table(rows))
    return 0


def _rows_from(path: Path):
    if path.is_dir():
        path = path / "rows.json"
    if not path.exists():
        raise FileNotFoundError(f"no stored rows at {path}")
    if path.suffix == ".csv":
        return E.rows_from_csv(path.read_text())
    return [E.EvalRow(**d) for d in json.loads(path.read_text())]


def cmd_report(settings, args):
    paths = [Path(p) for p in settings["report"]["inputs"]]
    if not paths:
        raise ConfigError("report needs at least one input (run directory, rows.json or report CSV)")
    rows = [r for p in paths for r in _rows_from(p)]
    files = [p / "rows.json" if p.is_dir() else p for p in paths]
    run_dir, _ = start_run("report", settings, files)
    (run_dir / "report.csv").write_text(E.report_table(rows, "csv"))
    (run_dir / "report.md").write_text(E.report_table(rows, "markdown"))
    print(run_dir)
    sys.stdout.write(E.report_table(rows))
    return 0


def cmd_render(settings, args):
    r = settings["render"]
    if not r["outcomes"]:
        raise ConfigError("render needs at least one outcomes file (--outcomes)")
    sets = [E.outcomes_from_npz(p) for p in r["outcomes"]]
    idx = sets[0][2][: r["n"]]
    data = mnist.load_mnist(settings["data"]["split"], settings["data"]["dir"])
    images = []
    for k in range(len(idx)):
        images.append(data.images[idx[k]])
        images += [outs[k].adversarial for outs, _, _ in sets]
    run_dir, _ = start_run("render", settings, r["outcomes"])
    layout = (len(idx), 1 + len(sets))
    E.render_grid(images, layout, run_dir / "grid.pgm")
    E.render_grid(images, layout, run_dir / "grid.png")
    print(run_dir)
    return 0


def cmd_selftest(settings, args):
    from .selftest import run_all

    failures = 0
    for name, ok, detail in run_all():
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
        failures += not ok
    return 1 if failures else 0


COMMANDS = {
    "fetch-data": cmd_fetch_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "render": cmd_render,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# argument parsing


def _flag(p, flag, key, help=None, **kw):
    p.add_argument(flag, dest=key, default=None, help=help, **kw)


def build_parser():
    parser = argparse.ArgumentParser(prog="python -m eadtransfer", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style settings file")
    _flag(common, "--out", "run.out", "output root directory")
    _flag(common, "--workers", "run.workers", "worker processes for crafting", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("fetch-data", parents=[common], help="download and check MNIST")
    _flag(p, "--data-dir", "data.dir")
    p.add_argument("--verify", action="store_true", help="also checksum files already present")

    p = sub.add_parser("train", parents=[common], help="train a natural or adversarial model")
    _flag(p, "--data-dir", "data.dir")
    _flag(p, "--arch", "model.arch", choices=["desk", "full"])
    _flag(p, "--mode", "train.mode", choices=["natural", "adversarial"])
    _flag(p, "--epsilon", "train.epsilon", type=float)
    _flag(p, "--epochs", "train.epochs", type=int)
    _flag(p, "--lr", "train.lr", type=float)
    _flag(p, "--batch-size", "train.batch_size", type=int)
    _flag(p, "--seed", "train.seed", type=int)
    _flag(p, "--max-examples", "train.max_examples", type=int)
    _flag(p, "--pgd-steps", "train.pgd_steps", type=int)
    _flag(p, "--step-size", "train.step_size", type=float)
    _flag(p, "--warmup-steps", "train.warmup_steps", type=int)

    for name in ("attack", "sweep"):
        p = sub.add_parser(name, parents=[common], help="craft examples and score them" if name == "attack" else "grid over kappa/beta/epsilon")
        _flag(p, "--data-dir", "data.dir")
        _flag(p, "--split", "data.split", choices=["train", "test"])
        _flag(p, "--attack", "attack.name", choices=sorted(E.ATTACK_NAMES))
        _flag(p, "--mode", "attack.mode", choices=["targeted", "nontargeted", "both"])
        _flag(p, "--source", "attack.source", "checkpoint(s), comma separated; several form an ensemble", type=_strs)
        _flag(p, "--target", "attack.target", "checkpoint scored for transfer")
        _flag(p, "--n", "attack.n", type=int)
        _flag(p, "--seed", "attack.seed", type=int)
        _flag(p, "--steps", "attack.steps", type=int)
        _flag(p, "--c0", "attack.c0", type=float)
        _flag(p, "--binary-steps", "attack.binary_steps", type=int)
        _flag(p, "--iters", "attack.iters", type=int)
        if name == "attack":
            _flag(p, "--kappa", "attack.kappa", type=float)
            _flag(p, "--beta", "attack.beta", type=float)
            _flag(p, "--epsilon", "attack.epsilon", type=float)
        else:
            _flag(p, "--kappa", "sweep.kappa", type=_floats)
            _flag(p, "--beta", "sweep.beta", type=_floats)
            _flag(p, "--epsilon", "sweep.epsilon", type=_floats)

    p = sub.add_parser("report", parents=[common], help="merge stored rows into CSV/markdown tables")
    _flag(p, "--inputs", "report.inputs", type=_strs)
    p.add_argument("paths", nargs="*", help="run directories, rows.json or report CSV files")

    p = sub.add_parser("render", parents=[common], help="draw clean/adversarial image grids")
    _flag(p, "--data-dir", "data.dir")
    _flag(p, "--split", "data.split", choices=["train", "test"])
    _flag(p, "--outcomes", "render.outcomes", type=_strs)
    _flag(p, "--n", "render.n", type=int)

    sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if "." in k}
    if getattr(args, "paths", None):
        flags["report.inputs"] = list(flags.get("report.inputs") or []) + args.paths
    try:
        file_values = read_config(args.config) if args.config else {}
        settings = resolve(args.command, file_values, flags)
        if settings["run"]["workers"] < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](settings, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, M.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
