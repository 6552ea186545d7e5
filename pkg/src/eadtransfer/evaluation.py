"""Transfer evaluation: craft on source models, score against a target model.

A row of results (:class:`EvalRow`) holds the attack success rate on the
target and the L1/L2/Linf distortions averaged over the examples that
fooled it.  Sweeps over kappa, beta or epsilon reuse one sample set and one
seed so their rows are paired.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackOutcome, CwEadConfig, PgdConfig, run_attack
from .mnist import AttackGoal, Dataset

ATTACK_NAMES = {"fgm": "FGM", "ifgm": "I-FGM", "pgd": "PGD", "cw": "C&W", "ead": "EAD"}


@dataclass
class EvalRow:
    attack: str
    hyper: dict  # ordered hyperparameter name -> value (None renders as "none")
    targeted: bool
    asr: float
    mean_l1: float | None
    mean_l2: float | None
    mean_linf: float | None
    n: int
    seed: int = 0
    sample_hash: str = ""
    whitebox_successes: int = 0
    # transfer ASR restricted to white-box successes (alternative reading)
    asr_whitebox_only: float | None = None

    def __post_init__(self):
        if not 0 <= self.asr <= 100:
            raise ValueError(f"ASR {self.asr} outside [0, 100]")

    def to_dict(self):
        return asdict(self)


@dataclass
class SweepGrid:
    rows: list[EvalRow]
    outcomes: list[list[AttackOutcome]] = field(default_factory=list, repr=False)

    def __post_init__(self):
        keys = {(r.attack, r.targeted, r.sample_hash, r.seed) for r in self.rows}
        if len(keys) > 1:
            raise ValueError(f"sweep rows disagree on attack/goal/samples/seed: {keys}")


def target_success(target_pred, goals: Sequence[AttackGoal]) -> np.ndarray:
    """Decision-level success on the target: hit ``t`` / leave ``y``."""
    pred = np.asarray(target_pred)
    cls = np.array([g.label for g in goals])
    targeted = np.array([g.targeted for g in goals])
    return np.where(targeted, pred == cls, pred != cls)


def transfer_evaluate(outcomes, target, goals, *, attack="", hyper=None, seed=0, sample_hash="") -> EvalRow:
    """Score crafted examples against ``target``.

    ASR uses every attempted sample as the denominator; distortion means are
    taken over target-fooling examples only and are ``None`` without any.
    """
    outcomes = list(outcomes)
    goals = list(goals)
    if len(outcomes) != len(goals):
        raise ValueError(f"{len(outcomes)} outcomes but {len(goals)} goals")
    if not outcomes:
        raise ValueError("nothing to evaluate")
    modes = {g.targeted for g in goals}
    if len(modes) != 1:
        raise ValueError("mixed targeted and non-targeted goals")
    x = np.stack([o.adversarial for o in outcomes])
    pred = target.predict(x)
    ok = target_success(pred, goals)
    wb = np.array([o.whitebox_success for o in outcomes])
    d = np.array([[o.l1, o.l2, o.linf] for o in outcomes], dtype=np.float64)
    means = d[ok].mean(axis=0) if ok.any() else [None, None, None]
    return EvalRow(
        attack=attack,
        hyper=dict(hyper or {}),
        targeted=modes.pop(),
        asr=100.0 * ok.sum() / len(ok),
        mean_l1=None if means[0] is None else float(means[0]),
        mean_l2=None if means[1] is None else float(means[1]),
        mean_linf=None if means[2] is None else float(means[2]),
        n=len(ok),
        seed=seed,
        sample_hash=sample_hash,
        whitebox_successes=int(wb.sum()),
        asr_whitebox_only=float(100.0 * (ok & wb).sum() / wb.sum()) if wb.any() else None,
    )


# ---------------------------------------------------------------------------
# crafting with optional worker processes


def _craft_chunk(args):
    name, source, x0, goals, kw = args
    return run_attack(name, source, x0, goals, **kw)


def craft(name, source, x0, goals, *, epsilon=None, config=None, seed=0, workers=1, chunks=None):
    """Run attack ``name`` over a batch, optionally split over worker processes.

    Per-example random streams are keyed by the example's index in ``x0``, so
    splitting the batch changes nothing but floating-point summation order.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    goals = list(goals)
    if workers <= 1:
        return list(run_attack(name, source, x0, goals, epsilon=epsilon, config=config, seed=seed))
    parts = np.array_split(np.arange(len(x0)), chunks or workers)
    jobs = [
        (name, source, x0[p], [goals[i] for i in p], dict(epsilon=epsilon, config=config, seed=seed, indices=p))
        for p in parts
        if len(p)
    ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_craft_chunk, jobs))
    return [o for chunk in results for o in chunk]


def evaluate_attack(name, source, target, samples: Dataset, goals, *, hyper=None, epsilon=None, config=None, seed=0, workers=1):
    outcomes = craft(name, source, samples.images, goals, epsilon=epsilon, config=config, seed=seed, workers=workers)
    row = transfer_evaluate(
        outcomes, target, goals, attack=ATTACK_NAMES.get(name, name), hyper=hyper, seed=seed, sample_hash=samples.digest()
    )
    return row, outcomes


def kappa_sweep(source, target, samples, goals, kappas, *, attack="ead", base=CwEadConfig(), seed=0, workers=1) -> SweepGrid:
    rows, outs = [], []
    for k in kappas:
        cfg = replace(base, kappa=float(k), beta=0.0 if attack == "cw" else base.beta)
        row, o = evaluate_attack(attack, source, target, samples, goals, hyper={"confidence": k}, config=cfg, seed=seed, workers=workers)
        rows.append(row)
        outs.append(o)
    return SweepGrid(rows, outs)


def beta_sweep(source, target, samples, goals, betas, kappas=(0.0,), *, base=CwEadConfig(), seed=0, workers=1) -> SweepGrid:
    """EAD over a beta x kappa grid (Table-4 layout: beta outer, kappa inner)."""
    rows, outs = [], []
    for b in betas:
        for k in kappas:
            cfg = replace(base, beta=float(b), kappa=float(k))
            row, o = evaluate_attack("ead", source, target, samples, goals, hyper={"beta": b, "confidence": k}, config=cfg, seed=seed, workers=workers)
            rows.append(row)
            outs.append(o)
    return SweepGrid(rows, outs)


def epsilon_sweep(source, target, samples, goals, epsilons, *, attack="pgd", steps=40, seed=0, workers=1) -> SweepGrid:
    rows, outs = [], []
    for e in epsilons:
        cfg = PgdConfig(float(e), steps, None, random_start=(attack == "pgd"))
        if attack == "fgm":
            row, o = evaluate_attack(attack, source, target, samples, goals, hyper={"epsilon": e}, epsilon=float(e), seed=seed, workers=workers)
        else:
            row, o = evaluate_attack(attack, source, target, samples, goals, hyper={"epsilon": e}, config=cfg, seed=seed, workers=workers)
        rows.append(row)
        outs.append(o)
    return SweepGrid(rows, outs)


# ---------------------------------------------------------------------------
# reports


def fmt_asr(v):
    return "" if v is None else f"{v:.1f}"


def fmt_dist(v):
    return "" if v is None else f"{v:.4g}"


def fmt_hyper(v):
    if v is None:
        return "none"
    if isinstance(v, str):
        return v
    return f"{v:g}"


def _table(rows: Sequence[EvalRow]):
    names = []
    for r in rows:
        for k in r.hyper:
            if k not in names:
                names.append(k)
    if not names:
        names = ["hyperparameter"]
    merged = {}
    for r in rows:
        key = (r.attack,) + tuple(fmt_hyper(r.hyper.get(k)) for k in names)
        merged.setdefault(key, {})["t" if r.targeted else "n"] = r
    header = ["attack"] + names
    for mode in ("targeted", "nontargeted"):
        header += [f"{mode}_asr", f"{mode}_l1", f"{mode}_l2", f"{mode}_linf"]
    body = []
    for key, pair in merged.items():
        line = list(key)
        for mode in ("t", "n"):
            r = pair.get(mode)
            if r is None:
                line += ["", "", "", ""]
            else:
                line += [fmt_asr(r.asr), fmt_dist(r.mean_l1), fmt_dist(r.mean_l2), fmt_dist(r.mean_linf)]
        body.append(line)
    return header, body


def report_table(rows: Sequence[EvalRow], format="csv") -> str:
    """Render rows in the targeted/non-targeted side-by-side layout.

    ASR has one decimal; distortions keep four significant digits.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to report")
    header, body = _table(rows)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(line) + " |" for line in body]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {format!r}")


def rows_from_csv(text: str) -> list[EvalRow]:
    """Parse a report produced by :func:`report_table` back into rows."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    hyper_names = header[1 : header.index("targeted_asr")]

    def num(s):
        return None if s == "" else float(s)

    out = []
    for line in reader:
        hyper = {}
        for k, v in zip(hyper_names, line[1 : 1 + len(hyper_names)]):
            hyper[k] = None if v == "none" else (float(v) if _is_number(v) else v)
        base = 1 + len(hyper_names)
        for i, targeted in ((base, True), (base + 4, False)):
            if line[i] == "":
                continue
            out.append(EvalRow(line[0], hyper, targeted, float(line[i]), num(line[i + 1]), num(line[i + 2]), num(line[i + 3]), n=0))
    return out


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# image grids


def grid_array(images, layout=None, pad=2, pad_value=255) -> np.ndarray:
    """Tile ``28x28`` images (values in [0,1]) into one uint8 image."""
    imgs = [np.asarray(getattr(im, "data", im), dtype=np.float64).reshape(28, 28) for im in images]
    if not imgs:
        raise ValueError("no images")
    for im in imgs:
        if im.min() < 0 or im.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
    rows, cols = layout or (1, len(imgs))
    if rows * cols < len(imgs):
        raise ValueError(f"layout {rows}x{cols} too small for {len(imgs)} images")
    h = rows * 28 + (rows - 1) * pad
    w = cols * 28 + (cols - 1) * pad
    canvas = np.full((h, w), pad_value, dtype=np.uint8)
    for k, im in enumerate(imgs):
        r, c = divmod(k, cols)
        y, x = r * (28 + pad), c * (28 + pad)
        canvas[y : y + 28, x : x + 28] = np.round(255 * im).astype(np.uint8)
    for k in range(len(imgs), rows * cols):
        r, c = divmod(k, cols)
        y, x = r * (28 + pad), c * (28 + pad)
        canvas[y : y + 28, x : x + 28] = pad_value
    return canvas


def pgm_bytes(canvas: np.ndarray) -> bytes:
    h, w = canvas.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(canvas, dtype=np.uint8).tobytes()


def render_grid(images, layout, path, pad=2) -> Path:
    """Write a grayscale grid as binary PGM, or PNG when ``path`` ends in .png."""
    path = Path(path)
    canvas = grid_array(images, layout, pad)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(canvas, mode="L").save(path)
    else:
        path.write_bytes(pgm_bytes(canvas))
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# manifests


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(canonical_json(manifest).encode()).hexdigest()[:16]


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(manifest))
    return path


def outcomes_to_npz(path, outcomes, goals, indices=None):
    """Persist outcomes (images, flags, norms, c) with their goals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "adversarial": np.stack([o.adversarial for o in outcomes]).astype(np.float32),
        "success": np.array([o.whitebox_success for o in outcomes]),
        "norms": np.array([[o.l1, o.l2, o.linf] for o in outcomes], dtype=np.float64),
        "c_used": np.array([math.nan if o.c_used is None else o.c_used for o in outcomes]),
        "true_class": np.array([g.true_class for g in goals]),
        "target": np.array([-1 if g.target is None else g.target for g in goals]),
        "indices": np.asarray(indices if indices is not None else np.arange(len(goals))),
    }
    _savez_stable(path, arrays)
    return path


def _savez_stable(path, arrays):
    """Like ``np.savez`` but with fixed zip timestamps, so equal data gives equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


def outcomes_from_npz(path):
    with np.load(path) as z:
        outs = [
            AttackOutcome(a, bool(s), float(n[0]), float(n[1]), float(n[2]), None if math.isnan(c) else float(c))
            for a, s, n, c in zip(z["adversarial"], z["success"], z["norms"], z["c_used"])
        ]
        goals = [AttackGoal(int(y), None if t < 0 else int(t)) for y, t in zip(z["true_class"], z["target"])]
        return outs, goals, z["indices"].copy()
