"""Command-line entry point.

Exit codes: 0 success, 2 argument or configuration error, 3 data error
(dataset or checkpoint files), 4 failed self-check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .codec import AnnotationError
from .config import ConfigError, RunConfig, load_config
from .experiments import crossval, dumps, fold_indices, fracstudy, make_checkpoint, network_from_checkpoint, run_fold
from .io import CheckpointError, DataError, load_checkpoint, read_dataset, save_checkpoint, write_sample
from .network import ConfigError as NetworkConfigError
from .network import count_params_flops
from .selfcheck import gradcheck_suite, roundtrip_check
from .synth import SynthConfig, SynthConfigError, generate_sample
from .training import evaluate_samples

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SELFCHECK = 0, 2, 3, 4

log = logging.getLogger("ccfnet")


class UsageError(Exception):
    pass


def _fracs(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from exc
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("fractions must lie in (0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccfnet", description="Coarse-to-fine spine localization and classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--spacing", type=float, default=0.5)
    s.add_argument("--disease-rate", type=float, default=0.3)

    t = sub.add_parser("train", help="train one fold and write a checkpoint")
    t.add_argument("--config", type=Path)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--train-frac", type=float)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a fold's validation split")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--fold", type=int, default=0)
    e.add_argument("--radius-mm", type=float, default=6.0)
    e.add_argument("--json", action="store_true")

    c = sub.add_parser("crossval", help="k-fold cross-validation")
    c.add_argument("--config", type=Path)
    c.add_argument("--data", type=Path, required=True)
    c.add_argument("--folds", type=int)
    c.add_argument("--json", action="store_true")

    f = sub.add_parser("fracstudy", help="score versus training-set fraction")
    f.add_argument("--config", type=Path)
    f.add_argument("--data", type=Path, required=True)
    f.add_argument("--fracs", type=_fracs, default=[0.25, 0.5, 0.75, 1.0])
    f.add_argument("--fold", type=int, default=0)
    f.add_argument("--json", action="store_true")

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable operation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=1)
    g.add_argument("--quick", action="store_true", help="sample coordinates instead of checking all of them")

    r = sub.add_parser("roundtrip", help="encode/decode round trip on random annotations")
    r.add_argument("--n", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)

    n = sub.add_parser("count", help="parameter and FLOP count of the configured network")
    n.add_argument("--config", type=Path)
    n.add_argument("--json", action="store_true")
    return p


def _load(path: Optional[Path]) -> RunConfig:
    if path is not None and not path.is_file():
        raise UsageError(f"config file {path} not found")
    return load_config(path)


def _emit(payload: dict, as_json: bool, out) -> None:
    if as_json:
        out.write(dumps(payload) + "\n")
        return
    for key, value in payload.items():
        out.write(f"{key}: {value}\n")


def cmd_synth(a, out) -> int:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = SynthConfig(image_size=a.size, spacing_mm=a.spacing, disease_rate=a.disease_rate, global_seed=a.seed)
    cfg.validate()
    for i in range(a.n):
        write_sample(a.out, generate_sample(cfg, i))
    out.write(f"wrote {a.n} samples to {a.out}\n")
    return EXIT_OK


def cmd_train(a, out) -> int:
    cfg = _load(a.config)
    data = read_dataset(a.data)
    fr = run_fold(cfg, data, a.fold, train_frac=a.train_frac, run_dir=a.out.parent / f"{a.out.stem}.run")
    a.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(a.out, make_checkpoint(cfg, fr.result, best=True))
    save_checkpoint(a.out.with_name(f"{a.out.stem}.final{a.out.suffix}"), make_checkpoint(cfg, fr.result, best=False))
    out.write(f"best epoch {fr.result.best_epoch}, validation score {fr.report.score}\n")
    return EXIT_OK


def cmd_eval(a, out) -> int:
    net, cfg = network_from_checkpoint(load_checkpoint(a.ckpt))
    data = read_dataset(a.data)
    _, val_idx = fold_indices(cfg, len(data), a.fold)
    report = evaluate_samples(net, [data[i] for i in val_idx], cfg.train.grid, a.radius_mm)
    payload = {k: getattr(report, k) for k in ("recall_disc", "recall_vertebra", "auc_disc", "auc_vertebra", "score")}
    _emit(payload, a.json, out)
    return EXIT_OK


def cmd_crossval(a, out) -> int:
    cfg = _load(a.config)
    if a.folds is not None:
        cfg.folds = a.folds
        cfg.validate()
    _emit(crossval(cfg, read_dataset(a.data)), a.json, out)
    return EXIT_OK


def cmd_fracstudy(a, out) -> int:
    cfg = _load(a.config)
    _emit(fracstudy(cfg, read_dataset(a.data), a.fracs, a.fold), a.json, out)
    return EXIT_OK


def cmd_gradcheck(a, out) -> int:
    if a.trials < 1:
        raise UsageError("--trials must be >= 1")
    worst: dict[str, float] = {}
    ok: dict[str, bool] = {}
    for trial in range(a.trials):
        for name, rep in gradcheck_suite(a.seed + trial, quick=a.quick).items():
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            ok[name] = ok.get(name, True) and rep.passed
    width = max(map(len, worst))
    for name in worst:
        out.write(f"{name:<{width}}  max_rel_error {worst[name]:.3e}  {'ok' if ok[name] else 'FAIL'}\n")
    return EXIT_OK if all(ok.values()) else EXIT_SELFCHECK


def cmd_roundtrip(a, out) -> int:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    rep = roundtrip_check(a.n, a.seed)
    out.write(
        f"n {rep.n}  max coordinate error {rep.max_error_px:.3e} px  categories "
        f"{'exact' if rep.categories_exact else 'MISMATCH'}  {rep.seconds:.3f} s\n"
    )
    return EXIT_OK if rep.passed else EXIT_SELFCHECK


def cmd_count(a, out) -> int:
    cfg = _load(a.config)
    grid = cfg.train.grid
    counts = count_params_flops(cfg.train.encoder, (grid.image_h, grid.image_w))
    _emit({"use_msc": cfg.train.encoder.use_msc, **counts}, a.json, out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "fracstudy": cmd_fracstudy,
    "gradcheck": cmd_gradcheck,
    "roundtrip": cmd_roundtrip,
    "count": cmd_count,
}


def main(argv: Optional[Sequence[str]] = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:  # argparse has already printed usage to stderr
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=err, format="%(message)s")
    try:
        return COMMANDS[a.command](a, out)
    except (UsageError, ConfigError, NetworkConfigError, SynthConfigError) as exc:
        err.write(f"{parser.prog} {a.command}: error: {exc}\n")
        parser.print_usage(err)
        return EXIT_USAGE
    except (DataError, CheckpointError, AnnotationError, FileNotFoundError, json.JSONDecodeError) as exc:
        err.write(f"{parser.prog} {a.command}: data error: {exc}\n")
        return EXIT_DATA
    except ValueError as exc:
        # Remaining value errors come from argument values (fold index, fractions).
        err.write(f"{parser.prog} {a.command}: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
