"""Command-line interface: synth, train, eval, predict, verify, bench.

Global flags: --config (key = value file, '#' comments, unknown keys are
hard errors), --seed, --threads, --out. Flags override config-file values.
Stdout carries data (TSV); stderr carries diagnostics. Exit codes:
0 success, 1 usage error, 2 data error, 3 numeric error, 4 failed
verification check.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace

import numpy as np

from . import model as M
from . import numerics
from . import train as T
from . import verify as V
from .errors import (
    DgtnError,
    InvalidConfig,
    IoError,
    NonFinite,
    ParseError,
    Singular,
    NonContiguousIndex,
    UnknownResidue,
    WtMismatch,
    EmptyDataset,
    EmptyBatch,
)
from .protein_io import (
    MutationRecord,
    Structure,
    SyntheticSpec,
    load_mutation_dataset,
    parse_structure,
    serialize_mutation_dataset,
    serialize_structure,
    synthesize_dataset,
)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

_DATA_ERRORS = (
    ParseError,
    NonContiguousIndex,
    UnknownResidue,
    WtMismatch,
    EmptyDataset,
    EmptyBatch,
    IoError,
    FileNotFoundError,
    NotADirectoryError,
)
_NUMERIC_ERRORS = (Singular, NonFinite)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_TRAIN_KEYS = {f.name for f in fields(T.TrainConfig)}


def _split_config(items: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    model_items, train_items = {}, {}
    for key, val in items.items():
        if key.startswith("train."):
            sub = key[len("train."):]
            if sub not in _TRAIN_KEYS:
                raise InvalidConfig(f"unknown config key {key!r}")
            train_items[sub] = val
        else:
            model_items[key] = val
    return model_items, train_items


def _load_configs(args) -> tuple[M.ModelConfig, T.TrainConfig]:
    model_items: dict[str, str] = {}
    train_items: dict[str, str] = {}
    if getattr(args, "config", None):
        with open(_require_path(args.config), encoding="utf-8") as fh:
            model_items, train_items = _split_config(M.parse_config_lines(fh.read()))
    model_cfg = M.config_from_mapping(model_items)
    train_kwargs = {k: M._parse_value(v) for k, v in train_items.items()}

    overrides = {
        "lr": "lr", "epochs": "max_epochs", "batch": "batch_size",
        "patience": "patience", "weight_decay": "weight_decay",
    }
    for flag, dest in overrides.items():
        if getattr(args, flag, None) is not None:
            train_kwargs[dest] = getattr(args, flag)
    if getattr(args, "seed", None) is not None:
        model_cfg = replace(model_cfg, seed=args.seed)
        train_kwargs["seed"] = args.seed
    if "patience" not in train_kwargs:
        epochs = train_kwargs.get("max_epochs", T.TrainConfig.max_epochs)
        default_patience = T.TrainConfig.patience
        if default_patience > epochs:
            train_kwargs["patience"] = epochs
    return model_cfg, T.TrainConfig(**train_kwargs)


def _require_path(path: str) -> str:
    if not os.path.exists(path):
        raise UsageError(f"path does not exist: {path}")
    return path


def _load_structures(directory: str) -> dict[str, Structure]:
    structures = {}
    for name in sorted(os.listdir(_require_path(directory))):
        if name.endswith(".dgs"):
            with open(os.path.join(directory, name), encoding="utf-8") as fh:
                structures[name[:-4]] = parse_structure(fh.read())
    if not structures:
        raise EmptyDataset(f"no .dgs files in {directory}")
    return structures


def _load_records(path: str, structures) -> list[MutationRecord]:
    with open(_require_path(path), encoding="utf-8") as fh:
        return load_mutation_dataset(fh.read(), structures)


def _predict(records, structures, params, cfg, threads: int) -> np.ndarray:
    if threads <= 1:
        return M.predict_batch(records, structures, params, cfg)
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.structure_id, []).append(i)
    out = np.empty(len(records))

    def run(sid):
        idx = groups[sid]
        preds = M.predict_batch([records[i] for i in idx], structures, params, cfg)
        return idx, preds

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for idx, preds in pool.map(run, sorted(groups)):
            out[idx] = preds
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        seed=args.seed if args.seed is not None else 0,
        n_samples=args.n * args.muts,
        l_range=(args.len, args.len),
        coupling_weight=args.coupling,
        noise_sd=args.noise,
        muts_per_structure=args.muts,
    )
    structures, records = synthesize_dataset(spec)
    os.makedirs(args.out, exist_ok=True)
    for sid in sorted(structures):
        path = os.path.join(args.out, f"{sid}.dgs")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(serialize_structure(structures[sid]))
        print(f"wrote\t{path}")
    data_path = os.path.join(args.out, "dataset.dgm")
    with open(data_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_mutation_dataset(records))
    print(f"wrote\t{data_path}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args)
    structures = _load_structures(args.structures)
    records = _load_records(args.data, structures)
    result = T.train(records, structures, model_cfg, train_cfg, stream=sys.stdout)
    out = args.out or "model.dgt"
    M.save_checkpoint(out, result.params, model_cfg)
    print(f"checkpoint\t{out}\tbest_epoch\t{result.best_epoch}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    params, cfg = M.load_checkpoint(_require_path(args.checkpoint))
    structures = _load_structures(args.structures)
    records = _load_records(args.data, structures)
    if any(r.ddg is None for r in records):
        raise EmptyDataset("eval requires ddg targets on every record")
    preds = _predict(records, structures, params, cfg, args.threads)
    metrics = T.metrics_from(preds, np.array([r.ddg for r in records]))
    print(metrics.line())
    return 0


def cmd_predict(args) -> int:
    params, cfg = M.load_checkpoint(_require_path(args.checkpoint))
    structures = _load_structures(args.structures)
    records = _load_records(args.data, structures)
    preds = _predict(records, structures, params, cfg, args.threads)
    sink = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    try:
        for r, p in zip(records, preds):
            sink.write(f"{r.structure_id}\t{r.position}\t{r.wt}\t{r.mut}\t{float(p)!r}\n")
    finally:
        if args.out:
            sink.close()
    return 0


def cmd_verify(args) -> int:
    if args.trials <= 0:
        raise UsageError("--trials must be positive")
    seed = args.seed if args.seed is not None else 0
    results = []
    if args.beta is not None:
        # targeted probe: one fixed-point solve at the requested contraction
        rng = np.random.default_rng(seed)
        s_norm = V.random_affinity_graph(8, rng)
        lam, _ = numerics.spectral_radius(s_norm, iters=5000, tol=1e-13)
        if args.force_spectral is not None:
            s_norm = s_norm * (args.force_spectral / lam)
            lam = args.force_spectral
        a0 = numerics.softmax_rows(rng.standard_normal((8, 8)))
        if args.beta * lam > 0.95:
            results.append(
                V.CheckResult(
                    "fixed_point_probe", True, 0.0, 0.0, skipped=True,
                    detail=f"beta*lambda_max = {args.beta * lam:.4f} leaves no contraction margin",
                )
            )
        else:
            try:
                star = V.attention_fixed_point(a0, s_norm, args.beta)
                resid = numerics.frobenius(
                    star - ((1 - args.beta) * a0 + args.beta * s_norm @ star)
                )
                results.append(V.CheckResult("fixed_point_probe", resid < 1e-9, resid, 1e-9))
            except Singular as e:
                results.append(
                    V.CheckResult("fixed_point_probe", True, 0.0, 0.0, skipped=True,
                                  detail=f"singular system: {e}")
                )
    else:
        results = V.run_all(trials=args.trials, seed=seed,
                            include_gradcheck=not args.skip_gradcheck)
    failed = False
    for r in results:
        print(r.line())
        failed = failed or (not r.passed and not r.skipped)
    return EXIT_VERIFY if failed else 0


def cmd_bench(args) -> int:
    seed = args.seed if args.seed is not None else 0
    spec = SyntheticSpec(seed=seed, n_samples=1, l_range=(args.len, args.len),
                         muts_per_structure=1)
    structures, records = synthesize_dataset(spec)
    sid = records[0].structure_id
    st = structures[sid]
    base = M.ModelConfig()
    for steps in (1, 3, 5, 7, 10):
        cfg = replace(base, diffusion=replace(base.diffusion, steps=steps))
        params = M.init_params(cfg)
        cache = M.build_cache(st, cfg)
        M.forward(st, st.seq, records[0], params, cfg, cache=cache)  # warm-up
        best = np.inf
        for _ in range(args.reps):
            t0 = time.perf_counter()
            M.forward(st, st.seq, records[0], params, cfg, cache=cache)
            best = min(best, time.perf_counter() - t0)
        print(f"{steps}\t{best * 1e3:.3g}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dgtn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=None)

    p = sub.add_parser("synth", help="write synthetic .dgs structures and a .dgm dataset")
    common(p)
    p.add_argument("--n", type=int, required=True, help="number of structures")
    p.add_argument("--len", type=int, required=True, help="residues per structure")
    p.add_argument("--muts", type=int, default=16, help="mutations per structure")
    p.add_argument("--coupling", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)

    p = sub.add_parser("train", help="train and write a .dgt checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--structures", required=True)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)

    for name in ("eval", "predict"):
        p = sub.add_parser(name, help=f"{name} a dataset against a checkpoint")
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--structures", required=True)
        p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("verify", help="run the theory verification suites")
    common(p)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--force-spectral", dest="force_spectral", type=float, default=None)
    p.add_argument("--skip-gradcheck", dest="skip_gradcheck", action="store_true")

    p = sub.add_parser("bench", help="time one forward pass per diffusion step count")
    common(p)
    p.add_argument("--len", type=int, default=48)
    p.add_argument("--reps", type=int, default=5)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "synth" and args.out is None:
            raise UsageError("synth requires --out")
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidConfig as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DgtnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
