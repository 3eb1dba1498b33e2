"""Command-line entry point: ``relmo <command> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import export_pcc_csv, pcc_matrix
from .data import DatasetFormatError, SyntheticConfig, generate_scenes, load_dataset, save_dataset
from .model import CheckpointError, ModelConfig, config_from_dict, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, predict, train, write_log_csv
from .verify import THRESHOLD, run_gradcheck

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configs

_SECTIONS = {"model", "train", "data", "seed"}
_DATA_KEYS = {"path", "scenes", "interaction"}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data_path: str | None
    scenes: int
    interaction: float
    seed: int


def env_seed(default: int = 0) -> int:
    raw = os.environ.get("RELMO_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RELMO_SEED must be an integer, got {raw!r}") from None


def parse_run_config(doc: dict) -> RunConfig:
    """Validate a run document; unknown keys anywhere are rejected."""
    if not isinstance(doc, dict):
        raise UsageError("run config must be a JSON object")
    unknown = set(doc) - _SECTIONS
    if unknown:
        raise UsageError(f"unknown run config keys: {sorted(unknown)}")
    missing = {"model", "train", "data"} - set(doc)
    if missing:
        raise UsageError(f"run config lacks sections: {sorted(missing)}")
    seed = doc["seed"] if "seed" in doc else env_seed()
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise UsageError(f"seed must be a non-negative integer, got {seed!r}")

    try:
        model = config_from_dict(dict(doc["model"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"model section: {exc}") from None

    tdoc = dict(doc["train"])
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
    unknown = set(tdoc) - train_keys
    if unknown:
        raise UsageError(f"unknown train config keys: {sorted(unknown)} (the seed is a top-level key)")
    try:
        tcfg = TrainConfig(seed=seed, **tdoc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train section: {exc}") from None

    ddoc = dict(doc["data"])
    unknown = set(ddoc) - _DATA_KEYS
    if unknown:
        raise UsageError(f"unknown data config keys: {sorted(unknown)}")
    if ("path" in ddoc) == ("scenes" in ddoc):
        raise UsageError("data section needs exactly one of 'path' or 'scenes'")
    scenes = int(ddoc.get("scenes", 0))
    if "scenes" in ddoc and scenes < 1:
        raise UsageError("data.scenes must be >= 1")
    interaction = float(ddoc.get("interaction", 0.0))
    if not interaction >= 0:
        raise UsageError("data.interaction must be >= 0")
    return RunConfig(model, tcfg, ddoc.get("path"), scenes, interaction, seed)


def read_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(doc)


# ---------------------------------------------------------------------------
# helpers


def _load_scenes(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset not found: {path}") from None
    except (OSError, DatasetFormatError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def _check_dims(scenes, config: ModelConfig) -> None:
    s = scenes[0]
    want = (config.N, config.T, config.P, config.J)
    if s.dims != want:
        raise DataError(f"dimension mismatch: data has (N, T, P, J) = {s.dims}, model expects {want}")


def _horizons(raw: str | None, p: int) -> list[int]:
    if raw is None:
        return list(range(1, p + 1))
    try:
        hs = [int(h) for h in raw.split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"--horizons must be comma-separated integers, got {raw!r}") from None
    if not hs or any(not 1 <= h <= p for h in hs):
        raise UsageError(f"horizons must lie in 1..{p}")
    return hs


def _positive(name):
    def conv(raw):
        try:
            v = int(raw)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1")
        return v

    return conv


def _nonneg_float(raw):
    try:
        v = float(raw)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError("expected a finite number >= 0")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    seed = env_seed() if args.seed is None else args.seed
    try:
        cfg = SyntheticConfig(
            N=args.persons,
            T=args.frames_obs,
            P=args.frames_pred,
            J=args.joints,
            seed=seed,
            interaction_strength=args.interaction,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    scenes = generate_scenes(args.scenes, cfg)
    try:
        size = save_dataset(scenes, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(scenes)} scenes N={cfg.N} T={cfg.T} P={cfg.P} J={cfg.J} ({size} bytes) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = read_run_config(args.config)
    if run.data_path is not None:
        scenes = _load_scenes(run.data_path)
    else:
        m = run.model
        scenes = generate_scenes(
            run.scenes, SyntheticConfig(N=m.N, T=m.T, P=m.P, J=m.J, seed=run.seed, interaction_strength=run.interaction)
        )
    _check_dims(scenes, run.model)
    state = train(scenes, run.model, run.train)
    try:
        save_checkpoint(args.out_checkpoint, state.params, run.model)
        if args.log:
            write_log_csv(state.epoch_log, args.log)
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from None
    last = state.epoch_log[-1]
    print(f"trained {state.step} steps over {len(state.epoch_log)} epochs; final MPJPE {last['mpjpe']!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data)
    _check_dims(scenes, config)
    res = evaluate(scenes, params, config, _horizons(args.horizons, config.P))
    print("metric,horizon,value")
    for line in res["vim"].csv_rows() + res["mpjpe_report"].csv_rows():
        print(line)
    return EXIT_OK


PREDICT_FIELDS = ("scene", "person", "frame", "joint", "x", "y", "z")


def cmd_predict(args) -> int:
    params, config = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data)
    _check_dims(scenes, config)
    preds = predict(scenes, params, config)
    try:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PREDICT_FIELDS)
            for idx in np.ndindex(preds.shape[:4]):
                w.writerow([*idx[:2], idx[2] + 1, idx[3], *(repr(float(c)) for c in preds[idx])])
    except OSError as exc:
        raise DataError(f"cannot write {args.out_csv}: {exc}") from None
    print(f"wrote {int(np.prod(preds.shape[:4]))} rows to {args.out_csv}")
    return EXIT_OK


def read_predictions(path, shape: Sequence[int]) -> np.ndarray:
    """Rebuild the ``(S, N, P, J, 3)`` array written by ``predict``."""
    out = np.full(tuple(shape), np.nan)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            idx = (int(row["scene"]), int(row["person"]), int(row["frame"]) - 1, int(row["joint"]))
            out[idx] = [float(row[k]) for k in "xyz"]
    return out


def cmd_pcc(args) -> int:
    scenes = _load_scenes(args.data)
    if not 0 <= args.scene < len(scenes):
        raise UsageError(f"--scene {args.scene} out of range 0..{len(scenes) - 1}")
    scene = scenes[args.scene]
    for flag, p in (("--person-a", args.person_a), ("--person-b", args.person_b)):
        if not 0 <= p < scene.N:
            raise UsageError(f"{flag} {p} out of range 0..{scene.N - 1}")
    m = pcc_matrix(scene, args.person_a, args.person_b)
    try:
        export_pcc_csv(m, args.out_csv)
    except OSError as exc:
        raise DataError(f"cannot write {args.out_csv}: {exc}") from None
    print(f"mean |pcc| {m.mean_abs()!r}; {int(m.degenerate.sum())} degenerate entries; wrote {args.out_csv}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = ModelConfig.toy() if args.config is None else read_run_config(args.config).model
    if config.dropout > 0:
        raise UsageError(f"gradient check refuses dropout {config.dropout}: set model.dropout to 0")
    seed = env_seed() if args.seed is None else args.seed
    report = run_gradcheck(config, seed)
    for name, err in report.ops.items():
        print(f"op {name}: max relative error {err:.3e}")
    for name, err in report.modules().items():
        print(f"module {name}: max relative error {err:.3e}")
    print(f"checked {len(report.params)} parameter tensors in {report.seconds:.1f} s")
    bad = report.failures(THRESHOLD)
    if bad:
        for what, err in bad:
            print(f"FAIL {what}: {err:.3e} >= {THRESHOLD:g}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"PASS max relative error {report.max_error:.3e} < {THRESHOLD:g}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="relmo", description="Multi-person motion prediction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic .mmp dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=_positive("--scenes"), default=8)
    g.add_argument("--persons", type=_positive("--persons"), default=2)
    g.add_argument("--frames-obs", type=_positive("--frames-obs"), default=15)
    g.add_argument("--frames-pred", type=_positive("--frames-pred"), default=15)
    g.add_argument("--joints", type=_positive("--joints"), default=15)
    g.add_argument("--seed", type=int, default=None, help="default: $RELMO_SEED or 0")
    g.add_argument("--interaction", type=_nonneg_float, default=0.0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--log", default=None, help="per-epoch CSV log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="print VIM and MPJPE per horizon")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizons", default=None, help="comma-separated frames, default all")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write predicted coordinates as CSV")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out-csv", required=True)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("pcc", help="joint-to-joint correlation of two persons")
    c.add_argument("--data", required=True)
    c.add_argument("--scene", type=int, default=0)
    c.add_argument("--person-a", type=int, default=0)
    c.add_argument("--person-b", type=int, default=1)
    c.add_argument("--out-csv", required=True)
    c.set_defaults(func=cmd_pcc)

    k = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    k.add_argument("--seed", type=int, default=None)
    k.add_argument("--config", default=None, help="run config whose model section is checked")
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
