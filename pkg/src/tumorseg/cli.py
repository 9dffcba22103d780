"""
Command line entry points: ``synth``, ``train``, ``predict``, ``evaluate``, ``bench``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 data contract, 5 numeric failure.
Every failure prints a single ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import architectures as arch_mod
from . import datapipe as dp
from . import evalmetrics as em
from . import inference as inf
from . import netgraph as ng
from . import trainer as tr
from .kernels import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, message)


def _int_list(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CliError(EXIT_USAGE, f"{what} must be {n} comma-separated integers, got {text!r}")
    if len(vals) != n or min(vals) < 1:
        raise CliError(EXIT_USAGE, f"{what} must be {n} positive comma-separated integers, got {text!r}")
    return vals


def _load_volumes(directory, need_labels: bool) -> list[dp.BrainVolume]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(EXIT_IO, f"{d} is not a directory")
    stems = dp.list_volumes(d)
    if not stems:
        raise CliError(EXIT_IO, f"{d} holds no volume files")
    vols = [dp.load_volume(s) for s in stems]
    if need_labels:
        missing = [v.patient_id or str(s) for v, s in zip(vols, stems) if v.labels is None]
        if missing:
            raise CliError(EXIT_DATA, f"volumes without labels: {', '.join(missing)}")
    return vols


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = _int_list(args.dims, 3, "--dims")
    for i in range(args.count):
        vol = dp.make_phantom(seed=args.seed + i, dims=dims, patient_id=f"phantom-{args.seed + i:04d}")
        dp.save_volume(vol, out / vol.patient_id)
    return EXIT_OK


def _read_config(path) -> tuple[arch_mod.ArchConfig, tr.TrainConfig, tr.TrainConfig, str]:
    """JSON file: TrainConfig fields at top level, plus optional ``arch``,
    ``phase2`` (overrides for the second phase) and ``preset`` keys."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}")
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_IO, f"config {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise CliError(EXIT_IO, f"config {path} must hold a JSON object")
    raw = dict(raw)
    preset = raw.pop("preset", "desk")
    if preset not in ("desk", "paper"):
        raise CliError(EXIT_IO, f"config preset must be 'desk' or 'paper', got {preset!r}")
    arch_over = raw.pop("arch", {})
    phase2_over = raw.pop("phase2", {})
    if preset == "desk":
        base_arch, base1, base2 = arch_mod.DESK_ARCH, tr.DESK_PHASE1, tr.DESK_PHASE2
    else:
        base_arch, base1, base2 = arch_mod.ArchConfig(), tr.TrainConfig(), tr.TrainConfig()
    try:
        arch_cfg = arch_mod.ArchConfig.from_dict({**base_arch.to_dict(), **arch_over})
        cfg1 = tr.TrainConfig.from_dict({**base1.to_dict(), **raw})
        cfg2 = tr.TrainConfig.from_dict({**base2.to_dict(), **raw, **phase2_over})
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_IO, f"invalid config: {exc}")
    return arch_cfg, cfg1, cfg2, preset


def cmd_train(args) -> int:
    try:
        arch = arch_mod.parse_arch_name(args.arch)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))
    if args.phase == "2" and args.init is None:
        raise CliError(EXIT_USAGE, "--phase 2 needs a phase-1 model via --init")
    arch_cfg, cfg1, cfg2, _ = _read_config(args.config)
    if args.seed is not None:
        cfg1 = tr.with_options(cfg1, seed=args.seed)
        cfg2 = tr.with_options(cfg2, seed=args.seed)
    train_vols = [dp.preprocess(v) for v in _load_volumes(args.data, True)]
    val_vols = [dp.preprocess(v) for v in _load_volumes(args.val, True)]
    init = None
    if args.init is not None:
        init = arch_mod.load_segmenter(args.init)
        first_net = arch in arch_mod.CASCADES and init.name == "TwoPathCNN"
        if init.name != arch and not first_net:
            raise CliError(EXIT_USAGE, f"--init holds a {init.name} model, --arch asks for {arch}")
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".train.jsonl")
    log = tr.HistoryLog(log_path)
    model, _ = tr.train_model(arch, train_vols, val_vols, cfg1, arch_cfg, cfg2, args.phase,
                              init=init, log=log)
    arch_mod.save_segmenter(model, args.out, arch_cfg)
    return EXIT_OK


def _label_volume(labels: np.ndarray, patient_id: str, spacing) -> dp.BrainVolume:
    z, y, x = labels.shape
    return dp.BrainVolume(np.zeros((0, z, y, x), dtype=np.float32), labels, patient_id,
                          tuple(spacing), ())


def cmd_predict(args) -> int:
    model = arch_mod.load_segmenter(args.model)
    vol = dp.load_volume(args.input)
    if len(vol.modalities) != 4:
        raise CliError(EXIT_DATA, f"{args.input} has modalities {list(vol.modalities)}; need all four")
    order = [vol.modalities.index(m) for m in dp.MODALITIES]
    vol = dp.BrainVolume(vol.data[order], vol.labels, vol.patient_id, vol.voxel_spacing)
    data = dp.preprocess(vol).data if not args.no_preprocess else vol.data
    labels = inf.predict_volume(model, data)
    if not args.no_postprocess:
        labels = inf.remove_flat_blobs(labels, args.tau)
    dp.save_volume(_label_volume(labels, vol.patient_id, vol.voxel_spacing), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    preds = {s.name: s for s in dp.list_volumes(pred_dir)} if pred_dir.is_dir() else None
    truths = {s.name: s for s in dp.list_volumes(truth_dir)} if truth_dir.is_dir() else None
    if preds is None or truths is None:
        raise CliError(EXIT_IO, "--pred and --truth must be directories of volume files")
    if not preds:
        raise CliError(EXIT_IO, f"{pred_dir} holds no volume files")
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise CliError(EXIT_IO, f"no ground truth for {', '.join(missing)}")
    reports = []
    for name in sorted(preds):
        p, t = dp.load_volume(preds[name]), dp.load_volume(truths[name])
        if p.labels is None or t.labels is None:
            raise CliError(EXIT_DATA, f"{name}: prediction and truth must both carry labels")
        if p.labels.shape != t.labels.shape:
            raise CliError(EXIT_DATA, f"{name}: prediction dims {list(p.dims)} differ from truth "
                                      f"dims {list(t.dims)}")
        reports.append(em.score_labels(p.labels, t.labels, name))
    doc = em.corpus_report(reports)
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if args.csv:
        em.write_summary_csv(reports, args.csv)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = arch_mod.load_segmenter(args.model)
    dims = _int_list(args.dims, 2, "--dims")
    report = inf.bench_inference(model, dims, args.reps, args.threads, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        inf.write_bench_report(report, args.out)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tumorseg", description=__doc__.strip().splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="BLAS/FFT thread cap (default 1)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write synthetic phantom volumes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--dims", default="64,64,64", help="X,Y,Z")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on labeled volumes")
    t.add_argument("--arch", required=True)
    t.add_argument("--data", required=True, help="directory of training volumes")
    t.add_argument("--val", required=True, help="directory of validation volumes")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--phase", choices=("1", "2", "both"), default="both")
    t.add_argument("--init", help="model to continue from (required for --phase 2)")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="JSON-lines history (default <out>.train.jsonl)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="segment one volume")
    r.add_argument("--model", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--no-postprocess", action="store_true")
    r.add_argument("--no-preprocess", action="store_true",
                   help="input is already clipped and standardized")
    r.add_argument("--tau", type=float, default=0.1, help="relative component size threshold")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="time dense against patch-by-patch inference")
    b.add_argument("--model", required=True)
    b.add_argument("--dims", default="64,64", help="H,W")
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def _exit_code(exc: Exception) -> int | None:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, FloatingPointError):
        return EXIT_NUMERIC
    if isinstance(exc, (ng.ModelFileError, OSError)):
        return EXIT_IO
    if isinstance(exc, (dp.VolumeFormatError, ShapeError, em.DimensionMismatch, ValueError)):
        return EXIT_DATA
    return None


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError(EXIT_USAGE, "--threads must be at least 1")
        if getattr(args, "count", 0) < 0:
            raise CliError(EXIT_USAGE, "--count must be non-negative")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        msg = str(exc)
        print(f"error: {msg.splitlines()[0] if msg else type(exc).__name__}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
