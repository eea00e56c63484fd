"""Command-line entry point: gradcheck, shapes, params, bench, pretrain, attnmap.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# component budgets for the residual-network presets (count, relative tolerance)
BUDGETS = {"bam": 2_400_000, "am": 700_000, "ae_total": 3_100_000}
BUDGET_TOLERANCE = 0.30
BACKBONE_TOLERANCE = 0.01

# desk-scale pretraining rate; see the README section on pretraining
PRETRAIN_LR = 3e-3


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    def finish(self):
        self.finished = _now()
        return self

    def comment_lines(self) -> str:
        return "".join(f"# {k}: {json.dumps(v, sort_keys=True) if isinstance(v, dict) else v}\n"
                       for k, v in asdict(self).items())

    def write_sidecar(self, path):
        Path(f"{path}.manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _emit(text: str, manifest: RunManifest, out=None):
    """Write manifest + body to ``out`` (a path) or stdout."""
    body = manifest.finish().comment_lines() + text
    if out:
        Path(out).write_text(body)
    else:
        sys.stdout.write(body)
        sys.stdout.flush()


def _config(args, *keys):
    return {k: getattr(args, k) for k in keys}


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite
    m = RunManifest("gradcheck", _config(args, "scope"), args.seed)
    results, seconds = run_suite(args.scope, args.seed)
    lines = ["op,input-shape,rel-err,pass"] + [r.line() for r in results]
    failed = sorted({r.op for r in results if not r.passed})
    lines.append(f"# checks={len(results)} failed={len(failed)} seconds={seconds:.1f}")
    _emit("\n".join(lines) + "\n", m, args.out)
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# shapes

def _pipeline_config(args, **over):
    from .pipeline import PipelineConfig
    return PipelineConfig(preset=args.preset, seed=args.seed, **over)


def cmd_shapes(args) -> int:
    from .autodiff.tensor import Tensor, no_grad
    from .pipeline import DetectionEncoder, total_positions
    size = args.size_pos if args.size_pos is not None else args.size
    if size is None:
        raise UsageError("an input size is required (positional or --size)")
    if size <= 0 or size % 32:
        raise UsageError(f"input size {size} must be a positive multiple of 32")
    cfg = _pipeline_config(args)
    k = min(cfg.num_queries, total_positions((size, size)))
    m = RunManifest("shapes", {"size": size, "preset": args.preset, "num_queries": k}, args.seed)
    model = DetectionEncoder(cfg)
    model.eval()
    image = Tensor(np.random.default_rng(args.seed).standard_normal((1, 3, size, size)))
    with no_grad():
        result = model(image, num_queries=k)
    _emit(result.trace_text(), m, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# params

def param_table(preset: str, seed: int = 0):
    """Rows (component, count, reference, deviation or None, ok)."""
    from .background import attach_head
    from .backbone import PUBLISHED_COUNTS, canonical_resnet_params
    from .pipeline import DetectionEncoder, PipelineConfig
    model = DetectionEncoder(PipelineConfig(preset=preset, seed=seed))
    report = model.param_report()
    # the classifier borrows the stem; its names must not duplicate parameters
    clf = attach_head(model.bam, model.backbone)
    shared = {id(p) for n, p in clf.named_parameters() if n.startswith("backbone.")}
    model_ids = {id(p): n for n, p in model.named_parameters()}
    dup_ok = all(model_ids.get(i, "").startswith("backbone.") for i in shared)
    budgeted = preset != "toy"
    rows = []
    for comp, count in report.items():
        ref = None
        if comp == "backbone":
            ref = PUBLISHED_COUNTS.get(preset, canonical_resnet_params(model.backbone.preset))
            tol = BACKBONE_TOLERANCE
        elif budgeted and comp in BUDGETS:
            ref, tol = BUDGETS[comp], BUDGET_TOLERANCE
        dev = None if ref is None else (count - ref) / ref
        rows.append((comp, count, ref, dev, dev is None or abs(dev) <= tol))
    rows.append(("shared_stem_unique", len(shared), None, None, dup_ok))
    return rows


def cmd_params(args) -> int:
    m = RunManifest("params", {"preset": args.preset}, args.seed)
    lines = ["component,params,reference,deviation,status"]
    for comp, count, ref, dev, ok in param_table(args.preset, args.seed):
        lines.append(f"{comp},{count},{'' if ref is None else ref},"
                     f"{'' if dev is None else f'{dev:+.3f}'},{'ok' if ok else 'FLAG'}")
    _emit("\n".join(lines) + "\n", m, args.out)
    return EXIT_OK  # deviations are reported with FLAG, not treated as errors


# ---------------------------------------------------------------------------
# bench

def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench(args) -> int:
    from . import bench
    impls = ("window", "full") if args.attention == "both" else (args.attention,)
    sizes = args.sizes
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise UsageError("--sizes must be strictly ascending")
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    for n in sizes:
        if int(np.sqrt(n)) ** 2 != n:
            raise UsageError(f"size {n} is not a perfect square")
    cfg = bench.BenchConfig(repeats=args.repeats, seed=args.seed)
    m = RunManifest("bench", {"attention": args.attention, "sizes": sizes, "repeats": args.repeats,
                              "embed_dim": cfg.embed_dim, "heads": cfg.heads, "window": cfg.window,
                              "machine": bench.machine_note(), "workers": 1}, args.seed)
    lines = ["impl,n,median_seconds"]
    ok = True
    for impl in impls:
        timings, slope = bench.run_bench(impl, sizes, cfg)
        lines += [t.line() for t in timings]
        good = bench.slope_ok(impl, slope)
        ok &= good
        lo, hi = bench.SLOPE_BOUNDS[impl]
        lines.append(f"# fitted_slope[{impl}]={slope:.4f} bounds=[{lo},{hi}] {'ok' if good else 'FLAG'}")
    _emit("\n".join(lines) + "\n", m, args.out)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# pretrain

def build_classifier(preset: str, seed: int):
    from .background import attach_head
    from .pipeline import DetectionEncoder, PipelineConfig
    model = DetectionEncoder(PipelineConfig(preset=preset, seed=seed))
    return model, attach_head(model.bam, model.backbone, np.random.default_rng(seed + 7))


def cmd_pretrain(args) -> int:
    from .autodiff import serialize
    from .pretrain import DatasetError, NonFiniteLossError, TrainConfig, load_directory, synth_corpus, train
    if args.synthetic == (args.dataset is not None):
        raise UsageError("give exactly one of a dataset path or --synthetic")
    if args.patch <= 0 or args.patch % 32:
        raise UsageError(f"--patch {args.patch} must be a positive multiple of 32")
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    lr = PRETRAIN_LR if args.lr is None else args.lr
    cfg = TrainConfig(learning_rate=lr, weight_decay=args.weight_decay, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed)
    if args.synthetic:
        corpus = synth_corpus(args.seed, args.per_class, args.patch)
    else:
        try:
            corpus = load_directory(args.dataset, args.patch)
        except DatasetError as exc:
            raise UsageError(str(exc)) from None
    _, clf = build_classifier(args.preset, args.seed)
    m = RunManifest("pretrain", {**asdict(cfg), "preset": args.preset, "patch": args.patch,
                                 "source": "synthetic" if args.synthetic else str(args.dataset),
                                 "per_class": args.per_class if args.synthetic else None,
                                 "samples": len(corpus)}, args.seed)
    records = []
    try:
        result = train(clf, corpus, cfg, log=records.append)
    except NonFiniteLossError as exc:
        print(f"pretrain aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    weights = out.with_suffix(".aew1")
    serialize.save(clf, weights)
    m.finish().write_sidecar(weights)
    metrics = "epoch,split,loss,accuracy\n" + "".join(r.line() + "\n" for r in records)
    _emit(metrics, m, out.with_suffix(".metrics.csv"))
    print(f"initial_loss={result.initial_loss:.6f}")
    print(f"val_accuracy={result.val.accuracy:.6f}")
    print(f"weights={weights}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# attnmap

def normalize_u8(values: np.ndarray) -> np.ndarray:
    """Per-map min-max to 0..255; an all-equal map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _write_map(prefix, suffix, values, manifest):
    from .imageio import write_pgm_u8
    write_pgm_u8(f"{prefix}_{suffix}.pgm", normalize_u8(values), manifest.comment_lines())
    rows = "".join(",".join(repr(float(x)) for x in row) + "\n" for row in values)
    Path(f"{prefix}_{suffix}.csv").write_text(manifest.comment_lines() + rows)


def load_into(model, state) -> int:
    """Copy every entry of ``state`` whose name exists in ``model``; returns the count."""
    names = {n for n, _ in model.named_parameters()} | {n for n, _ in model.named_buffers()}
    matched = {k: v for k, v in state.items() if k in names}
    try:
        model.load_state_dict(matched, strict=False)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return len(matched)


def cmd_attnmap(args) -> int:
    from .association import window_partition
    from .autodiff import serialize
    from .autodiff.tensor import Tensor, no_grad
    from .imageio import ImageFormatError, read_image, to_rgb
    from .pipeline import DetectionEncoder, PipelineConfig
    try:
        state = serialize.load(args.weights)
        img = to_rgb(read_image(args.image))
    except (OSError, ImageFormatError, serialize.WeightFormatError) as exc:
        raise UsageError(f"cannot read input: {exc}") from None
    h, w = (img.shape[0] // 32) * 32, (img.shape[1] // 32) * 32
    if h == 0 or w == 0:
        raise UsageError(f"image {img.shape[1]}x{img.shape[0]} is smaller than 32x32")
    img = img[:h, :w]
    model = DetectionEncoder(PipelineConfig(preset=args.preset, seed=args.seed))
    loaded = load_into(model, state)
    if loaded == 0:
        raise UsageError(f"{args.weights} holds no parameters for preset {args.preset}")
    model.eval()
    x = img.transpose(2, 0, 1)[None]
    x = (x - x.mean()) / max(float(x.std()), 1e-6)
    m = RunManifest("attnmap", {"weights": str(args.weights), "image": str(args.image), "preset": args.preset,
                                "crop": [h, w], "window_index": args.window_index, "loaded_entries": loaded},
                    args.seed)
    mha = model.am.attn.mha
    mha.keep_attention = True
    with no_grad():
        s1 = model.backbone.stem_forward(Tensor(x))
        fb = model.bam(s1)
        model.am(fb)
    magnitude = np.abs(fb.data[0]).mean(axis=0)
    _, rec, mask = window_partition(fb, model.cfg.window)
    if not 0 <= args.window_index < rec.num_windows:
        raise UsageError(f"--window-index must lie in [0, {rec.num_windows - 1}]")
    attn = mha.last_attention[args.window_index]
    m.finish()
    _write_map(args.out, "fb", magnitude, m)
    _write_map(args.out, "attn", attn, m)
    print(f"fb_map={args.out}_fb.pgm {magnitude.shape[1]}x{magnitude.shape[0]}")
    print(f"attn_map={args.out}_attn.pgm {attn.shape[1]}x{attn.shape[0]} window={args.window_index}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .backbone import PRESETS
    p = argparse.ArgumentParser(prog="assocdetr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, preset=True):
        sp.add_argument("--seed", type=int, default=0)
        if preset:
            sp.add_argument("--preset", choices=sorted(PRESETS), default="toy")
        return sp

    g = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), preset=False)
    g.add_argument("--scope", choices=("ops", "blocks", "pipeline"), default="ops")
    g.add_argument("--out", help="write the report here instead of stdout")
    g.set_defaults(func=cmd_gradcheck)

    s = common(sub.add_parser("shapes", help="print the forward shape trace"))
    s.add_argument("size_pos", nargs="?", type=int, metavar="SIZE")
    s.add_argument("--size", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_shapes)

    pa = common(sub.add_parser("params", help="per-component parameter counts"))
    pa.add_argument("--out")
    pa.set_defaults(func=cmd_params)

    b = common(sub.add_parser("bench", help="window vs full attention scaling"), preset=False)
    b.add_argument("--attention", choices=("window", "full", "both"), default="both")
    b.add_argument("--sizes", type=_int_list, default=[256, 1024, 4096, 16384])
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    t = common(sub.add_parser("pretrain", help="background-classification pretraining"))
    t.add_argument("dataset", nargs="?", help="directory with images/ and labels/")
    t.add_argument("--synthetic", action="store_true")
    t.add_argument("--per-class", type=int, default=50)
    t.add_argument("--patch", type=int, default=96)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=None, help=f"learning rate (default {PRETRAIN_LR})")
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--out", default="pretrain", help="output prefix for .aew1 and .metrics.csv")
    t.set_defaults(func=cmd_pretrain)

    a = common(sub.add_parser("attnmap", help="export F_b magnitude and window attention maps"))
    a.add_argument("--weights", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--window-index", type=int, default=0)
    a.add_argument("--out", default="attnmap", help="output prefix")
    a.set_defaults(func=cmd_attnmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
