"""Command-line entry point (``eclipse`` / ``python -m eclipse``).

Results go to stdout or ``--out`` as JSON, diagnostics go to stderr as JSON
lines.  Exit codes: 0 success (a failed verification is still a success, the
outcome is in the JSON), 1 the requested transform is not applicable, 2 I/O or
file-format error, 64 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext

from . import detect as detect_mod
from . import fixtures, pipeline, watermark
from .container import load_model, save_model
from .errors import EclipseError, FormatError
from .model import ConvLayer, LinearLayer, equivalence_report, infer_shapes
from .obf_conv import FrameSpec, NoiseConfig

EXIT_OK, EXIT_FAILED, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64

log = logging.getLogger("eclipse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _JsonLines(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "msg": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def _info(msg, **fields):
    log.info(msg, extra={"fields": fields})


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(obj, out):
    text = _dumps(obj)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# validation helpers


def _input_path(path):
    if not path:
        raise UsageError("empty input path")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _output_path(path, inputs=()):
    if path is None:
        return None
    if not path:
        raise UsageError("empty output path")
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    if os.path.exists(path) and any(os.path.samefile(src, path) for src in inputs):
        raise UsageError(f"refusing to overwrite input file {path}")
    return path


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _frame(text):
    vals = _int_list(text)
    if len(vals) == 1:
        vals = vals * 4
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("frame takes 1 or 4 comma-separated widths (top,bottom,left,right)")
    return FrameSpec(*vals)


def _probes(model, count, seed, task_seed=None):
    if task_seed is None:
        return fixtures.probe_batch(model, count, seed)
    c, hw, _ = model.input_shape
    x, _ = fixtures.toy_task(task_seed, hw).sample(count, seed)
    return x


# --------------------------------------------------------------------------
# commands


def cmd_gen_fixture(args):
    out = _output_path(args.out)
    if args.kind == "mlp":
        dims = tuple(args.dims) if args.dims else fixtures.MLP_DIMS
        model = fixtures.random_mlp(args.seed, dims)
    else:
        model = fixtures.toy_cnn(args.seed)
    model = dataclasses.replace(model, dtype_tag=args.dtype)
    result = {"kind": args.kind, "seed": args.seed, "layers": len(model.layers)}
    if args.watermark:
        key_out = _output_path(args.key_out)
        if key_out is None:
            raise UsageError("--watermark needs --key-out")
        key = watermark.make_key(model, args.watermark, args.layer, args.bits, seed=args.seed)
        msg = watermark.random_message(args.bits, args.seed + 1)
        res = watermark.embed(model, key, msg)
        model = res.model
        watermark.save_key(key, key_out, msg)
        result["watermark"] = {"scheme": args.watermark, "layer": args.layer, "bits": args.bits,
                               "similarity": res.similarity, "steps": res.steps_run}
    save_model(model, out)
    _info("fixture written", path=out)
    _emit(result, args.json_out)


def cmd_inspect(args):
    model = load_model(_input_path(args.model))
    shapes = infer_shapes(model)
    rows = []
    prev = model.input_shape
    for i, (layer, shape) in enumerate(zip(model.layers, shapes)):
        if isinstance(layer, LinearLayer):
            params, detail = layer.weights.size + layer.bias.size, f"{layer.in_dim}x{layer.out_dim}"
        elif isinstance(layer, ConvLayer):
            params = layer.kernel.size + layer.bias.size
            detail = "x".join(map(str, layer.kernel.shape)) + f" pad={list(layer.padding)} stride={list(layer.stride)}"
        else:
            params, detail = 0, f"size={layer.size} stride={layer.stride}"
        act = getattr(layer, "activation", None)
        rows.append({"index": i, "kind": layer.kind, "detail": detail, "activation": act.value if act else "-",
                     "input": list(prev), "output": list(shape), "params": int(params)})
        prev = shape
    if args.json:
        _emit({"input_shape": list(model.input_shape), "dtype": model.dtype_tag, "layers": rows}, None)
        return
    for r in rows:
        print(f"{r['index']:>3}  {r['kind']:<8} {r['detail']:<32} {r['activation']:<9} "
              f"{str(tuple(r['input'])):<16} -> {str(tuple(r['output'])):<16} {r['params']:>9}")


def cmd_detect(args):
    model = load_model(_input_path(args.model))
    out = _output_path(args.out)
    result = detect_mod.detect_watermarked_layers(model, args.window, args.quantile, args.trim)
    _emit(result.to_dict(), out)


def cmd_obfuscate(args):
    src = _input_path(args.model)
    out = _output_path(args.out, [src])
    log_out = _output_path(args.log_out, [src])
    model = load_model(src)
    detection = args.targets
    if args.detect:
        detection = detect_mod.detect_watermarked_layers(model).flagged
    noise = NoiseConfig(args.beta, args.mu, args.sigma, args.noise_mode)
    result, transform_log = pipeline.run(
        model, detection, args.mode, args.seed, h=args.h, frame=args.frame, noise=noise,
        lambda_range=(args.lambda_min, args.lambda_max), relu_camouflage=args.camouflage,
    )
    save_model(result, out)
    doc = {"mode": args.mode, "seed": args.seed, "targets": sorted({e["target"] for e in transform_log}),
           "layers_before": len(model.layers), "layers_after": len(result.layers), "log": transform_log}
    _info("obfuscated", path=out, layers=len(result.layers))
    _emit(doc, log_out)


def cmd_embed(args):
    src = _input_path(args.model)
    out = _output_path(args.out, [src])
    key_out = _output_path(args.key_out, [src])
    model = load_model(src)
    key = watermark.make_key(model, args.scheme, args.layer, args.bits, seed=args.seed,
                             n_probes=args.probes, threshold=args.delta)
    msg = watermark.random_message(args.bits, args.seed + 1)
    res = watermark.embed(model, key, msg, steps=args.steps, rate=args.rate, penalty=args.penalty)
    save_model(res.model, out)
    watermark.save_key(key, key_out, msg)
    _emit({"scheme": key.scheme.value, "layer": key.layer_index, "bits": key.n_bits, "similarity": res.similarity,
           "max_abs_delta": res.max_abs_delta, "steps": res.steps_run}, args.json_out)


def cmd_verify(args):
    model = load_model(_input_path(args.model))
    key, msg = watermark.load_key(_input_path(args.key))
    out = _output_path(args.out)
    if msg is None:
        raise FormatError("key file carries no owner message", 0)
    delta = args.delta
    if args.active:
        best, trace = watermark.active_verify(model, key, msg, delta)
        doc = {**best.to_dict(), "verifier": "active", "trace": trace}
    else:
        doc = {**watermark.verify(model, key, msg, delta).to_dict(), "verifier": "passive"}
    doc.update(scheme=key.scheme.value, layer=key.layer_index)
    _emit(doc, out)


def cmd_equiv(args):
    a = load_model(_input_path(args.model_a))
    b = load_model(_input_path(args.model_b))
    out = _output_path(args.out)
    probes = _probes(a, args.probes, args.seed, args.task_seed)
    _emit(equivalence_report(a, b, probes).to_dict(), out)


def cmd_bench(args):
    a = load_model(_input_path(args.model_a))
    b = load_model(_input_path(args.model_b))
    out = _output_path(args.out)
    probes = _probes(a, args.probes, args.seed, args.task_seed)
    _emit(pipeline.runtime_ratio(a, b, probes, args.runs), out)


def cmd_report(args):
    a = load_model(_input_path(args.original))
    b = load_model(_input_path(args.obfuscated))
    out = _output_path(args.out)
    keys = []
    for path in args.key:
        key, msg = watermark.load_key(_input_path(path))
        if msg is None:
            raise FormatError(f"key file {path} carries no owner message", 0)
        keys.append(pipeline.MarkedKey(key, msg, os.path.basename(path)))
    probes = _probes(a, args.probes, args.seed, args.task_seed)
    _emit(pipeline.attack_report(a, b, keys, probes, args.delta, timing_runs=args.timing_runs), out)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eclipse", description="White-box watermark obfuscation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr as JSON lines")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-fixture", help="write a seeded random model, optionally watermarked")
    g.add_argument("--kind", choices=("mlp", "cnn"), default="mlp")
    g.add_argument("--dims", type=_int_list, help="MLP layer widths, e.g. 64,128,10")
    g.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--watermark", choices=[s.value for s in watermark.Scheme])
    g.add_argument("--layer", type=int, default=0, help="layer to watermark")
    g.add_argument("--bits", type=int, default=256)
    g.add_argument("--key-out")
    g.add_argument("--json-out")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_fixture)

    i = sub.add_parser("inspect", help="print one row per layer")
    i.add_argument("model")
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    d = sub.add_parser("detect", help="score layers by spectral SMA volatility")
    d.add_argument("model")
    d.add_argument("--window", type=int, default=detect_mod.DEFAULT_WINDOW, help="SMA window r")
    d.add_argument("--quantile", type=float, default=detect_mod.DEFAULT_QUANTILE, help="flagging quantile q")
    d.add_argument("--trim", type=float, default=detect_mod.DEFAULT_TRIM, help="spectrum fraction cut at each end")
    d.add_argument("--out")
    d.set_defaults(func=cmd_detect)

    o = sub.add_parser("obfuscate", help="rewrite target layers (all weighted layers by default)")
    o.add_argument("model")
    o.add_argument("--mode", choices=("base", "advanced"), default="base")
    o.add_argument("--seed", type=int, required=True)
    sel = o.add_mutually_exclusive_group()
    sel.add_argument("--targets", type=_int_list, help="comma-separated layer indices")
    sel.add_argument("--detect", action="store_true", help="target the layers the detector flags")
    o.add_argument("--h", type=int, help="identity-pair width (default 2n)")
    o.add_argument("--frame", type=_frame, default=FrameSpec(), help="kernel frame widths")
    o.add_argument("--beta", type=float, default=10.0)
    o.add_argument("--mu", type=float, default=0.33)
    o.add_argument("--sigma", type=float, default=0.1)
    o.add_argument("--noise-mode", choices=("min", "median"), default="min")
    o.add_argument("--lambda-min", type=float, default=0.5)
    o.add_argument("--lambda-max", type=float, default=2.0)
    o.add_argument("--camouflage", action="store_true", help="ReLU camouflage on split linear layers")
    o.add_argument("--out", required=True)
    o.add_argument("--log-out", help="transform log (stdout if omitted)")
    o.set_defaults(func=cmd_obfuscate)

    e = sub.add_parser("embed", help="embed a random signature into one layer")
    e.add_argument("model")
    e.add_argument("--scheme", choices=[s.value for s in watermark.Scheme], required=True)
    e.add_argument("--layer", type=int, required=True)
    e.add_argument("--bits", type=int, default=256)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--probes", type=int, default=64, help="probe count for activation keys")
    e.add_argument("--steps", type=int, default=500)
    e.add_argument("--rate", type=float, default=0.05)
    e.add_argument("--penalty", type=float, default=1e-3)
    e.add_argument("--delta", type=float, default=watermark.DEFAULT_DELTA)
    e.add_argument("--out", required=True)
    e.add_argument("--key-out", required=True)
    e.add_argument("--json-out")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("verify", help="extract and compare a signature")
    v.add_argument("model")
    v.add_argument("--key", required=True)
    v.add_argument("--active", action="store_true", help="try reshape, merge and crop before extracting")
    v.add_argument("--delta", type=float, help="threshold over 0.5 (default: the key's)")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    for name, helptext, func in (("equiv", "output deviation and top-1 agreement", cmd_equiv),
                                 ("bench", "median forward-time ratio", cmd_bench)):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("model_a")
        c.add_argument("model_b")
        c.add_argument("--probes", type=int, default=1000 if name == "equiv" else 256)
        c.add_argument("--seed", type=int, required=True)
        c.add_argument("--task-seed", type=int, help="draw probes from toy_task(SEED) instead of U[0,1]")
        if name == "bench":
            c.add_argument("--runs", type=int, default=20)
        c.add_argument("--out")
        c.set_defaults(func=func)

    r = sub.add_parser("report", help="attack summary over one or more keys")
    r.add_argument("original")
    r.add_argument("obfuscated")
    r.add_argument("--key", action="append", required=True)
    r.add_argument("--probes", type=int, default=1000)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--task-seed", type=int)
    r.add_argument("--delta", type=float)
    r.add_argument("--timing-runs", type=int, default=0, help="add a runtime ratio (not byte-reproducible)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    value = os.environ.get("ECLIPSE_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"ECLIPSE_THREADS must be an integer, got {value!r}") from None
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _setup_logging(args.verbose)
        with _thread_limit():
            args.func(args)
    except UsageError as exc:
        print(json.dumps({"level": "error", "msg": f"usage: {exc}"}), file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(json.dumps({"level": "error", "msg": str(exc)}), file=sys.stderr)
        return EXIT_IO
    except (EclipseError, IndexError, ValueError) as exc:
        print(json.dumps({"level": "error", "msg": str(exc)}), file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
