"""
Command-line front end.

Exit codes:
  0  success
  1  invalid option value or inconsistent inputs
  2  usage error or missing input file
  3  malformed input file
  4  optimization failure
"""

import argparse
import json
import sys
from pathlib import Path

from . import fitting, flow, metrics
from .errors import FacialFlowError, FormatError, OptimizationError
from .fixture import copy_fixture
from .morphable_model import load_basis, load_params, reconstruct, save_params, to_obj

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_FORMAT, EXIT_OPTIM = 0, 1, 2, 3, 4


class MissingInput(FacialFlowError):
    pass


def _existing(path):
    p = Path(path)
    if not p.is_file():
        raise MissingInput(f"input file not found: {p}")
    return p


def _size(args):
    return (args.size, args.size)


def _write_json(path, data):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def cmd_fit(args):
    basis = load_basis(_existing(args.model))
    target = fitting.load_landmarks(_existing(args.src))
    gt = load_params(_existing(args.warm)) if args.warm else None
    cfg = fitting.FitConfig(max_iterations=args.max_iters)
    report = fitting.fit(basis, target, cfg, gt=gt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(report.final_params, out)
    _write_json(args.report or out.with_suffix(".report.json"), report.to_dict())
    print(f"fit: {report.iterations_used} iterations, loss {report.final_loss:.6g}, "
          f"mean landmark error {report.mean_landmark_error_px:.4f} px")


def cmd_interp(args):
    p_s = load_params(_existing(args.src))
    p_t = load_params(_existing(args.dst))
    if args.theta is not None:
        result = flow.interpolate_params(p_s, p_t, args.theta)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_params(result, args.out)
        return
    thetas = flow.flow_thetas(args.steps)
    frames = [flow.interpolate_params(p_s, p_t, float(t)) for t in thetas]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, params in enumerate(frames):
        save_params(params, out / f"params_{i:03d}.json")
    _write_json(out / "thetas.json", [float(t) for t in thetas])


def cmd_flow(args):
    basis = load_basis(_existing(args.model))
    p_s = load_params(_existing(args.src))
    p_t = load_params(_existing(args.dst))
    p_m = flow.interpolate_params(p_s, p_t, args.theta) if args.theta is not None else p_t
    result = flow.rasterize_flow(basis, p_s, p_m, _size(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    flow.save_flow(result, out)
    flow.save_visualization(result, out.with_suffix(".png"))


def cmd_animate(args):
    basis = load_basis(_existing(args.model))
    p_s = load_params(_existing(args.src))
    p_t = load_params(_existing(args.dst))
    seq = flow.flow_sequence(basis, p_s, p_t, args.steps, _size(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        flow.save_flow(frame, out / f"flow_{i:03d}.f3f")
        flow.save_visualization(frame, out / f"flow_{i:03d}.png")
    _write_json(out / "thetas.json", list(seq.thetas))


def cmd_render(args):
    basis = load_basis(_existing(args.model))
    params = load_params(_existing(args.src))
    text = to_obj(reconstruct(basis, params), basis.triangles)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)


def cmd_metrics(args):
    a = metrics.load_image(_existing(args.src))
    b = metrics.load_image(_existing(args.dst))
    report = metrics.image_metrics(a, b)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json())
    else:
        sys.stdout.write(report.to_json())


def cmd_perturb(args):
    params = load_params(_existing(args.src))
    result = flow.perturb_params(params, args.std, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_params(result, args.out)


def cmd_fixture(args):
    copy_fixture(args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facialflow",
        description="Morphable-model fitting, parameter interpolation and facial-flow tools.",
        epilog="exit codes: 0 ok, 1 invalid value, 2 usage error or missing file, "
               "3 malformed file, 4 optimization failure",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, **flags):
        p = sub.add_parser(name, help=help_text)
        for flag, kw in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kw)
        p.set_defaults(func=func)
        return p

    model = dict(required=True, help="F3B basis file")
    out = dict(required=True, help="output path")
    size = dict(type=int, default=128, help="flow width and height in pixels (default 128)")
    add("fit", cmd_fit, "fit parameters to a landmark JSON file",
        model=model, src=dict(required=True, help="landmark JSON"), out=out,
        report=dict(default=None, help="FitReport path (default <out>.report.json)"),
        max_iters=dict(type=int, default=2000),
        warm=dict(default=None, help="ground-truth params JSON; enables the warm objective"))
    add("interp", cmd_interp, "interpolate between two parameter files",
        src=dict(required=True), dst=dict(required=True),
        out=dict(required=True, help="output directory, or file when --theta is given"),
        steps=dict(type=int, default=5), theta=dict(type=float, default=None))
    add("flow", cmd_flow, "rasterize the facial flow from --src to --dst",
        model=model, src=dict(required=True), dst=dict(required=True),
        out=dict(required=True, help="F3F path; the PNG visualization goes next to it"),
        size=size, theta=dict(type=float, default=None,
                              help="flow to the interpolated face at this theta instead"))
    add("animate", cmd_animate, "write a sequence of flows from --src toward --dst",
        model=model, src=dict(required=True), dst=dict(required=True),
        out=dict(required=True, help="output directory"), steps=dict(type=int, default=5),
        size=size)
    add("render", cmd_render, "export the reconstructed mesh as OBJ",
        model=model, src=dict(required=True), out=out)
    add("metrics", cmd_metrics, "image metrics between two image files",
        src=dict(required=True), dst=dict(required=True),
        out=dict(default=None, help="JSON path (default stdout)"))
    add("perturb", cmd_perturb, "add Gaussian noise to the shape coefficients",
        src=dict(required=True), out=out, std=dict(type=float, default=0.01),
        seed=dict(type=int, default=0))
    add("fixture", cmd_fixture, "copy the bundled synthetic fixture into a directory",
        out=dict(required=True, help="output directory"))
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FormatError as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OptimizationError as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIM
    except (FacialFlowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
