"""``topodiff`` command line: phantom generation, training, sampling, evaluation and diagram tools."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .cubical import PersistenceDiagram, PersistencePoint, sublevel_pd
from .diffusion import DenoiserNet, linear_schedule, train_base
from .errors import ConfigError, DataError, TopodiffError
from .metrics import evaluate_run
from .phantom import generate_phantom, load_dataset, save_dataset, stack_samples
from .pipeline import (STAGES, RunConfig, artifact_meta, load_denoiser, load_encoder, restore_demo,
                       run_experiment, sample_images)
from .tgap import SoftThreshold, TGAPConfig, soft_filtration
from .tsa import MODES, ControlEncoder, FusionWeights, train_control
from .wasserstein import wasserstein

log = logging.getLogger("topodiff")

PD_COLUMNS = ("dim", "birth", "death", "birth_row", "birth_col", "death_row", "death_col")


def _widths(text: str):
    try:
        w = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--widths expects comma-separated integers, got {text!r}") from exc
    if len(w) != 3:
        raise ConfigError("--widths needs exactly three values")
    return w


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found")
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    arr = np.asarray(arr, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single 2-D image, got shape {arr.shape}")
    return arr


def write_diagram_csv(path, diagram: PersistenceDiagram) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PD_COLUMNS)
        for p in diagram.points:
            dr, dc = p.death_pixel if p.death_pixel is not None else ("", "")
            w.writerow([p.dim, repr(p.birth), repr(p.death), p.birth_pixel[0], p.birth_pixel[1], dr, dc])


def read_diagram_csv(path) -> PersistenceDiagram:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        points = []
        for r in rows:
            death_px = None if r["death_row"] == "" else (int(r["death_row"]), int(r["death_col"]))
            points.append(PersistencePoint(int(r["dim"]), float(r["birth"]), float(r["death"]),
                                           (int(r["birth_row"]), int(r["birth_col"])), death_px,
                                           death_px is None))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read diagram {path}: {exc}") from exc
    cap = max([p.death for p in points] + [1.0])
    return PersistenceDiagram(points, cap)


def _tgap_from_args(a) -> TGAPConfig:
    return TGAPConfig(lam=a.tgap_lambda, r=a.r, cap=a.cap, kernel=a.kernel, tau=a.tau, s=a.s, pad=a.pad,
                      target=a.target, t_gate=None if a.tgap_all_t else 0.5,
                      drop_essential=a.drop_essential, mse_on=a.mse_on)


# -- subcommands -------------------------------------------------------------------

def cmd_phantom_gen(a) -> int:
    samples = [generate_phantom(a.seed * 1_000_003 + i, a.size) for i in range(a.count)]
    save_dataset(a.out, samples)
    if a.png:
        from .viz import save_overlays

        save_overlays(samples[:16], a.png, meta=artifact_meta())
    print(f"wrote {len(samples)} phantoms ({sum(s.has_hole for s in samples)} with holes) to {a.out}")
    return 0


def cmd_train_base(a) -> int:
    images, _, _ = stack_samples(load_dataset(a.data))
    sched = linear_schedule(a.T, a.beta_start, a.beta_end)
    net = DenoiserNet(_widths(a.widths), seed=a.seed)
    _, losses = train_base(images, sched, epochs=a.epochs, lr=a.lr, batch=a.batch, seed=a.seed,
                           max_steps=a.max_steps, log_path=a.log, checkpoint_path=a.out, net=net)
    print(f"trained {len(losses)} steps, final loss {losses[-1] if losses else float('nan'):.5f}; saved {a.out}")
    return 0


def cmd_train_control(a) -> int:
    net = load_denoiser(a.base)
    images, tumors, anatomy = stack_samples(load_dataset(a.data))
    sched = linear_schedule(a.T, a.beta_start, a.beta_end)
    enc = ControlEncoder(net.widths, hidden=a.hidden, weights=FusionWeights(a.lambda1, a.lambda2),
                         seed=a.seed, fusion=a.fusion)
    _, records = train_control(net, enc, images, tumors, anatomy, sched, mode=a.mode, tgap=_tgap_from_args(a),
                               epochs=a.epochs, lr=a.lr, batch=a.batch, seed=a.seed, max_steps=a.max_steps,
                               log_path=a.log, checkpoint_path=a.out)
    last = records[-1]["loss"] if records else float("nan")
    print(f"trained control ({a.mode}) for {len(records)} steps, final loss {last:.5f}; saved {a.out}")
    return 0


def cmd_sample(a) -> int:
    net = load_denoiser(a.base)
    sched = linear_schedule(a.T)
    tumors = anatomy = None
    encoder = None
    zero = a.control == "zeros"
    if a.control and not zero:
        encoder = load_encoder(a.control)
        if not a.data:
            raise ConfigError("conditioned sampling needs --data for the masks")
    size = a.size
    n = a.n
    if a.data:
        samples = load_dataset(a.data)
        _, tumors, anatomy = stack_samples(samples)
        size = samples[0].size
        n = min(n, len(samples)) if encoder is not None else n
    imgs = sample_images(net, sched, n, size, a.seed, encoder=encoder, tumors=tumors, anatomy=anatomy,
                         zero_control=zero, batch=a.batch)
    np.save(a.out, imgs)
    if a.png:
        from .viz import save_grid

        save_grid(imgs[:16], a.png, meta=artifact_meta())
    print(f"wrote {len(imgs)} samples to {a.out}")
    return 0


def cmd_eval(a) -> int:
    gen_path = Path(a.generated)
    if gen_path.is_dir():
        gen_path = gen_path / "samples.npy"
    if not gen_path.exists():
        raise DataError(f"{gen_path} not found")
    gen = np.load(gen_path)
    ref_samples = load_dataset(a.reference)
    ref, tumors, _ = stack_samples(ref_samples)
    if len(gen) > len(ref):
        raise DataError(f"{len(gen)} generated images but only {len(ref)} references")
    k = len(gen)
    report = evaluate_run(gen, ref[:k], tumors[:k], [s.anatomy.bm for s in ref_samples[:k]],
                          meta=artifact_meta(model=str(gen_path)))
    stem = Path(a.out)
    stem = stem.with_suffix("") if stem.suffix in (".csv", ".json") else stem
    report.write_csv(stem.with_suffix(".csv"))
    report.write_json(stem.with_suffix(".json"))
    print(json.dumps(report.aggregate(), indent=2, sort_keys=True))
    return 0


def cmd_pd(a) -> int:
    img = _load_image(a.input)
    if a.raw:
        f = img
    else:
        f, _ = soft_filtration(img, SoftThreshold(a.tau, a.s))
    diagram = sublevel_pd(f, cap=max(a.cap, float(np.max(f))))
    write_diagram_csv(a.out, diagram)
    if a.png:
        from .viz import plot_diagram

        plot_diagram(diagram, a.png, title=Path(a.input).name)
    print(f"{len(diagram)} points ({len(diagram.by_dim(0))} in H0, {len(diagram.by_dim(1))} in H1) -> {a.out}")
    return 0


def cmd_wdist(a) -> int:
    p = read_diagram_csv(a.p)
    q = read_diagram_csv(a.q)
    if a.drop_essential:
        p, q = p.without_essential(), q.without_essential()
    dims = (0, 1) if a.dim is None else (a.dim,)
    total = 0.0
    for dim in dims:
        value, m = wasserstein(p.array(dim), q.array(dim), a.r)
        total += m.total
        print(f"H{dim}: W_{a.r:g} = {value:.10g}")
        for i, j in m.pairs:
            print(f"  P[{i}] -> Q[{j}]")
        for i in m.diagonal_p:
            print(f"  P[{i}] -> diagonal")
        for j in m.diagonal_q:
            print(f"  diagonal <- Q[{j}]")
    print(f"total: {total ** (1.0 / a.r):.10g}")
    return 0


def cmd_restore(a) -> int:
    net = load_denoiser(a.base)
    enc = load_encoder(a.control)
    samples = load_dataset(a.data)[:a.count]
    rows = restore_demo(net, enc, linear_schedule(a.T), samples, a.sigmas, a.noise_scale, a.seed,
                        masks_from_lq=a.masks_from_lq)
    with open(a.out, "w", newline="") as fh:
        for k, v in artifact_meta().items():
            fh.write(f"# {k}={v}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("sigma {sigma:g}: PSNR lq {psnr_lq:.2f} dB, generated {psnr_gen:.2f} dB; "
              "DSC lq {dsc_lq:.3f}, generated {dsc_gen:.3f}".format(**r))
    return 0


def cmd_run(a) -> int:
    config = RunConfig.from_file(a.config) if a.config else RunConfig.defaults()
    stages = a.stages.split(",") if a.stages else list(STAGES)
    reports = run_experiment(config, a.out, stages)
    for name, rep in reports.items():
        agg = rep.aggregate()
        print(f"{name:10s} DSC {agg['dsc_tumor']['mean']:.4f}  PSNR {agg['psnr']['mean']:.2f}  "
              f"SSIM {agg['ssim']['mean']:.4f}  MMD {agg['mmd']['mean']:.4f}")
    return 0


def _add_tgap_args(p) -> None:
    g = p.add_argument_group("topology loss")
    g.add_argument("--tgap-lambda", type=float, default=0.005)
    g.add_argument("--r", type=float, default=2.0)
    g.add_argument("--tau", type=float, default=0.5)
    g.add_argument("--s", type=float, default=0.1)
    g.add_argument("--pad", type=int, default=2)
    g.add_argument("--cap", type=float, default=1.0)
    g.add_argument("--kernel", choices=("gauss", "sharpen", "identity"), default="gauss")
    g.add_argument("--target", choices=("eps", "x0"), default="eps")
    g.add_argument("--mse-on", choices=("noise", "signal"), default="noise")
    g.add_argument("--tgap-all-t", action="store_true", help="apply the topology loss at every timestep")
    g.add_argument("--drop-essential", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="topodiff", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="write an overlay sheet of the first 16 phantoms")
    p.set_defaults(func=cmd_phantom_gen)

    def training(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=30)
        p.add_argument("--lr", type=float, default=2.5e-5)
        p.add_argument("--batch", type=int, default=2)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--T", type=int, default=400)
        p.add_argument("--beta-start", type=float, default=1e-4)
        p.add_argument("--beta-end", type=float, default=0.02)
        p.add_argument("--log", help="CSV loss log")

    p = sub.add_parser("train-base", help="train the unconditional denoiser")
    training(p)
    p.add_argument("--widths", default="32,64,128")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-control", help="train a control encoder against a frozen denoiser")
    training(p)
    p.add_argument("--base", required=True)
    p.add_argument("--mode", choices=MODES, default="tsa")
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--fusion", choices=("sum", "product"), default="sum")
    _add_tgap_args(p)
    p.set_defaults(func=cmd_train_control)

    p = sub.add_parser("sample", help="draw samples from a trained model")
    p.add_argument("--base", required=True)
    p.add_argument("--control", help="control checkpoint, or 'zeros' for all-zero control maps")
    p.add_argument("--data", help="dataset supplying the conditioning masks")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=123)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--T", type=int, default=400)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated samples against a reference dataset")
    p.add_argument("--generated", required=True, help=".npy file or directory holding samples.npy")
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True, help="report path stem; .csv and .json are written")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pd", help="persistence diagram of an image")
    p.add_argument("--in", dest="input", required=True, help=".npy or image file")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--s", type=float, default=0.1)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--raw", action="store_true", help="use the values as the filtration directly")
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.set_defaults(func=cmd_pd)

    p = sub.add_parser("wdist", help="Wasserstein distance between two diagram CSVs")
    p.add_argument("--p", required=True)
    p.add_argument("--q", required=True)
    p.add_argument("--r", type=float, default=2.0)
    p.add_argument("--dim", type=int, choices=(0, 1))
    p.add_argument("--drop-essential", action="store_true")
    p.set_defaults(func=cmd_wdist)

    p = sub.add_parser("restore", help="regenerate noise-degraded phantoms from their masks")
    p.add_argument("--base", required=True)
    p.add_argument("--control", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--masks-from-lq", action="store_true", help="threshold the degraded image for the tumour mask")
    p.add_argument("--T", type=int, default=400)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("run", help="run the configured experiment stages")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TopodiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
