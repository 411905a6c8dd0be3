"""Command-line interface: dataset synthesis, training, evaluation,
feature-decoupling inspection and gradient verification."""

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, load_config
from .datagen import (PhantomSpec, load_dataset, load_pair, save_tensor,
                      synth_dataset)
from .errors import CddpeError
from .losses import consistency_loss
from .numerics import Tensor, no_grad
from .trainer import evaluate, grad_check, model_from_checkpoint, train

_ENV_SEED = "CDDPE_SEED"


def _default_seed():
    raw = os.environ.get(_ENV_SEED)
    return int(raw) if raw else 0


def write_pgm(path, img):
    """8-bit grayscale PGM (binary P5) preview of a [H,W] image in [0,1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    data = np.clip(arr, 0.0, 1.0)
    pixels = np.round(data * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _build_parser():
    parser = argparse.ArgumentParser(prog="cddpe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired-contrast dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=8, help="number of sample pairs")
    p.add_argument("--res", type=int, default=32, help="image resolution (power of two)")
    p.add_argument("--scale", type=int, default=4, choices=(2, 4))
    p.add_argument("--degrade", default="spatial", choices=("spatial", "kspace"))
    p.add_argument("--misalign", type=float, default=0.0,
                   help="reference misalignment amplitude in pixels")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--png", action="store_true",
                   help="also write 8-bit PGM previews next to the tensors")

    p = sub.add_parser("train", help="train on a synthesized dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--config", default=None, help="key = value overrides file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output CSV path")
    p.add_argument("--resid", default=None,
                   help="directory for per-sample residual tensors "
                        "(default: <report>.residuals)")
    p.add_argument("--png", action="store_true")

    p = sub.add_parser("decouple", help="dump decoupled feature maps for one pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pair", required=True, help="one pair directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--res", type=int, default=8)

    return parser


def _cmd_synth(args):
    seed = args.seed if args.seed is not None else _default_seed()
    spec = PhantomSpec(resolution=args.res, misalign=args.misalign).validate()
    pair_dirs = synth_dataset(args.out, args.n, spec, args.scale, args.degrade, seed)
    if args.png:
        for pdir in pair_dirs:
            pair = load_pair(pdir)
            for name in ("hr_x", "hr_y", "up_x"):
                write_pgm(os.path.join(pdir, f"{name}.pgm"), getattr(pair, name))
    print(f"wrote {len(pair_dirs)} pairs ({args.res}x{args.res}, scale {args.scale}, "
          f"{args.degrade}, seed {seed}) to {args.out}")
    return 0


def _cmd_train(args):
    if not os.path.isdir(args.data):
        raise CddpeError(f"data directory not found: {args.data}")
    dataset = load_dataset(args.data)
    res = int(dataset[0].hr_x.shape[-1])
    base = RunConfig(resolution=res, scale=dataset[0].scale,
                     degradation=dataset[0].degradation, seed=_default_seed())
    cfg = load_config(args.config, base=base)
    flag_overrides = {}
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch", "batch_size"),
                      ("seed", "seed"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag)
        if value is not None:
            flag_overrides[key] = value
    if flag_overrides:
        cfg = cfg.apply(flag_overrides)
    state = train(cfg, dataset, args.out, resume_from=args.resume)
    print(f"trained {state.step} steps; final loss {state.loss_history[-1]:.6f}; "
          f"checkpoint {state.checkpoint_path}; log {state.log_path}")
    return 0


def _cmd_eval(args):
    if not os.path.isfile(args.ckpt):
        raise CddpeError(f"checkpoint not found: {args.ckpt}")
    if not os.path.isdir(args.data):
        raise CddpeError(f"data directory not found: {args.data}")
    model, _, _ = model_from_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    data_res = int(dataset[0].hr_x.shape[-1])
    if data_res != model.config.resolution:
        raise CddpeError(
            f"checkpoint was trained at {model.config.resolution}x"
            f"{model.config.resolution} (frequency prompt P_F and routing prompt "
            f"P_R are resolution-bound); dataset is {data_res}x{data_res}")
    model_report, base_report, residuals = evaluate(model, dataset)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,psnr_mean,psnr_std,ssim_mean,ssim_std\n")
        for name, rep in (("model", model_report), ("baseline", base_report)):
            fh.write(f"{name},{rep.psnr_mean:.6f},{rep.psnr_std:.6f},"
                     f"{rep.ssim_mean:.6f},{rep.ssim_std:.6f}\n")
    resid_dir = args.resid or (args.report + ".residuals")
    os.makedirs(resid_dir, exist_ok=True)
    for i, resid in enumerate(residuals):
        save_tensor(os.path.join(resid_dir, f"residual_{i:04d}.cdt"), resid)
        if args.png:
            write_pgm(os.path.join(resid_dir, f"residual_{i:04d}.pgm"), resid)
    print(f"model    psnr {model_report.psnr_mean:.4f} +/- {model_report.psnr_std:.4f}  "
          f"ssim {model_report.ssim_mean:.4f} +/- {model_report.ssim_std:.4f}")
    print(f"baseline psnr {base_report.psnr_mean:.4f} +/- {base_report.psnr_std:.4f}  "
          f"ssim {base_report.ssim_mean:.4f} +/- {base_report.ssim_std:.4f}")
    return 0


def _cmd_decouple(args):
    model, _, _ = model_from_checkpoint(args.ckpt)
    pair = load_pair(args.pair)
    os.makedirs(args.out, exist_ok=True)
    with no_grad():
        fx, fy, fc = model.decoupler.run(
            Tensor(pair.up_x[None]), Tensor(pair.hr_y[None]), model.config.iterations)
        comp_x = model.head(fx + fc)
        comp_y = model.head(fc + fy)
    for name, t in (("fx_mean", fx), ("fy_mean", fy), ("fc_mean", fc)):
        save_tensor(os.path.join(args.out, f"{name}.cdt"),
                    t.data.mean(axis=1)[0].astype(np.float32))
    save_tensor(os.path.join(args.out, "comp_x.cdt"), comp_x.data[0, 0])
    save_tensor(os.path.join(args.out, "comp_y.cdt"), comp_y.data[0, 0])
    l1_x = float(np.mean(np.abs(pair.hr_x[None] - comp_x.data)))
    l1_y = float(np.mean(np.abs(pair.hr_y[None] - comp_y.data)))
    print(f"wrote 5 tensors to {args.out}; consistency parts: "
          f"target {l1_x:.6f}, reference {l1_y:.6f}")
    return 0


def _cmd_gradcheck(args):
    from .trainer import Model
    seed = args.seed if args.seed is not None else _default_seed()
    cfg = RunConfig(resolution=args.res, scale=4, seed=seed).validate()
    model = Model(cfg)
    rows = grad_check(model, tol=args.tol, seed=seed)
    print("group,max_rel_err,pass")
    ok = True
    for row in rows:
        print(f"{row.group},{row.max_rel_err:.3e},{str(row.passed).lower()}")
        ok = ok and row.passed
    return 0 if ok else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "decouple": _cmd_decouple,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except CddpeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
