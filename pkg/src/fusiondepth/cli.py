"""Command-line entry point: train, eval, sweep, synth, infer.

Failures exit nonzero with a single ``error: <Kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .autograd import Tensor, no_grad, precision
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import fit_image, read_rgb, synth_dataset, write_dataset, write_gray16
from .objective import write_report
from .spectral import frequency_input
from .training import DEFAULT_ALPHAS, alpha_sweep, evaluate, resolve_dataset, restore, train



class PartialFailure(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: UsageError: {' '.join(message.split())}\n")


def _alphas(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_train(args) -> None:
    cfg = TrainConfig.load(args.config)
    result = train(cfg, on_epoch=lambda e, loss: print(f"epoch {e + 1} loss {loss:.6f}", flush=True))
    save_checkpoint(result.checkpoint, args.out)
    print(f"wrote {args.out}")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    data = resolve_dataset(args.data, cfg.image_size, cfg.depth_scale)
    report = evaluate(ckpt, data)
    sys.stdout.write(write_report([(cfg.alpha, report)]))


def cmd_sweep(args) -> None:
    cfg = TrainConfig.load(args.config)
    text, failures = alpha_sweep(cfg, args.alphas)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {args.out}")
    if failures:
        raise PartialFailure(f"{len(failures)} of {len(args.alphas)} alpha runs failed; " + "; ".join(failures))


def cmd_synth(args) -> None:
    samples = synth_dataset(args.count, args.seed, args.size, args.depth_scale)
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_infer(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    image = fit_image(read_rgb(args.image), cfg.image_size)
    with precision(cfg.precision):
        model = restore(ckpt)
        model.eval()
        with no_grad():
            depth = model(Tensor(image[None]), Tensor(frequency_input(image).data[None]))
    write_gray16(args.out, depth.to_png_array()[0, 0])
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fusiondepth", description="Dual-branch transformer depth estimation")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="depth metrics of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory or synth:N:seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate one model per alpha")
    p.add_argument("--config", required=True)
    p.add_argument("--alphas", type=_alphas, default=list(DEFAULT_ALPHAS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth-scale", type=float, default=10.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("infer", help="predict a 16-bit depth PNG for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: Interrupted: stopped by user", file=sys.stderr)
        return 130
    except Exception as exc:  # report everything as one parsable line
        msg = " ".join(str(exc).split()) or "no message"
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
