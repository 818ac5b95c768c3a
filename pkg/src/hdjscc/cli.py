"""Command-line interface: ``hdjscc <command> ...``.

Commands: ingest, train, eval, compress, decompress, rd-curve, baseline,
report. The data root comes from ``--root`` or the ``HDJSCC_DATA_ROOT``
environment variable.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import baselines, data, metrics, pipeline
from .channels import ChannelState, db_to_linear
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config
from .errors import HDJSCCError

log = logging.getLogger("hdjscc")

CSV_FIELDS = ("dataset", "model_id", "lambda", "eta_db", "channel", "bpp", "psnr_db", "ssim", "k_prime", "seed")


def _images(cfg_dataset: str, split: str, root, limit=None):
    imgs = data.load_split(cfg_dataset, split, root)
    return imgs[:limit] if limit else imgs


def cmd_ingest(args):
    if args.dataset == "desk":
        manifest = data.ingest_desk(args.root)
    elif args.src is None:
        raise SystemExit(f"--src is required for {args.dataset}")
    else:
        manifest = data.INGESTERS[args.dataset](args.src, args.root)
    problems = data.verify_store(data.data_root(args.root) / args.dataset)
    for name, info in manifest["splits"].items():
        print(f"{name}: {info['shape'][0]} images {tuple(info['shape'][1:])}")
    for e in manifest.get("errors", []):
        print(f"skipped {e}")
    for p in problems:
        print(f"problem: {p}")
    return 1 if problems else 0


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    torch.manual_seed(cfg.seed)
    model = pipeline.HDJSCC(cfg)
    train = _images(cfg.dataset, "train", args.root)
    val = _images(cfg.dataset, "val", args.root)
    out = Path(args.out)

    def checkpoint(step, hist):
        save_checkpoint(out, model, step, extra={"stage": args.stage, "val": hist.val, "complete": False})

    if args.stage == "jscc":
        hist = pipeline.train_jscc(model, train, val, cfg, max_steps=args.steps)
    else:
        pre = None
        if cfg.init == "pretrained":
            src = args.pretrained or cfg.pretrained
            if src is None:
                raise SystemExit("init=pretrained needs --pretrained or the 'pretrained' config key")
            pre, _ = load_checkpoint(src)
        hist = pipeline.train_fully_adaptive(model, train, val, cfg, pretrained=pre, max_steps=args.steps,
                                             on_epoch=checkpoint)
    step = len(hist.steps)
    size = save_checkpoint(out, model, step, extra={"stage": args.stage, "val": hist.val, "complete": True})
    dump_config(cfg, out.with_suffix(".yaml"))
    print(f"saved {out} ({size} bytes) after {step} steps; final val {hist.val[-1][1]:.5f}")
    return 0


def _write_rows(path, rows):
    text = metrics.format_csv(rows, CSV_FIELDS)
    if path:
        Path(path).write_text(text)
    sys.stdout.write(text)


def cmd_eval(args):
    model, payload = load_checkpoint(args.checkpoint)
    images = _images(model.cfg.dataset, "test", args.root, args.limit)
    ells = args.ell or list(range(1, model.cfg.n_rates + 1))
    kinds = args.channel or [model.cfg.channel]
    rows = []
    for p in pipeline.evaluate_grid(model, images, args.eta_db, ells, kinds, args.seed):
        rows.append(p.as_row(dataset=model.cfg.dataset, model_id=Path(args.checkpoint).stem, seed=args.seed))
    _write_rows(args.out, rows)
    return 0


def _read_image(path) -> torch.Tensor:
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"))
    if arr.dtype != np.uint8:
        raise SystemExit("images must be 8-bit RGB")
    return data.to_tensor(arr[None])


def _write_image(path, s_hat: torch.Tensor):
    path = Path(path)
    np.save(path.with_suffix(".npy"), s_hat[0].numpy())
    if path.suffix.lower() in (".png", ".bmp", ".ppm"):
        from PIL import Image

        img = np.round(s_hat[0].numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(img).save(path)


def cmd_compress(args):
    model, _ = load_checkpoint(args.checkpoint)
    s = _read_image(args.input)
    h = complex(args.h) if args.h is not None else 1.0 + 0.0j
    state = ChannelState(db_to_linear(args.eta_db), h=h, csit=args.csit, ell=args.ell)
    gen = torch.Generator().manual_seed(args.seed)
    res = pipeline.hdjscc_deploy(model, s, state, generator=gen, r_n=args.r_n)
    Path(args.out).write_bytes(res.data)
    if args.prediction:
        _write_image(args.prediction, res.s_hat)
    print(json.dumps({"bytes": res.bitstream.total_bytes, "payload_bits": res.bitstream.payload_bits,
                      "bpp": res.point.bpp, "psnr_db": res.point.psnr, "ssim": res.point.ssim,
                      "k_prime": res.point.k_prime}))
    return 0


def cmd_decompress(args):
    model, _ = load_checkpoint(args.checkpoint)
    s_hat = pipeline.decompress(model, Path(args.input).read_bytes())
    _write_image(args.out, s_hat)
    print(f"wrote {args.out}")
    return 0


def cmd_rd_curve(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv) as f:
        rows = list(csv.DictReader(f))
    groups = {}
    for r in rows:
        key = (r.get("model_id", ""), r["channel"], float(r["eta_db"]))
        groups.setdefault(key, []).append((float(r["bpp"]), float(r["psnr_db"])))
    fig, ax = plt.subplots(figsize=(5, 4))
    for (mid, ch, eta), pts in sorted(groups.items()):
        pts.sort()
        ax.plot(*zip(*pts), marker="o", label=f"{mid} {ch} {eta:g} dB")
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")
    return 0


def _codec(args, model):
    if args.codec_encode:
        return baselines.SubprocessCodec(args.codec_encode, args.codec_decode, args.qualities or [50])
    if model is None:
        raise SystemExit("the learned codec needs --checkpoint")
    return baselines.LearnedCodec(model)


def cmd_baseline(args):
    model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    dataset = model.cfg.dataset if model else args.dataset
    test = _images(dataset, "test", args.root, args.limit)
    rows = []
    if args.kind == "vq":
        train = _images(dataset, "train", args.root, args.train_limit)
        for eta_db in args.eta_db:
            psnr, bpp, _ = baselines.naive_vq_baseline(model, train, test, eta_db, args.n_v, args.bits, args.seed)
            rows.append({"dataset": dataset, "model_id": f"vq_nv{args.n_v}_b{args.bits:g}", "lambda": "",
                         "eta_db": eta_db, "channel": "awgn", "bpp": bpp, "psnr_db": psnr, "ssim": "",
                         "k_prime": "", "seed": args.seed})
    else:
        table = baselines.load_mcs_table(args.mcs)
        codec = _codec(args, model)
        k = model.channel_uses() if model else args.k
        mean = baselines.mean_image_uint8(_images(dataset, "train", args.root, args.train_limit))
        for eta_db in args.eta_db:
            r = baselines.digital_baseline(test, eta_db, table, codec, k, mean, args.design_snr_db)
            rows.append({"dataset": dataset, "model_id": f"digital_{r.entry.name if r.entry else 'outage'}",
                         "lambda": "", "eta_db": eta_db, "channel": "awgn", "bpp": r.bpp, "psnr_db": r.psnr,
                         "ssim": r.ssim, "k_prime": "", "seed": args.seed})
    _write_rows(args.out, rows)
    return 0


def cmd_report(args):
    model, payload = load_checkpoint(args.checkpoint)
    rep = metrics.storage_report(model)
    rep["checkpoint_bytes"] = Path(args.checkpoint).stat().st_size
    rep["expected_scaling_scalars"] = metrics.expected_scaling_scalars(model.cfg.n_rates, model.cfg.c_z,
                                                                       model.cfg.c_v)
    rep.update(metrics.complexity_report(model, (3, *model.image_size)))
    rep["step"] = payload["step"]
    sys.stdout.write(metrics.format_kv(rep))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdjscc", description=__doc__.splitlines()[0])
    p.add_argument("--root", default=None, help="data root (default: $HDJSCC_DATA_ROOT)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="build a local image store")
    s.add_argument("dataset", choices=sorted(data.INGESTERS))
    s.add_argument("--src", default=None, help="source directory (cifar10, celeba)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", default=None)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--stage", choices=("jscc", "hdjscc"), default="hdjscc")
    s.add_argument("--pretrained", default=None, help="checkpoint providing f_s/g_d")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="sweep an (eta, lambda, channel) grid")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--eta-db", type=float, nargs="+", default=[1.0, 5.0, 9.0])
    s.add_argument("--ell", type=int, nargs="*")
    s.add_argument("--channel", nargs="*", choices=("awgn", "rayleigh_csit", "rayleigh_csir"))
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compress", help="source + wireless hop + relay; writes the container")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="8-bit RGB image (png or npy)")
    s.add_argument("--out", required=True)
    s.add_argument("--eta-db", type=float, default=5.0)
    s.add_argument("--ell", type=int, default=1)
    s.add_argument("--h", default=None, help="complex fading coefficient, e.g. 0.3+0.8j")
    s.add_argument("--csit", action="store_true")
    s.add_argument("--r-n", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prediction", default=None, help="also write the relay-side reconstruction")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("decompress", help="destination: container -> image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="png path; a float .npy is written alongside")
    s.set_defaults(func=cmd_decompress)

    s = sub.add_parser("rd-curve", help="plot PSNR vs bpp from an eval CSV")
    s.add_argument("--csv", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rd_curve)

    s = sub.add_parser("baseline", help="naive VQ or idealized digital baseline")
    s.add_argument("kind", choices=("vq", "digital"))
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--dataset", default="desk")
    s.add_argument("--eta-db", type=float, nargs="+", default=[5.0])
    s.add_argument("--design-snr-db", type=float, default=None)
    s.add_argument("--n-v", type=int, default=2)
    s.add_argument("--bits", type=float, default=1.0)
    s.add_argument("--mcs", default=None, help="MCS table YAML (default: bundled)")
    s.add_argument("--k", type=int, default=768)
    s.add_argument("--codec-encode", default=None, help="external encoder command, may use {quality}")
    s.add_argument("--codec-decode", default=None)
    s.add_argument("--qualities", type=int, nargs="*")
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--train-limit", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("report", help="storage and complexity report")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except HDJSCCError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
