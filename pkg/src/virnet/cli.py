"""``virnet synth|train|infer|eval|verify``.

Exit codes: 0 success, 1 invalid input or failed verification,
2 numerical or runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import verify
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, kernel_bank_embedding, load_dataset, load_manifest, synthesize
from .degradation import KernelEmbedding, KernelSpec, make_kernel
from .errors import ContractError, NumericalFailure, VirnetError
from .inference import restore
from .io import read_image, write_pnm, write_virt
from .metrics import psnr, report
from .networks import NetworkConfig, load_params, save_params
from .training import TrainResult, read_trace, state_from_meta, state_to_meta, train, write_trace

log = logging.getLogger("virnet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TEST_SEED_OFFSET = 1  # the test split draws from the stream seed + 1
CHECKPOINT = "checkpoint.ckpt"
TRACE = "loss_trace.csv"


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VIRNET_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: ExperimentConfig) -> dict[str, Path]:
    if cfg.synth is None:
        raise ConfigError("synth needs a 'synth' section")
    out = {"train": synthesize(cfg.synth, cfg.train_manifest_path().parent, cfg.seed)}
    if cfg.test_synth is not None:
        out["test"] = synthesize(cfg.test_synth, cfg.test_manifest_path().parent, cfg.seed + TEST_SEED_OFFSET)
    for split, path in out.items():
        log.info("%s split: %s", split, path)
    return out


# ---------------------------------------------------------------- train


def _network_for(cfg: ExperimentConfig, ds: Dataset) -> NetworkConfig:
    net = cfg.network
    if ds.task == "sr":
        t, scale = cfg.kernel_embedding_dims, ds.scale
        if net.t not in (0, t) or net.scale not in (1, scale):
            raise ConfigError(f"network (t={net.t}, scale={net.scale}) disagrees with the data "
                              f"(t={t}, scale={scale})")
        return replace(net, t=t, scale=scale)
    if net.t or net.scale != 1:
        raise ConfigError(f"task {ds.task!r} takes no kernel code and no upscaling")
    return net


def _embedding_arrays(emb: KernelEmbedding | None) -> dict:
    if emb is None:
        return {}
    return {"embedding.basis": emb.basis, "embedding.mean": emb.mean}


def _embedding_from(arrays: dict, meta: dict) -> KernelEmbedding | None:
    if "embedding.basis" not in arrays:
        return None
    return KernelEmbedding(basis=arrays["embedding.basis"], mean=arrays["embedding.mean"],
                           support=meta["embedding_support"])


def _fit_embedding(cfg: ExperimentConfig, ds: Dataset) -> KernelEmbedding | None:
    if ds.kernels is None:
        return None
    unique = {k.tobytes(): k for k in ds.kernels}
    support = ds.kernels.shape[-1]
    return kernel_bank_embedding(cfg.kernel_embedding_dims, cfg.seed, support=support, extra=list(unique.values()))


def _save(path: Path, result: TrainResult, net: NetworkConfig, cfg: ExperimentConfig,
          emb: KernelEmbedding | None) -> None:
    extra = result.optimizer.state_arrays()
    extra.update(_embedding_arrays(emb))
    meta = {"task": cfg.task, "state": state_to_meta(result.state), "hyperparams": asdict(cfg.hyperparams)}
    if emb is not None:
        meta["embedding_support"] = emb.support
    save_params(path, result.params, net, extra, meta)


def _validate(params, net, emb, cfg: ExperimentConfig, limit: int = 16) -> dict | None:
    path = cfg.test_manifest_path()
    if not path.exists():
        return None
    ds = load_dataset(path)
    rows = [_eval_one(ds, i, params, net, emb) for i in range(min(limit, len(ds)))]
    return {"psnr": float(np.mean([r["psnr"] for r in rows])), "ssim": float(np.mean([r["ssim"] for r in rows]))}


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> Path:
    from .report import plot_loss_trace

    ds = load_dataset(cfg.train_manifest_path())
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt, trace_path = out / CHECKPOINT, out / TRACE
    tcfg = replace(cfg.train, seed=cfg.seed)
    # validation splits the run into chunks; the schedule must follow the full length
    tcfg = replace(tcfg, lr_decay_every=tcfg.decay_every())

    params = state = adam = None
    if resume and ckpt.exists():
        params, net, arrays, meta = load_params(ckpt)
        if meta.get("task") != cfg.task:
            raise ContractError(f"checkpoint was trained for {meta.get('task')!r}, config says {cfg.task!r}")
        state = state_from_meta(meta["state"])
        adam = arrays
        emb = _embedding_from(arrays, meta)
        log.info("resuming from iteration %d", state.iteration)
    else:
        net = _network_for(cfg, ds)
        emb = _fit_embedding(cfg, ds)
    ds.prepare(cfg.hyperparams, emb)

    rows, val_rows = [], []
    chunk = cfg.val_every if cfg.val_every > 0 else tcfg.iters
    done = state.iteration if state else 0
    while True:
        stop = min(tcfg.iters, done + chunk)
        result = train(ds, net, replace(tcfg, iters=stop), cfg.hyperparams, params, state, adam, snapshot_dir=out)
        rows += result.trace
        params, state, adam = result.params, result.state, result.optimizer.state_arrays()
        done = state.iteration
        if cfg.val_every > 0 and result.trace:
            v = _validate(params, net, emb, cfg)
            if v is not None:
                val_rows.append({"iteration": done, **v})
                log.info("iter %d validation psnr %.3f ssim %.4f", done, v["psnr"], v["ssim"])
        if done >= tcfg.iters:
            break

    _save(ckpt, result, net, cfg, emb)
    write_trace(trace_path, rows, append=resume and trace_path.exists())
    if val_rows:
        with (out / "validation.csv").open("a" if resume else "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["iteration", "psnr", "ssim"])
            if not resume or f.tell() == 0:
                w.writeheader()
            w.writerows(val_rows)
    full = read_trace(trace_path)
    if full:
        plot_loss_trace(full, out / "loss_trace.png", pixels=int(np.prod(ds.y.shape[1:])))
    return ckpt


# ---------------------------------------------------------------- infer / eval


def _load_model(cfg: ExperimentConfig, checkpoint):
    path = Path(checkpoint) if checkpoint else cfg.out / CHECKPOINT
    if not path.exists():
        raise ContractError(f"checkpoint {path} not found; run 'virnet train' first")
    params, net, arrays, meta = load_params(path)
    if meta.get("task") != cfg.task:
        raise ContractError(f"checkpoint was trained for {meta.get('task')!r}, config says {cfg.task!r}")
    return params, net, _embedding_from(arrays, meta)


def _preview(img: np.ndarray) -> np.ndarray:
    top = float(np.max(img))
    return img / top if top > 0 else img


def cmd_infer(cfg: ExperimentConfig, input_path, checkpoint=None, kernel: str | None = None) -> dict[str, Path]:
    if input_path is None:
        raise ConfigError("infer needs --input")
    params, net, emb = _load_model(cfg, checkpoint)
    y = read_image(input_path)
    if y.ndim == 3:
        y = y.mean(axis=0) if y.shape[0] == 3 else y[0]
    k = None
    if net.t > 0:
        if kernel is None:
            raise ConfigError("super-resolution inference needs --kernel (e.g. 'iso:d=1.6')")
        k = make_kernel(KernelSpec.parse(kernel))
    res = restore(y, params, net, k, emb)
    out = cfg.out / "infer"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(input_path).stem
    paths = {"restored": out / f"{stem}_restored.virt", "variance": out / f"{stem}_variance.virt",
             "restored_preview": out / f"{stem}_restored.pgm", "variance_preview": out / f"{stem}_variance.pgm"}
    write_virt(paths["restored"], res.image)
    write_virt(paths["variance"], res.variance)
    write_pnm(paths["restored_preview"], res.image)
    write_pnm(paths["variance_preview"], _preview(res.variance))
    return paths


def _eval_one(ds: Dataset, i: int, params, net, emb) -> dict:
    y, x = ds.y[i, 0], ds.x[i, 0]
    k = ds.kernels[i] if ds.kernels is not None else None
    res = restore(y, params, net, k, emb)
    true_std = ds.noise_maps[i, 0] if ds.noise_maps is not None else None
    if true_std is not None and (np.ptp(true_std) == 0 or np.ptp(res.variance) == 0):
        true_std = None
    r = report(res.image, x, res.variance if true_std is not None else None, true_std)
    return {"index": i, "psnr": r.psnr, "ssim": r.ssim,
            "psnr_input": psnr(y, x) if y.shape == x.shape else None,
            "variance_corr": r.variance_corr, "_res": res}


EVAL_FIELDS = ["index", "psnr", "ssim", "psnr_input", "variance_corr"]


def _mean(rows, key):
    vals = [r[key] for r in rows if r[key] is not None]
    return float(np.mean(vals)) if vals else None


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, manifest=None, panels: int = 4) -> Path:
    from .report import plot_metric_summary, plot_restoration_panels

    path = Path(manifest) if manifest else cfg.test_manifest_path()
    if not path.exists():
        raise ContractError(f"evaluation manifest {path} not found")
    for entry in load_manifest(path)["samples"]:
        if "clean" not in entry:
            raise ContractError("evaluation needs ground truth for every sample")
    ds = load_dataset(path)
    params, net, emb = _load_model(cfg, checkpoint)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = list(pool.map(lambda i: _eval_one(ds, i, params, net, emb), range(len(ds))))

    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    with csv_path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EVAL_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (r[k] if k == "index" else repr(float(r[k]))))
                        for k in EVAL_FIELDS})
        agg = {k: _mean(rows, k) for k in EVAL_FIELDS[1:]}
        w.writerow({"index": "mean", **{k: "" if v is None else repr(v) for k, v in agg.items()}})
    log.info("mean PSNR %.3f dB, SSIM %.4f over %d images", agg["psnr"], agg["ssim"], len(rows))

    samples = []
    for r in rows[:panels]:
        i = r["index"]
        true = ds.noise_maps[i, 0] if ds.noise_maps is not None else None
        samples.append({"corrupted": ds.y[i, 0], "restored": r["_res"].image, "clean": ds.x[i, 0],
                        "pred_std": np.sqrt(r["_res"].variance), "true_std": true, "psnr": r["psnr"]})
    if samples:
        plot_restoration_panels(samples, out / "panels.png")
        plot_metric_summary(rows, out / "psnr_scatter.png")
    return csv_path


# ---------------------------------------------------------------- verify


def cmd_verify(seed: int = 0, out: Path | None = None, **overrides) -> list[verify.CheckResult]:
    results = verify.run_all(seed=seed, **overrides)
    print(verify.format_report(results))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        verify.write_report(results, out / "verify.csv")
    return results


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="virnet", description="Variational image restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        return sp

    common(sub.add_parser("synth", help="generate train/test datasets"))
    t = common(sub.add_parser("train", help="train SNet and RNet"))
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    i = common(sub.add_parser("infer", help="restore one image"))
    i.add_argument("--input", help="VIRT, PGM or PPM image")
    i.add_argument("--checkpoint")
    i.add_argument("--kernel", help="blur kernel for SR models, e.g. 'aniso:theta=0.5,l1=4,l2=1'")
    e = common(sub.add_parser("eval", help="metrics on a manifest"))
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    common(sub.add_parser("verify", help="run the oracle battery"), config_required=False)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            seed = args.seed
            if args.config:
                cfg = _config(args)
                seed = cfg.seed if seed is None else seed
            out = Path(args.out) if args.out else None
            results = cmd_verify(seed or 0, out)
            return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID
        cfg = _config(args)
        if args.command == "synth":
            for split, path in cmd_synth(cfg).items():
                print(f"{split}: {path}")
        elif args.command == "train":
            print(cmd_train(cfg, resume=args.resume))
        elif args.command == "infer":
            for name, path in cmd_infer(cfg, args.input, args.checkpoint, args.kernel).items():
                print(f"{name}: {path}")
        elif args.command == "eval":
            print(cmd_eval(cfg, args.checkpoint, args.manifest))
    except NumericalFailure as exc:
        print(f"virnet: numerical failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(f"virnet: snapshot written to {exc.snapshot}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"virnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (VirnetError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"virnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
