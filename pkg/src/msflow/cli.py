"""Command-line entry point: train, eval, infer, viz, selftest.

Training runs on synthetic data with exact ground truth, logs
``step<TAB>name<TAB>value`` records, renders curve figures next to the logs
and writes npz checkpoints plus a JSON run manifest whose id is a hash of
everything that determines the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import report, selftest
from .config import (
    ConfigError,
    IterationSchedule,
    LossConfig,
    ModelConfig,
    _parse_value,
    load_configs,
)
from .data import (
    PATTERNS,
    WARPS,
    SyntheticSpec,
    flow_to_color,
    generate,
    read_flo,
    read_image,
    write_flo,
    write_image,
)
from .losses import epe, fl_rate, format_metrics, schedule_weights, total_loss
from .pipeline import MultiScaleFlowNet, load_checkpoint, save_checkpoint

CONFIG_KEYS = [f.name for f in fields(ModelConfig)] + \
    [f.name for f in fields(IterationSchedule)] + [f.name for f in fields(LossConfig)]


class TrainingDiverged(RuntimeError):
    pass


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    group = parser.add_argument_group("config overrides (mirror config-file keys)")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None, metavar="V")


def _add_dataset_flags(parser: argparse.ArgumentParser, default_samples: int):
    group = parser.add_argument_group("synthetic dataset")
    group.add_argument("--pattern", choices=PATTERNS, default="blobs")
    group.add_argument("--warp", choices=WARPS, default="smooth-random")
    group.add_argument("--max-displacement", type=float, default=8.0)
    group.add_argument("--data-seed", type=int, default=0)
    group.add_argument("--num-samples", type=int, default=default_samples)
    group.add_argument("--size", type=str, default="96x96", help="HxW, divisible by the coarsest stride")


def _parse_size(text: str):
    try:
        h, w = (int(part) for part in text.lower().split("x"))
        return h, w
    except ValueError:
        raise ConfigError("size", f"expected HxW, got {text!r}")


def _configs_from_args(args):
    overrides = {}
    for key in CONFIG_KEYS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            overrides[key] = _parse_value(key, raw)
    return load_configs(args.config, overrides)


def _dataset_from_args(args) -> dict:
    return {
        "pattern": args.pattern,
        "warp": args.warp,
        "max_displacement": args.max_displacement,
        "seed": args.data_seed,
        "num_samples": args.num_samples,
        "size": list(_parse_size(args.size)),
    }


class SyntheticDataset:
    """Deterministic bank of generated samples, materialised lazily."""

    def __init__(self, spec: dict):
        self.spec = spec
        self.size = tuple(spec["size"])
        self.num_samples = int(spec["num_samples"])
        self._cache = {}

    def sample(self, index: int):
        index = index % self.num_samples
        if index not in self._cache:
            self._cache[index] = generate(
                SyntheticSpec(
                    pattern=self.spec["pattern"],
                    warp=self.spec["warp"],
                    max_displacement=self.spec["max_displacement"],
                    seed=self.spec["seed"] + index,
                ),
                self.size,
            )
        return self._cache[index]

    def batch(self, start: int, batch_size: int, dtype):
        samples = [self.sample(start + i) for i in range(batch_size)]
        image1 = torch.stack([torch.from_numpy(s.image1) for s in samples]).to(dtype)
        image2 = torch.stack([torch.from_numpy(s.image2) for s in samples]).to(dtype)
        gt = torch.stack([torch.from_numpy(s.gt_flow) for s in samples]).to(dtype)
        valid = torch.stack([torch.from_numpy(s.valid) for s in samples])
        return image1, image2, gt, valid


def make_run_id(payload: dict) -> str:
    """Stable short id from everything that determines a run."""
    canonical = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def run_training(cfg, sched, loss_cfg, dataset_spec, *, steps, batch_size, lr, weight_decay,
                 clip, seed, out_dir, checkpoint_every, target_epe, float64, deterministic,
                 loss_scope, log_every=1):
    """Optimise the total loss over generated batches; returns a summary dict.

    Writes metrics.tsv, checkpoint.npz, manifest.json and training_curves.png
    into out_dir.  Raises TrainingDiverged on non-finite loss.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = torch.float64 if float64 else torch.float32
    if deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)

    dataset = SyntheticDataset(dataset_spec)
    model = MultiScaleFlowNet(cfg).to(dtype)
    schedule = schedule_weights(loss_cfg.gamma, sched.train_iters)
    if loss_scope == "finest":
        schedule = schedule_weights(loss_cfg.gamma, (sched.train_iters[-1],))

    run_config = {
        "model_config": {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)},
        "schedule": {f.name: getattr(sched, f.name) for f in fields(IterationSchedule)},
        "loss": {f.name: getattr(loss_cfg, f.name) for f in fields(LossConfig)},
        "dataset": dataset_spec,
        "steps": steps, "batch_size": batch_size, "lr": lr, "weight_decay": weight_decay,
        "clip": clip, "loss_scope": loss_scope, "float64": float64,
        "deterministic": deterministic, "target_epe": target_epe,
    }
    run_config_json = json.loads(json.dumps(run_config))  # normalise tuples to lists
    run_id = make_run_id({"config": run_config_json, "seed": seed})
    checkpoint_path = out_dir / "checkpoint.npz"
    metrics_path = out_dir / "metrics.tsv"
    manifest = {
        "run_id": run_id,
        "seed": seed,
        "config": run_config_json,
        "checkpoint": str(checkpoint_path),
        "metrics_log": str(metrics_path),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    optimizer = None
    lr_schedule = None
    if steps > 0:
        optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay, eps=1e-8)
        lr_schedule = torch.optim.lr_scheduler.OneCycleLR(
            optimizer, max_lr=lr, total_steps=steps, pct_start=0.05, anneal_strategy="linear"
        )

    rows = []
    last_epe = float("nan")
    last_step = 0
    with metrics_path.open("w", encoding="utf-8") as log:
        def emit(step, name, value):
            rows.append((step, name, value))
            log.write(f"{step}\t{name}\t{value}\n")
            log.flush()

        for step in range(1, steps + 1):
            image1, image2, gt, valid = dataset.batch((step - 1) * batch_size, batch_size, dtype)
            trace = model(image1, image2, iters=sched.train_iters)
            predictions = trace.predictions
            if loss_scope == "finest":
                predictions = predictions[-sched.train_iters[-1]:]
            loss = total_loss(predictions, gt, schedule, loss_cfg, valid_mask=valid)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()!r} at step {step} "
                    f"(lr {lr_schedule.get_last_lr()[0]:.3e}, run {run_id})"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
            optimizer.step()
            lr_schedule.step()

            last_epe = epe(trace.final.detach(), gt, valid)
            last_step = step
            if step % log_every == 0 or step == steps:
                emit(step, "loss", loss.item())
                emit(step, "epe", last_epe)
                emit(step, "lr", lr_schedule.get_last_lr()[0])
            if checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, extra={"run_id": run_id, "step": step})
            if target_epe is not None and last_epe < target_epe:
                emit(step, "early_stop_epe", last_epe)
                break

        if steps > 0:
            # Final-weight EPE on the last batch, so the log states what the
            # checkpoint actually achieves (the in-loop value trails by one
            # optimizer step).
            with torch.no_grad():
                final_trace = model(image1, image2, iters=sched.train_iters)
            last_epe = epe(final_trace.final, gt, valid)
            emit(last_step, "final_epe", last_epe)

    save_checkpoint(checkpoint_path, model, extra={"run_id": run_id, "step": last_step})
    if rows:
        report.save_training_curves(rows, out_dir / "training_curves.png")
    return {"run_id": run_id, "final_epe": last_epe, "checkpoint": checkpoint_path,
            "manifest": manifest, "model": model}


def run_evaluation(model, sched, dataset_spec, *, eval_iters=None, warm_start=False,
                   float64=False, out_dir=None, figures=2):
    """EPE/Fl over a synthetic dataset; optional warm-start chaining.

    Returns (aggregate metrics dict, per-sample rows).  When out_dir is set,
    writes metrics.tsv, an EPE histogram and flow panels for the first
    ``figures`` samples.
    """
    dtype = torch.float64 if float64 else torch.float32
    model = model.to(dtype).eval()
    iters = tuple(eval_iters) if eval_iters is not None else sched.eval_iters
    dataset = SyntheticDataset(dataset_spec)

    per_sample = []
    warm = None
    panels = []
    with torch.no_grad():
        for index in range(dataset.num_samples):
            sample = dataset.sample(index)
            image1 = torch.from_numpy(sample.image1)[None].to(dtype)
            image2 = torch.from_numpy(sample.image2)[None].to(dtype)
            gt = torch.from_numpy(sample.gt_flow)[None].to(dtype)
            valid = torch.from_numpy(sample.valid)[None]
            trace = model(image1, image2, iters=iters, warm=warm)
            if warm_start:
                warm = trace.final
            sample_epe = epe(trace.final, gt, valid)
            sample_fl = fl_rate(trace.final, gt, valid)
            per_sample.append({"index": index, "epe": sample_epe, "fl": sample_fl})
            if out_dir is not None and index < figures:
                panels.append((index, trace.final[0].cpu().numpy(), sample))

    aggregate = {
        "epe": float(np.mean([row["epe"] for row in per_sample])),
        "fl": float(np.mean([row["fl"] for row in per_sample])),
        "samples": len(per_sample),
        "eval_iters": ",".join(str(n) for n in iters),
        "warm_start": int(warm_start),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / "metrics.tsv").open("w", encoding="utf-8") as fh:
            fh.write(format_metrics(aggregate))
            for row in per_sample:
                fh.write(f"sample_{row['index']}_epe\t{row['epe']}\n")
        report.save_epe_histogram([row["epe"] for row in per_sample], out_dir / "epe_histogram.png")
        for index, pred, sample in panels:
            report.save_flow_panel(
                pred, gt_flow=sample.gt_flow, image=sample.image1,
                path=out_dir / f"sample_{index:03d}.png",
                title=f"sample {index}: epe {per_sample[index]['epe']:.3f} px",
            )
    return aggregate, per_sample


# --- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, sched, loss_cfg = _configs_from_args(args)
    summary = run_training(
        cfg, sched, loss_cfg, _dataset_from_args(args),
        steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, clip=args.clip, seed=args.seed,
        out_dir=args.out, checkpoint_every=args.checkpoint_every,
        target_epe=args.target_epe, float64=args.float64,
        deterministic=args.deterministic, loss_scope=args.loss_scope,
        log_every=args.log_every,
    )
    print(f"run {summary['run_id']}: final epe {summary['final_epe']:.4f} px")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    model_keys = {f.name for f in fields(ModelConfig)}
    requests_architecture = args.config is not None or any(
        getattr(args, f"cfg_{key}") is not None for key in model_keys
    )
    expected = _configs_from_args(args)[0] if requests_architecture else None
    model, _ = load_checkpoint(args.checkpoint, expected_cfg=expected)

    # Iteration schedule: default per-scale counts sized to the checkpoint,
    # overridden by the config file or the mirrored flags.
    values = {}
    if args.config is not None:
        from .config import load_config_file

        values.update(load_config_file(args.config))
    for key in ("train_iters", "eval_iters"):
        raw = getattr(args, f"cfg_{key}")
        if raw is not None:
            values[key] = _parse_value(key, raw)
    train_iters = values.get("train_iters", (4,) * model.cfg.num_scales)
    eval_iters = values.get("eval_iters", train_iters)
    sched = IterationSchedule(train_iters=tuple(train_iters), eval_iters=tuple(eval_iters))
    if len(sched.eval_iters) != model.cfg.num_scales:
        raise ConfigError(
            "eval_iters",
            f"needs one entry per scale ({model.cfg.num_scales}), got {len(sched.eval_iters)}",
        )

    aggregate, _ = run_evaluation(
        model, sched, _dataset_from_args(args),
        warm_start=args.warm_start,
        float64=args.float64, out_dir=args.out, figures=args.figures,
    )
    sys.stdout.write(format_metrics(aggregate))
    return 0


def cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    image1 = read_image(args.image1)
    image2 = read_image(args.image2)
    if image1.shape != image2.shape:
        raise ValueError(f"image sizes differ: {image1.shape[1:]} vs {image2.shape[1:]}")
    sched = IterationSchedule(
        train_iters=(4,) * model.cfg.num_scales, eval_iters=(4,) * model.cfg.num_scales
    )
    iters = _parse_value("eval_iters", args.iters) if args.iters else sched.eval_iters
    with torch.no_grad():
        trace = model.eval()(
            torch.from_numpy(image1)[None], torch.from_numpy(image2)[None], iters=iters
        )
    flow = trace.final[0].cpu().numpy().astype(np.float32)
    write_flo(args.out_flo, flow)
    if args.out_png:
        write_image(args.out_png, flow_to_color(flow))
    print(f"wrote {args.out_flo}" + (f" and {args.out_png}" if args.out_png else ""))
    return 0


def cmd_viz(args) -> int:
    flow = read_flo(args.flo)
    write_image(args.out, flow_to_color(flow, max_rad=args.max_rad))
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    names = args.only.split(",") if args.only else None
    results = selftest.run_checks(names)
    failed = [r for r in results if not r.passed]
    for result in results:
        if result.passed:
            print(f"PASS {result.name}")
        else:
            print(f"FAIL {result.name}: {result.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on synthetic data")
    _add_config_flags(p)
    _add_dataset_flags(p, default_samples=16)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--lr", type=float, default=4e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint-every", type=int, default=0, help="0 = final only")
    p.add_argument("--target-epe", type=float, default=None, help="early stop below this train EPE")
    p.add_argument("--float64", action="store_true")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--loss-scope", choices=("all", "finest"), default="all")
    p.add_argument("--log-every", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    _add_dataset_flags(p, default_samples=8)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--warm-start", action="store_true", help="chain over the ordered samples")
    p.add_argument("--float64", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--figures", type=int, default=2)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="estimate flow for an image pair")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("image1", type=Path)
    p.add_argument("image2", type=Path)
    p.add_argument("out_flo", type=Path)
    p.add_argument("out_png", type=Path, nargs="?", default=None)
    p.add_argument("--iters", default=None, help="comma-separated per-scale iterations")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("viz", help="render a .flo file with the flow color wheel")
    p.add_argument("flo", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--max-rad", type=float, default=None)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("selftest", help="run the built-in verification battery")
    p.add_argument("--only", default=None, help="comma-separated check names")
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
