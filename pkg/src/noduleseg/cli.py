"""Command-line entry points.

    noduleseg gen-data   --out data/ --cases 200 --seed 0
    noduleseg train      --data data/ --out run/ [--stage1-only]
    noduleseg eval       --data data/ --model run/model.json --out run/
    noduleseg segment    volume.json --model run/model.json --out out/
    noduleseg correct    volume.json --points z0,y0,x0,z1,y1,x1 --model ... --out out/
    noduleseg gradcheck  [--bits 32|64|both]
    noduleseg fieldsweep --p 0,0.5,1,2 --out maps/
    noduleseg serve      --model run/model.json --port 8080

Exit codes: 0 success, 2 validation/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluate import prepare_cases, run_eval, write_reports
from .field import FieldParams, PointPair, attraction_map
from .interact import validate_user_points
from .loss import LossConfig
from .net import WNet, WNetConfig, grad_check, load_checkpoint, save_checkpoint
from .service import ServiceState, serve_forever
from .synth import generate_dataset, load_dataset, save_dataset
from .train import TrainConfig, train_stage1, train_stage2
from .volgrid import (
    ScalarVolume,
    SoftMask,
    VolumeFormatError,
    VolumeGeometry,
    load_volume,
    resample_iso,
    save_volume,
    threshold,
)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip() != ""]


def _cmd_gen_data(args) -> int:
    radius = _floats(args.radius_mm)
    mix = _floats(args.texture_mix)
    if len(radius) != 2 or len(mix) != 3:
        raise ValueError("--radius-mm needs lo,hi and --texture-mix needs three weights")
    cases = generate_dataset(args.cases, tuple(radius), tuple(mix),
                             seed=args.seed, noise_sigma=args.noise)
    save_dataset(cases, args.out)
    print(f"wrote {len(cases)} cases to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig(seed=args.seed)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        loss_over = overrides.pop("loss", None)
        cfg = replace(cfg, **overrides)
        if loss_over:
            cfg = replace(cfg, loss=LossConfig(**loss_over))
    return cfg


def _cmd_train(args) -> int:
    cases = load_dataset(args.data)
    if not cases:
        raise ValueError(f"no cases found under {args.data}")
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    net = WNet(WNetConfig(input_side=args.side, base_filters=args.base_filters,
                          depth=args.depth), seed=cfg.seed)
    prepared = prepare_cases(cases, args.side)
    net, hist1 = train_stage1(prepared, cfg, net=net, log_path=log_path)
    print(f"stage 1: {len(hist1)} epochs, best val loss "
          f"{min(h['val_loss'] for h in hist1):.4f}")
    if not args.stage1_only:
        net, hist2 = train_stage2(prepared, net, cfg, log_path=log_path)
        print(f"stage 2: {len(hist2)} epochs, best val loss "
              f"{min(h['val_loss'] for h in hist2):.4f}")
    ckpt = save_checkpoint(net, out / "model")
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_eval(args) -> int:
    cases = load_dataset(args.data)
    net = load_checkpoint(args.model)
    prepared = prepare_cases(cases, net.config.input_side)
    result = run_eval(net, prepared)
    csv_path, json_path = write_reports(result, args.out)
    s = result.summary
    print(f"nodules: {s['n_nodules']}  initial IoU {s['initial']['mean_iou']:.3f}  "
          f"corrected IoU {s['mean_iou']:.3f}  improved {s['pct_improved']:.0f}%")
    print(f"reports: {csv_path}, {json_path}")
    return 0


def _cmd_segment(args) -> int:
    net = load_checkpoint(args.model)
    volume = load_volume(args.volume)
    if not isinstance(volume, ScalarVolume):
        raise ValueError("segment expects a scalar volume")
    side = net.config.input_side
    model_vol = volume if volume.geometry.dims == (side,) * 3 else \
        resample_iso(volume, (side,) * 3)
    soft = net.forward_block1(model_vol)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.volume).stem
    save_volume(soft, out / f"{stem}_soft")
    save_volume(threshold(soft, 0.5), out / f"{stem}_mask")
    print(f"wrote {stem}_soft and {stem}_mask to {out}")
    return 0


def _cmd_correct(args) -> int:
    net = load_checkpoint(args.model)
    volume = load_volume(args.volume)
    if not isinstance(volume, ScalarVolume):
        raise ValueError("correct expects a scalar volume")
    coords = _floats(args.points)
    if len(coords) != 6:
        raise ValueError("--points needs z0,y0,x0,z1,y1,x1")
    side = net.config.input_side
    model_vol = volume if volume.geometry.dims == (side,) * 3 else \
        resample_iso(volume, (side,) * 3)
    scale = [side / d for d in volume.geometry.dims]
    p0 = tuple((c + 0.5) * s - 0.5 for c, s in zip(coords[:3], scale))
    p1 = tuple((c + 0.5) * s - 0.5 for c, s in zip(coords[3:], scale))
    pair = validate_user_points(p0, p1, model_vol.geometry)
    if args.prior:
        prior = load_volume(args.prior)
        if not isinstance(prior, SoftMask):
            raise ValueError("--prior must be a soft mask")
        if prior.geometry.dims != model_vol.geometry.dims:
            prior = SoftMask(model_vol.geometry, np.clip(resample_iso(
                ScalarVolume(prior.geometry, prior.values),
                model_vol.geometry.dims).values, 0, 1))
    else:
        prior = net.forward_block1(model_vol)
    wmap = attraction_map(pair, FieldParams(), model_vol.geometry)
    corrected = net.forward_block2(model_vol, prior, wmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.volume).stem
    save_volume(corrected, out / f"{stem}_corrected_soft")
    save_volume(threshold(corrected, 0.5), out / f"{stem}_corrected_mask")
    print(f"wrote {stem}_corrected_soft and {stem}_corrected_mask to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    gates = {32: 1e-3, 64: 1e-6}
    bits_list = [32, 64] if args.bits == "both" else [int(args.bits)]
    ok = True
    for bits in bits_list:
        report = grad_check(seed=args.seed, bits=bits)
        passed = report["max_rel_err"] < gates[bits]
        ok = ok and passed
        print(f"{bits}-bit: max rel err {report['max_rel_err']:.3e} "
              f"(gate {gates[bits]:.0e}) {'PASS' if passed else 'FAIL'} "
              f"[{report['seconds']:.1f}s]")
        for ltype, entry in sorted(report["per_type"].items()):
            print(f"  {ltype:>15}: {entry['max_rel_err']:.3e} over {entry['n']} coords")
        if report["stage2_block1_grad_abs_sum"] != 0.0:
            print("  WARNING: frozen block-1 gradients not zero")
            ok = False
    return 0 if ok else 1


def _cmd_fieldsweep(args) -> int:
    ps = _floats(args.p)
    side = args.side
    geo = VolumeGeometry((side, side, side))
    quarter, half = side // 4, side // 2
    pair = PointPair((half, half, quarter), (half, half, side - 1 - quarter))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in ps:
        wmap = attraction_map(pair, FieldParams(decay_p=p), geo)
        mid = wmap.values[half][None]
        tag = f"{p:g}".replace(".", "_")
        save_volume(SoftMask(VolumeGeometry((1, side, side)), mid), out / f"map_p{tag}")
        print(f"p={p:g}: peak {wmap.values.max():.3f}, mid-slice saved as map_p{tag}")
    return 0


def _cmd_serve(args) -> int:
    net = load_checkpoint(args.model)
    state = ServiceState.from_net(net)
    serve_forever(state, args.host, args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noduleseg",
                                     description="interactive nodule segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--radius-mm", default="1,8")
    g.add_argument("--texture-mix", default="0.06,0.14,0.80",
                   help="non-solid,sub-solid,solid fractions")
    g.add_argument("--noise", type=float, default=0.03)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run the two-stage training schedule")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", help="JSON file with TrainConfig overrides")
    t.add_argument("--stage1-only", action="store_true")
    t.add_argument("--side", type=int, default=32)
    t.add_argument("--base-filters", type=int, default=8)
    t.add_argument("--depth", type=int, default=3)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="run both evaluation experiments, write CSV + JSON")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("segment", help="automatic segmentation of one IWV1 volume")
    s.add_argument("volume")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_segment)

    c = sub.add_parser("correct", help="point-guided correction of one IWV1 volume")
    c.add_argument("volume")
    c.add_argument("--points", required=True, help="z0,y0,x0,z1,y1,x1 in volume voxels")
    c.add_argument("--model", required=True)
    c.add_argument("--prior", help="initial soft mask (defaults to the automatic block)")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=_cmd_correct)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    gc.add_argument("--bits", choices=["32", "64", "both"], default="both")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gradcheck)

    f = sub.add_parser("fieldsweep", help="emit mid-slice weight maps for a list of decays")
    f.add_argument("--p", default="0,0.5,1,2")
    f.add_argument("--side", type=int, default=64)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=_cmd_fieldsweep)

    v = sub.add_parser("serve", help="start the HTTP correction service")
    v.add_argument("--model", required=True)
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--host", default="127.0.0.1")
    v.set_defaults(fn=_cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, VolumeFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failure contract
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
