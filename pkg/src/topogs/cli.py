"""Command-line driver.

Every command works inside one output directory (--out):

    scene/        gen         synthetic sequence
    motion/       init, track per-frame motion checkpoints + reports.jsonl
    appearance/   appearance  per-frame appearance sets + link tables
    maps/         pack        TGM1 attribute maps per layer (+ optional rasters)
    stream/       encode      TGC1 bitstreams per layer + info.json
    decoded/      decode      maps reconstructed from the bitstreams
    renders/      render      8-bit PNG renders per stage
    eval/         eval        metrics.tsv, metrics.json, summary.txt

The resolved configuration is written to <out>/config.yaml by every command
and read back by later ones unless --config/--preset/--set say otherwise.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import codec, packing
from .appearance import load_appearance_frames, read_links, run_appearance
from .config import PipelineConfig, load_config, save_config
from .core import ConfigError, DivergenceError, StageOrderError, TopoGSError
from .metrics import psnr, ssim
from .registration import JsonLog, init_first_frame, load_state, read_glut, save_state, track_frame, write_glut
from .scenegen import generate, load_sequence, save_sequence
from .splat import save_png, splat

log = logging.getLogger("topogs")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_STAGE, EXIT_DIVERGENCE = 0, 1, 2, 3, 4
LAYERS = ("motion", "appearance")


# ---------------------------------------------------------------------------
# stage inputs

def _need(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise StageOrderError(f"{stage} needs {path} (run `{producer}` first)")
    return path


def _scene(out: Path):
    return load_sequence(_need(out / "scene", "this command", "gen"))


def _motion_frames(out: Path):
    d = _need(out / "motion", "this command", "init")
    return sorted(p for p in d.glob("frame_*") if p.is_dir())


def _motion_states(out: Path, n_frames: int, stage: str):
    d = _need(out / "motion", stage, "init")
    states = []
    for t in range(1, n_frames + 1):
        p = d / f"frame_{t:04d}"
        if not p.is_dir():
            raise StageOrderError(f"{stage} needs motion checkpoint {p} (run `track` first)")
        states.append(load_state(p))
    return states


def _appearance(out: Path, n_frames: int, stage: str):
    d = _need(out / "appearance", stage, "appearance")
    _need(d / "links.tal", stage, "appearance")
    for t in range(1, n_frames + 1):
        _need(d / f"frame_{t:04d}.tgs", stage, "appearance")
    return load_appearance_frames(d, n_frames)


def _final_glut(out: Path, n_frames: int, stage: str):
    p = out / "motion" / f"frame_{n_frames:04d}"
    if not p.is_dir():
        raise StageOrderError(f"{stage} needs the last motion checkpoint {p} (run `track` first)")
    return load_state(p).glut


def _plan(cfg: PipelineConfig, glut, n_frames: int):
    return packing.build_layout(glut, n_frames, cfg.packing.sorting, cfg.packing.morton_bits,
                                cfg.appearance.k, cfg.packing.persistent_fraction)


def _layers_present(out: Path):
    return [l for l in LAYERS if (out / "maps" / l).is_dir()]


# ---------------------------------------------------------------------------
# commands

def cmd_gen(cfg: PipelineConfig, out: Path, args):
    seq = generate(cfg.scene)
    save_sequence(seq, out / "scene")
    log.info("scene: %d frames, %d views, %d events", seq.n_frames, len(seq.cameras), len(seq.events))


def cmd_init(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    jl = JsonLog(out / "motion" / "init_log.jsonl")
    state = init_first_frame(seq, cfg.registration, jl)
    save_state(out / "motion" / "frame_0001", state)
    (out / "motion" / "reports.jsonl").write_text("")
    log.info("init: %d motion Gaussians", len(state.gaussians))


def cmd_track(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    done = _motion_frames(out)
    if not done or done[0].name != "frame_0001":
        raise StageOrderError(f"track needs {out / 'motion' / 'frame_0001'} (run `init` first)")
    last = len(done)
    for i, p in enumerate(done, start=1):
        if p.name != f"frame_{i:04d}":
            raise StageOrderError(f"motion checkpoints are not contiguous at {p}")
    end = seq.n_frames if args.frames is None else min(args.frames, seq.n_frames)
    state = load_state(done[-1])
    reports = out / "motion" / "reports.jsonl"
    kept = reports.read_text().splitlines() if reports.exists() else []
    kept = [l for l in kept if l and json.loads(l)["frame"] <= last]
    reports.write_text("".join(l + "\n" for l in kept))
    jl = JsonLog(out / "motion" / "track_log.jsonl")
    for t in range(last + 1, end + 1):
        state, rep = track_frame(state, t, seq, cfg.registration, jl)
        save_state(out / "motion" / f"frame_{t:04d}", state)
        with open(reports, "a") as f:
            f.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
        log.info("frame %d: %d alive, +%d inserted, %d pruned", t, rep.alive, rep.inserted, rep.pruned)


def cmd_appearance(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    states = _motion_states(out, seq.n_frames, "appearance")
    jl = JsonLog(out / "appearance" / "log.jsonl")
    res = run_appearance(seq, states, cfg.appearance, out_dir=out / "appearance", log=jl,
                         progress=lambda t, i: log.info("appearance frame %d: %d active", t, i["active"]))
    log.info("appearance: %d links", len(res.links))


def _pack_layer(cfg, out, plan, glut, frames, layer, rasters):
    maps = packing.pack_sequence(frames, plan, layer)
    d = out / "maps" / layer
    d.mkdir(parents=True, exist_ok=True)
    for m in maps:
        packing.write_maps(d / f"frame_{m.frame:04d}.tgm", m)
    if rasters:
        packing.export_rasters(maps, out / "maps" / "rasters", layer)
    return maps


def cmd_pack(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    T = seq.n_frames
    states = _motion_states(out, T, "pack")
    glut = states[-1].glut
    plan = _plan(cfg, glut, T)
    motion = _pack_layer(cfg, out, plan, glut, [s.gaussians for s in states], "motion", args.rasters)
    info = {"rows": plan.rows, "cols": plan.cols, "slots": plan.total_slots, "persistent": plan.n_persistent,
            "sorting": plan.sorting, "hash": plan.hash().hex(), "morton_clamped": plan.clamped,
            "quantizer_clamped": {"motion": sum(m.clamped for m in motion)}}
    if (out / "appearance" / "links.tal").exists():
        app = _appearance(out, T, "pack")
        maps = _pack_layer(cfg, out, plan, glut, app, "appearance", args.rasters)
        info["quantizer_clamped"]["appearance"] = sum(m.clamped for m in maps)
    (out / "maps" / "plan.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    log.info("pack: grid %dx%d, %d persistent of %d", plan.rows, plan.cols, plan.n_persistent, plan.total_slots)


def _read_layer_maps(out: Path, layer: str, T: int, sub="maps"):
    d = out / sub / layer
    return [packing.read_maps(_need(d / f"frame_{t:04d}.tgm", "this command", "pack")) for t in range(1, T + 1)]


def cmd_encode(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    T = seq.n_frames
    layers = _layers_present(out)
    if not layers:
        raise StageOrderError(f"encode needs {out / 'maps'} (run `pack` first)")
    glut = _final_glut(out, T, "encode")
    d = out / "stream"
    d.mkdir(parents=True, exist_ok=True)
    info = {}
    for layer in layers:
        maps = _read_layer_maps(out, layer, T)
        data, si = codec.encode(maps, glut, cfg.codec.qp, cfg.codec.gop, layer, return_info=True)
        codec.write_stream(d / f"{layer}.tgc", data)
        info[layer] = {"bytes": len(data), "raw_bytes": codec.raw_size(maps), "header_bytes": si.header_bytes,
                       "frame_bytes": si.frame_bytes, "frame_types": si.frame_types}
        log.info("encode %s: %d bytes (raw %d, ratio %.1fx)", layer, len(data), info[layer]["raw_bytes"],
                 info[layer]["raw_bytes"] / len(data))
    (d / "info.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def cmd_decode(cfg: PipelineConfig, out: Path, args):
    d = _need(out / "stream", "decode", "encode")
    streams = [d / f"{l}.tgc" for l in LAYERS if (d / f"{l}.tgc").exists()]
    if not streams:
        raise StageOrderError(f"decode needs a .tgc stream in {d} (run `encode` first)")
    for p in streams:
        dec = codec.read_stream(p)
        od = out / "decoded" / dec.layer
        od.mkdir(parents=True, exist_ok=True)
        for m in dec.maps:
            packing.write_maps(od / f"frame_{m.frame:04d}.tgm", m)
        if dec.glut is not None:
            write_glut(out / "decoded" / "glut.tgl", dec.glut)
        log.info("decode %s: %d frames", dec.layer, len(dec.maps))


def _decoded_sets(cfg, out: Path, layer: str, T: int):
    glut = read_glut(_need(out / "decoded" / "glut.tgl", "this command", "decode"))
    plan = _plan(cfg, glut, T)
    sets = []
    for m in _read_layer_maps(out, layer, T, sub="decoded"):
        sets.append(packing.unpack_frame(m, plan, glut, layer).live_set())
    return sets


def _stage_sets(cfg, out: Path, stage: str, seq):
    T = seq.n_frames
    if stage == "gt":
        return list(seq.frames)
    if stage == "motion":
        return [s.gaussians for s in _motion_states(out, T, "render")]
    if stage == "appearance":
        return _appearance(out, T, "render")
    if stage.startswith("decoded-"):
        return _decoded_sets(cfg, out, stage.split("-", 1)[1], T)
    raise ConfigError(f"unknown stage {stage!r}")


def _views(cfg, seq):
    return list(cfg.eval.views) or list(range(len(seq.cameras)))


def cmd_render(cfg: PipelineConfig, out: Path, args):
    seq = _scene(out)
    sets = _stage_sets(cfg, out, args.stage, seq)
    d = out / "renders" / args.stage
    d.mkdir(parents=True, exist_ok=True)
    for t, gs in enumerate(sets, start=1):
        for v in _views(cfg, seq):
            save_png(d / f"f{t:04d}_v{v:02d}.png", splat(gs, seq.cameras[v]).color)
    log.info("render %s: %d frames", args.stage, len(sets))


METRIC_COLUMNS = ("frame", "stage", "psnr", "ssim", "motion_alive", "appearance_active", "inserted", "pruned",
                  "stream_bytes", "raw_bytes", "compression_ratio")


def evaluate(cfg: PipelineConfig, out: Path):
    """Rows of per-frame metrics for every stage available in `out`, plus totals."""
    seq = _scene(out)
    T = seq.n_frames
    stages = ["motion"]
    if (out / "appearance" / "links.tal").exists():
        stages.append("appearance")
    for layer in LAYERS:
        if (out / "decoded" / layer).is_dir():
            stages.append(f"decoded-{layer}")
    sets = {s: _stage_sets(cfg, out, s, seq) for s in stages}
    reports = {}
    rp = out / "motion" / "reports.jsonl"
    if rp.exists():
        for line in rp.read_text().splitlines():
            if line:
                r = json.loads(line)
                reports[r["frame"]] = r
    sinfo = json.loads((out / "stream" / "info.json").read_text()) if (out / "stream" / "info.json").exists() else {}
    views = _views(cfg, seq)
    rows = []
    for s in stages:
        for t in range(1, T + 1):
            gs = sets[s][t - 1]
            p, q = [], []
            for v in views:
                img = splat(gs, seq.cameras[v]).color
                ref = seq.image(t, v)
                p.append(psnr(img, ref, cfg.eval.psnr_cap))
                q.append(ssim(img, ref))
            rep = reports.get(t, {})
            # stream columns describe the layer the stage renders from
            layer = s.split("-", 1)[1] if s.startswith("decoded-") else s
            sb = rb = cr = ""
            if layer in sinfo:
                sb = sinfo[layer]["frame_bytes"][t - 1] + (sinfo[layer]["header_bytes"] if t == 1 else 0)
                rb = sinfo[layer]["raw_bytes"] // T
                cr = round(rb / sb, 4)
            rows.append({"frame": t, "stage": s, "psnr": round(float(np.mean(p)), 4), "ssim": round(float(np.mean(q)), 5),
                         "motion_alive": len(sets["motion"][t - 1]),
                         "appearance_active": len(sets["appearance"][t - 1]) if "appearance" in sets else "",
                         "inserted": rep.get("inserted", 0), "pruned": rep.get("pruned", 0),
                         "stream_bytes": sb, "raw_bytes": rb, "compression_ratio": cr})
    totals = {}
    for layer, info in sinfo.items():
        totals[layer] = {"stream_bytes": info["bytes"], "raw_bytes": info["raw_bytes"],
                         "compression_ratio": round(info["raw_bytes"] / info["bytes"], 4)}
    return rows, totals


def cmd_eval(cfg: PipelineConfig, out: Path, args):
    rows, totals = evaluate(cfg, out)
    d = out / "eval"
    d.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(METRIC_COLUMNS)]
    lines += ["\t".join(str(r[c]) for c in METRIC_COLUMNS) for r in rows]
    (d / "metrics.tsv").write_text("\n".join(lines) + "\n")
    (d / "metrics.json").write_text(json.dumps({"rows": rows, "totals": totals,
                                                "note": "LPIPS not computed (needs a pretrained network)"},
                                               indent=1, sort_keys=True))
    summary = []
    for s in dict.fromkeys(r["stage"] for r in rows):
        sel = [r for r in rows if r["stage"] == s]
        summary.append(f"{s:20s} PSNR {np.mean([r['psnr'] for r in sel]):7.3f} dB  "
                       f"SSIM {np.mean([r['ssim'] for r in sel]):.4f}")
    for layer, tt in totals.items():
        summary.append(f"stream {layer:13s} {tt['stream_bytes']} bytes, raw {tt['raw_bytes']} bytes, "
                       f"ratio {tt['compression_ratio']:.2f}x")
    summary.append("LPIPS not computed (needs a pretrained network)")
    (d / "summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic sequence"),
    "init": (cmd_init, "initialize motion Gaussians on frame 1"),
    "track": (cmd_track, "track motion Gaussians through the sequence"),
    "appearance": (cmd_appearance, "derive and fine-tune appearance Gaussians"),
    "pack": (cmd_pack, "pack attributes into 2D maps"),
    "encode": (cmd_encode, "compress packed maps"),
    "decode": (cmd_decode, "decompress bitstreams"),
    "render": (cmd_render, "render a stage to PNG"),
    "eval": (cmd_eval, "write the metrics report"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="topogs", description="Topology-aware dynamic Gaussian pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", required=True, type=Path, help="working directory")
        p.add_argument("--config", type=Path, help="YAML config (defaults to <out>/config.yaml if present)")
        p.add_argument("--preset", choices=("full", "desk"), help="start from a preset")
        p.add_argument("--seed", type=int, help="pipeline seed")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. codec.qp=25 (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "track":
            p.add_argument("--frames", type=int, help="track up to this frame")
        if name == "pack":
            p.add_argument("--rasters", action="store_true", help="also export 16-bit PNG rasters")
        if name == "render":
            p.add_argument("--stage", default="appearance",
                           choices=("gt", "motion", "appearance", "decoded-motion", "decoded-appearance"))
    return ap


def resolve_config(args) -> PipelineConfig:
    path = args.config
    stored = args.out / "config.yaml"
    if path is None and args.preset is None and stored.exists():
        path = stored
    return load_config(path, args.preset, args.overrides, args.seed)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        save_config(args.out / "config.yaml", cfg)
        COMMANDS[args.command][0](cfg, args.out, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageOrderError as e:
        print(f"stage error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (TopoGSError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
