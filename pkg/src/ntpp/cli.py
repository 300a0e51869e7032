"""Command-line entry point: ``ntpp <subcommand> [options]``.

Every subcommand accepts ``--config run.json``; explicit flags override file
values and the merged settings are written to ``config.json`` in the output
directory.  Exit status is 0 on success, 2 for usage/config errors and 1 for
runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .analysis import (METRICS, delta, report, segment, swap_eval,
                       write_json, write_report_csv, write_table_csv)
from .codec import load_streams, read_jsonl, save_streams, write_jsonl
from .errors import NTPPError
from .events import EventTrace
from .masking import build_mask
from .model import ModelConfig
from .streaming import ChunkConfig, bench_latency, channel_seeds, converse, generate_free
from .synth import DialogueProfile, generate, to_rvq
from .train import TrainHyper, load_checkpoint, save_checkpoint, train

log = logging.getLogger("ntpp")

STREAMS = "streams.jsonl"
TRACES = "traces.jsonl"
SAMPLES_INDEX = "samples.json"

DEFAULTS = {
    "gen-data": dict(profile=None, streams=100, frames=2400, depth=1, seed=None, silence_ms=200.0, out=None),
    "train": dict(data=None, out=None, d_model=64, n_layers=2, n_heads=4, vocab=None, max_steps=256,
                  lr=3e-3, steps=500, batch=8, grad_clip=1.0, context=32, seed=0),
    "sample": dict(ckpt=None, out=None, temp=[0.1, 0.5, 0.9], prompts=None, n=100, prompt_frames=40,
                   frames=80, seed=0),
    "converse": dict(ckpt=None, chunk=5, temp=0.8, seed=0, eager=False, timing=None, input=None, output=None),
    "analyze": dict(gen=None, ref=None, out=None, silence_ms=200.0),
    "swap-eval": dict(ckpt=None, data=None, out=None, n=100, prompt_frames=40, frames=80, temp=0.9,
                      seed=0, tied=False),
    "bench": dict(ckpt=None, out=None, rounds=20, chunk=5, warmup=2, temp=0.8, seed=0),
    "dump-mask": dict(T=4, D=1, out=None),
}
REQUIRED = {
    "gen-data": ("out",), "train": ("data", "out"), "sample": ("ckpt", "out"), "converse": ("ckpt",),
    "analyze": ("gen", "ref", "out"), "swap-eval": ("ckpt", "data", "out"), "bench": ("ckpt", "out"),
    "dump-mask": (),
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntpp", description="Next-token-pair prediction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        return p

    p = cmd("gen-data", "generate a synthetic dialogue corpus")
    p.add_argument("--profile", help="DialogueProfile JSON")
    p.add_argument("--streams", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--depth", type=int, help="lift to depth-D grids")
    p.add_argument("--seed", type=int, help="overrides the profile seed")
    p.add_argument("--silence-ms", type=float, dest="silence_ms")
    p.add_argument("--out")

    p = cmd("train", "train a model on a corpus")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-layers", type=int, dest="n_layers")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--vocab", type=int, help="content vocabulary (default: inferred from data)")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--grad-clip", type=float, dest="grad_clip")
    p.add_argument("--context", type=int, help="training window in frames")
    p.add_argument("--seed", type=int)

    p = cmd("sample", "free-running generation, one corpus per temperature")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--temp", type=float, action="append")
    p.add_argument("--prompts", help="corpus whose stream prefixes are used as prompts")
    p.add_argument("--n", type=int, help="number of samples (or prompts)")
    p.add_argument("--prompt-frames", type=int, dest="prompt_frames")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)

    p = cmd("converse", "chunk-wise conversation over NDJSON on stdin/stdout")
    p.add_argument("--ckpt")
    p.add_argument("--chunk", type=int, help="frames per chunk")
    p.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--eager", action="store_true", help="answer every frame as soon as it arrives")
    p.add_argument("--timing", help="CSV path for per-round timing")
    p.add_argument("--input", help="read user frames from this file instead of stdin")
    p.add_argument("--output", help="write assistant frames here instead of stdout")

    p = cmd("analyze", "turn-taking statistics and |delta| against a reference")
    p.add_argument("--gen")
    p.add_argument("--ref")
    p.add_argument("--out")
    p.add_argument("--silence-ms", type=float, dest="silence_ms")

    p = cmd("swap-eval", "speaker-swap robustness of continuations")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--prompt-frames", type=int, dest="prompt_frames")
    p.add_argument("--frames", type=int)
    p.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--tied", action="store_true", help="tie the two channel-embedding rows first")

    p = cmd("bench", "per-round latency and cache memory")
    p.add_argument("--ckpt")
    p.add_argument("--out")
    p.add_argument("--rounds", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--temp", type=float)
    p.add_argument("--seed", type=int)

    p = cmd("dump-mask", "print an attention mask as a 0/1 grid")
    p.add_argument("--T", type=int, dest="T")
    p.add_argument("--D", type=int, dest="D")
    p.add_argument("--out", help="also write the grid to this file")
    return parser


def merge_config(command: str, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        loaded = {k.replace("-", "_"): v for k, v in loaded.items() if k != "command"}
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"command": command, **cfg})
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return out


def corpus_file(path) -> Path:
    path = Path(path)
    return path / STREAMS if path.is_dir() else path


def load_traces(path) -> list[EventTrace] | None:
    path = Path(path)
    f = path / TRACES if path.is_dir() else path.with_name(TRACES)
    if not f.exists():
        return None
    return [EventTrace.from_record(r) for r in read_jsonl(f)]


def reference_report(path, silence_ms: float):
    traces = load_traces(path)
    if traces is None:
        traces = [segment(s, silence_ms) for s in load_streams(corpus_file(path))]
    return report(traces)


def prompts_from(path, n: int, frames: int):
    streams = load_streams(corpus_file(path))
    if not streams:
        raise NTPPError(f"no streams in {path}")
    if any(s.T < frames for s in streams):
        raise NTPPError(f"every prompt stream needs at least {frames} frames")
    return [streams[k % len(streams)].crop(0, frames) for k in range(n)]


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(cfg):
    prof = {}
    if cfg["profile"] is not None:
        prof = cfg["profile"] if isinstance(cfg["profile"], dict) else json.loads(Path(cfg["profile"]).read_text())
    if cfg["seed"] is not None:
        prof = {**prof, "seed": cfg["seed"]}
    profile = DialogueProfile.from_dict(prof)
    # snapshot the resolved profile, not the path it came from
    cfg = {**cfg, "profile": profile.to_dict(), "seed": None}
    out = prepare_out(cfg, "gen-data")
    corpus = generate(profile, cfg["frames"], cfg["streams"], cfg["silence_ms"])
    streams = corpus.streams
    if cfg["depth"] > 1:
        streams = [to_rvq(s, cfg["depth"], profile.vocab, profile.seed) for s in streams]
    save_streams(out / STREAMS, streams)
    write_jsonl(out / TRACES, (t.to_record() for t in corpus.traces))
    write_json(out / "profile.json", profile.to_dict())
    write_json(out / "stats.json", dict(corpus.stats))
    log.info("wrote %d streams of %d frames to %s", len(streams), cfg["frames"], out)


def cmd_train(cfg):
    out = prepare_out(cfg, "train")
    corpus = load_streams(corpus_file(cfg["data"]))
    if not corpus:
        raise NTPPError(f"no streams in {cfg['data']}")
    vocab = cfg["vocab"]
    if vocab is None:
        vocab = max(1, max(s.max_token for s in corpus) - 1)
    config = ModelConfig(d_model=cfg["d_model"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                         vocab=vocab, depth=corpus[0].depth, max_steps=cfg["max_steps"], seed=cfg["seed"])
    hyper = TrainHyper(lr=cfg["lr"], steps=cfg["steps"], batch=cfg["batch"], grad_clip=cfg["grad_clip"],
                       context_frames=cfg["context"], seed=cfg["seed"])
    result = train(config, corpus, hyper)
    save_checkpoint(out / "ckpt", result.params, result.history, result.step,
                    extra={"hyper": hyper.to_dict()})
    with (out / "loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i + 1, f"{v:.10g}") for i, v in enumerate(result.history))
    h = result.history
    log.info("trained %d steps, loss %.4f -> %.4f", len(h), h[0], h[-1])


def _load(ckpt):
    path = Path(ckpt)
    if not (path / "manifest.json").exists() and (path / "ckpt" / "manifest.json").exists():
        path = path / "ckpt"
    params, _ = load_checkpoint(path)
    return params


def cmd_sample(cfg):
    out = prepare_out(cfg, "sample")
    params = _load(cfg["ckpt"])
    prompts = None
    if cfg["prompts"] is not None:
        prompts = prompts_from(cfg["prompts"], cfg["n"], cfg["prompt_frames"])
    index = []
    for temp in cfg["temp"]:
        name = f"temp_{temp:g}"
        streams = []
        for k in range(cfg["n"]):
            prompt = prompts[k] if prompts is not None else None
            gen = generate_free(params, prompt, cfg["frames"], temp, channel_seeds=channel_seeds(cfg["seed"], k))
            streams.append(gen.crop(gen.T - cfg["frames"], gen.T))
        save_streams(out / name / STREAMS, streams)
        index.append({"temperature": temp, "path": f"{name}/{STREAMS}"})
        log.info("temperature %g: %d streams", temp, len(streams))
    write_json(out / SAMPLES_INDEX, index)


def cmd_converse(cfg):
    params = _load(cfg["ckpt"])
    D = params.config.depth
    src = open(cfg["input"], encoding="utf-8") if cfg["input"] else sys.stdin
    dst = open(cfg["output"], "w", encoding="utf-8") if cfg["output"] else sys.stdout

    def frames():
        expected = 0
        for lineno, line in enumerate(src, 1):
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                tokens, ch, t = msg["tokens"], msg.get("ch", "a"), msg.get("t", expected)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise NTPPError(f"input line {lineno}: malformed message ({exc})") from None
            if ch != "a":
                raise NTPPError(f"input line {lineno}: user frames must be on channel 'a'")
            if t != expected:
                raise NTPPError(f"input line {lineno}: expected frame {expected}, got {t}")
            expected += 1
            yield tokens

    try:
        gen = converse(params, frames(), ChunkConfig(cfg["chunk"], D), cfg["temp"], cfg["seed"], cfg["eager"])
        while True:
            try:
                t, toks = next(gen)
            except StopIteration as stop:
                conv = stop.value
                break
            dst.write(json.dumps({"t": t, "ch": "b", "tokens": toks}) + "\n")
            dst.flush()
    finally:
        if cfg["input"]:
            src.close()
        if cfg["output"]:
            dst.close()
    if cfg["timing"]:
        with open(cfg["timing"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "latency_ms", "cache_bytes"])
            for r in conv.result.rounds:
                w.writerow([r.round, f"{r.latency_ms:.4f}", r.cache_bytes])


def cmd_analyze(cfg):
    out = prepare_out(cfg, "analyze")
    ref = reference_report(cfg["ref"], cfg["silence_ms"])
    gen = Path(cfg["gen"])
    if (gen / SAMPLES_INDEX).exists():
        sets = [(e["temperature"], gen / e["path"]) for e in json.loads((gen / SAMPLES_INDEX).read_text())]
    else:
        sets = [("gen", corpus_file(gen))]
    rows, reports = [], {"reference": ref.to_dict()}
    for key, path in sets:
        streams = load_streams(path)
        rep = report([segment(s, cfg["silence_ms"]) for s in streams])
        d = delta(rep, ref)
        rows.append({"temperature": key, **d.values})
        reports[str(key)] = {"report": rep.to_dict(), "abs_delta": d.values}
        write_report_csv(out / f"report_{key}.csv", rep)
    write_report_csv(out / "report_reference.csv", ref)
    write_table_csv(out / "temperature_deltas.csv", rows, "temperature")
    write_json(out / "reports.json", reports)


def cmd_swap_eval(cfg):
    out = prepare_out(cfg, "swap-eval")
    params = _load(cfg["ckpt"])
    if cfg["tied"]:
        params = params.with_tied_channel_rows()
    prompts = prompts_from(cfg["data"], cfg["n"], cfg["prompt_frames"])
    ref = reference_report(cfg["data"], 200.0)
    res = swap_eval(params, prompts, ref, cfg["frames"], cfg["temp"], cfg["seed"])
    with (out / "swap.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "delta_original", "delta_swapped", "robustness"])
        for m in METRICS:
            w.writerow([m, f"{res.original[m]:.6g}", f"{res.swapped[m]:.6g}", f"{res.robustness[m]:.6g}"])
    write_json(out / "swap.json", {"original": res.original, "swapped": res.swapped,
                                   "robustness": res.robustness.values})


def cmd_bench(cfg):
    out = prepare_out(cfg, "bench")
    params = _load(cfg["ckpt"])
    res = bench_latency(params, cfg["rounds"], ChunkConfig(cfg["chunk"], params.config.depth),
                        cfg["warmup"], cfg["seed"], cfg["temp"])
    with (out / "latency.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "latency_ms", "cache_bytes", "committed"])
        for r in res.rounds:
            w.writerow([r.round, f"{r.latency_ms:.4f}", r.cache_bytes, r.committed])
    write_jsonl(out / "outputs.jsonl", ({"round": k, "tokens": f} for k, f in enumerate(res.outputs)))


def cmd_dump_mask(cfg):
    if cfg["T"] < 1 or cfg["D"] < 1:
        raise UsageError("--T and --D must be positive")
    text = build_mask(cfg["T"], cfg["D"]).to_text()
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "converse": cmd_converse,
    "analyze": cmd_analyze, "swap-eval": cmd_swap_eval, "bench": cmd_bench, "dump-mask": cmd_dump_mask,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    root = logging.getLogger()
    if not root.handlers:
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(console)
    for h in root.handlers:
        if not isinstance(h, logging.FileHandler):
            h.setLevel(logging.INFO if verbose else logging.WARNING)
    root.setLevel(logging.INFO)
    try:
        cfg = merge_config(command, args)
        COMMANDS[command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ntpp {command}: error: {exc}", file=sys.stderr)
        return 2
    except (NTPPError, ValueError, OSError) as exc:
        print(f"ntpp {command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
