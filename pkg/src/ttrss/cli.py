"""``ttrss`` command line: data generation, the three training stages, evaluation,
discrimination study, alignment inspection and gradient checks.

Exit codes: 0 ok, 1 unexpected error, 2 bad config, 3 missing file,
4 numerical failure, 5 gradient check tolerance breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import torch

from . import corpus
from .alignment import align
from .config import ConfigError, RunConfig, dump_config, load_config
from .encoders import Encoders
from .experiments import (discrimination_eval, evaluate_separation, write_discrimination, write_scoreboard)
from .gradcheck import STAGES, Models, run_stages
from .params import CheckpointError
from .separator import (FinetuneConfig, Separator, finetune_ttr, make_sep_items, pretrain_separator,
                        validation_si_sdri, validation_ttr)
from .summarizer import Summarizer, make_item, pretrain_summarizer
from .wavio import read_wav

log = logging.getLogger("ttrss")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class GradCheckFailure(RuntimeError):
    pass


def _setup(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    (out / "config_hash.txt").write_text(cfg.hash + "\n")
    return out


def _check_data(cfg: RunConfig, data: Path) -> None:
    if not (data / "dataset_config.json").exists():
        raise FileNotFoundError(f"{data} is not a generated dataset (no dataset_config.json)")
    stored = corpus.load_config(data)
    if stored != cfg.dataset:
        raise ConfigError(f"dataset at {data} was generated with a different dataset config")


def _encoders(cfg: RunConfig) -> Encoders:
    return Encoders(cfg.encoder, cfg.dataset.lexicon(), cfg.dataset.sample_rate)


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return path


class LossLog:
    """Append-only per-epoch loss records; wall-clock time goes to a separate
    file so the loss log itself is bit-reproducible."""

    def __init__(self, out: Path, name: str):
        self.loss_path = out / f"{name}_loss_log.jsonl"
        self.time_path = out / f"{name}_timings.jsonl"
        self.loss_path.write_text("")
        self.time_path.write_text("")

    def __call__(self, rec: dict) -> None:
        rec = dict(rec)
        wall = rec.pop("wall_seconds")
        if not all(math.isfinite(v) for v in rec.values() if isinstance(v, float)):
            raise FloatingPointError(f"non-finite value in log record {rec}")
        with open(self.loss_path, "a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(self.time_path, "a") as f:
            f.write(json.dumps({"epoch": rec["epoch"], "split": rec["split"], "wall_seconds": wall}) + "\n")


def cmd_gen_data(args, cfg: RunConfig) -> None:
    corpus.gen_dataset(cfg.dataset, args.out)
    Path(args.out, "config_hash.txt").write_text(cfg.hash + "\n")


def _clean_items(records, encoders):
    return [make_item(s.samples, t, w, encoders)
            for r in records for s, t, w in zip(r.sources, r.transcripts, r.subwords)]


def cmd_pretrain_summarizer(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    _check_data(cfg, data)
    out = _out_dir(args, cfg)
    encoders = _encoders(cfg)
    lexicon = encoders.lexicon
    train = _clean_items(corpus.load_split(data, "train", lexicon), encoders)
    val = _clean_items(corpus.load_split(data, "val", lexicon), encoders)
    model = Summarizer(cfg.summarizer, cfg.encoder.d_audio, cfg.encoder.d_text)
    pretrain_summarizer(model, train, val, cfg.summarizer_training, cfg.seed, LossLog(out, "summarizer"))
    model.save(out / "summarizer.ckpt", {"config_hash": cfg.hash})


def cmd_pretrain_separator(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    _check_data(cfg, data)
    out = _out_dir(args, cfg)
    lexicon = cfg.dataset.lexicon()
    train = make_sep_items(corpus.load_split(data, "train", lexicon))
    val = make_sep_items(corpus.load_split(data, "val", lexicon))
    model = Separator(cfg.separator)
    pretrain_separator(model, train, val, cfg.separator_training, cfg.seed, LossLog(out, "separator"))
    model.save(out / "separator.ckpt", {"config_hash": cfg.hash})


def _load_summarizer(cfg: RunConfig, path) -> Summarizer:
    return Summarizer.load(_need(path), cfg.summarizer, cfg.encoder.d_audio, cfg.encoder.d_text)


def cmd_finetune(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    _check_data(cfg, data)
    summarizer = _load_summarizer(cfg, args.summarizer)
    separator = Separator.load(_need(args.separator), cfg.separator)
    out = _out_dir(args, cfg)
    lam = cfg.finetune.default_lambda if args.lam is None else args.lam
    encoders = _encoders(cfg)
    train = make_sep_items(corpus.load_split(data, "train", encoders.lexicon), encoders)
    val = make_sep_items(corpus.load_split(data, "val", encoders.lexicon), encoders)
    ft = FinetuneConfig(lam, cfg.finetune.freeze_summarizer, cfg.finetune.optimizer)
    summarizer.freeze()
    before = validation_ttr(separator, summarizer, encoders, val)
    sdri_before = validation_si_sdri(separator, val)
    finetune_ttr(separator, summarizer, encoders, train, val, ft, cfg.seed, LossLog(out, "finetune"))
    after = validation_ttr(separator, summarizer, encoders, val)
    sdri_after = validation_si_sdri(separator, val)
    separator.save(out / "separator.ckpt", {"config_hash": cfg.hash, "lambda": lam})
    summarizer.save(out / "summarizer_after.ckpt", {"config_hash": cfg.hash})
    (out / "finetune_summary.json").write_text(json.dumps(
        {"config_hash": cfg.hash, "lambda": lam, "freeze_summarizer": ft.freeze_summarizer,
         "val_ttr_before": before, "val_ttr_after": after,
         "val_si_sdri_before": sdri_before, "val_si_sdri_after": sdri_after}, indent=1, sort_keys=True) + "\n")


def _parse_checkpoint_arg(text: str):
    """``label=path`` or ``label=path@lambda``."""
    if "=" not in text:
        raise ConfigError(f"checkpoint argument {text!r} must look like label=path[@lambda]")
    label, rest = text.split("=", 1)
    lam = None
    if "@" in rest:
        rest, lam_text = rest.rsplit("@", 1)
        lam = float(lam_text)
    return label, lam, rest


def cmd_evaluate(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    _check_data(cfg, data)
    models = []
    for spec in args.checkpoints:
        label, lam, path = _parse_checkpoint_arg(spec)
        models.append((label, lam, Separator.load(_need(path), cfg.separator)))
    out = _out_dir(args, cfg)
    records = corpus.load_split(data, args.split, cfg.dataset.lexicon())
    write_scoreboard(evaluate_separation(models, records), out, cfg.hash)


def cmd_discriminate(args, cfg: RunConfig) -> None:
    data = Path(args.data)
    _check_data(cfg, data)
    summarizer = _load_summarizer(cfg, args.summarizer)
    out = _out_dir(args, cfg)
    encoders = _encoders(cfg)
    records = corpus.load_split(data, args.split, encoders.lexicon)
    write_discrimination(discrimination_eval(summarizer, encoders, records), out, cfg.hash)


def _find_dataset_root(path: Path):
    for parent in path.resolve().parents:
        if (parent / "dataset_config.json").exists():
            return parent
    return None


def cmd_inspect_align(args) -> None:
    transcript_path = _need(args.transcript)
    transcript = corpus.read_transcript(transcript_path)
    if args.config:
        dataset = load_config(args.config).dataset
    else:
        root = _find_dataset_root(transcript_path)
        if root is None:
            raise ConfigError("cannot locate the lexicon: pass --config or keep the transcript inside its dataset")
        dataset = corpus.load_config(root)
    subwords = corpus.SubwordSequence.from_transcript(transcript, dataset.lexicon())
    if args.num_frames is not None:
        n_frames = args.num_frames
    else:
        wav = transcript_path.with_suffix(".wav")
        if wav.exists():
            w = read_wav(wav)
            n_frames = math.floor(len(w) / w.sample_rate * args.frame_rate + 1e-9)
        else:
            n_frames = math.ceil(transcript.words[-1].end * args.frame_rate)
    amap = align(transcript, subwords, n_frames, args.frame_rate)
    for rec in amap.to_records(subwords.tokens):
        print(json.dumps(rec))


def cmd_grad_check(args, cfg: RunConfig) -> None:
    stages = list(STAGES) if args.stage == "all" else [args.stage]
    models = Models(cfg.encoder, cfg.summarizer, cfg.separator)
    results = run_stages(stages, args.coords, cfg.seed, models)
    failed = []
    for stage, res in results.items():
        status = "PASS" if res.passed else "FAIL"
        print(f"{stage}: {status} max_rel_error={res.max_rel_error:.3e} coords={res.n_coords} worst={res.worst[0]}[{res.worst[1]}]")
        if not res.passed:
            failed.append(stage)
    if failed:
        raise GradCheckFailure(f"gradient check failed for {', '.join(failed)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttrss", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="override the config's thread count")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, *opts):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        for opt in opts:
            if opt == "config":
                sp.add_argument("--config", required=True)
            elif opt == "data":
                sp.add_argument("--data", required=True)
            elif opt == "out":
                sp.add_argument("--out", required=True)
        return sp

    add("gen-data", cmd_gen_data, "config", "out")
    add("pretrain-summarizer", cmd_pretrain_summarizer, "config", "data", "out")
    add("pretrain-separator", cmd_pretrain_separator, "config", "data", "out")
    sp = add("finetune", cmd_finetune, "config", "data", "out")
    sp.add_argument("--summarizer", required=True)
    sp.add_argument("--separator", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=None)
    sp = add("evaluate", cmd_evaluate, "config", "data", "out")
    sp.add_argument("--checkpoints", nargs="+", required=True, metavar="LABEL=PATH[@LAMBDA]")
    sp.add_argument("--split", default="test", choices=corpus.SPLITS)
    sp = add("discriminate", cmd_discriminate, "config", "data", "out")
    sp.add_argument("--summarizer", required=True)
    sp.add_argument("--split", default="val", choices=corpus.SPLITS)
    sp = sub.add_parser("inspect-align")
    sp.set_defaults(fn=None)
    sp.add_argument("--transcript", required=True)
    sp.add_argument("--frame-rate", type=float, required=True)
    sp.add_argument("--config", default=None)
    sp.add_argument("--num-frames", type=int, default=None)
    sp = add("grad-check", cmd_grad_check, "config")
    sp.add_argument("--stage", default="all", choices=["all", *STAGES])
    sp.add_argument("--coords", type=int, default=50)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"{kind}: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "inspect-align":
            cmd_inspect_align(args)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.threads is not None:
            cfg = RunConfig(**{**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "threads": args.threads})
        _setup(cfg)
        args.fn(args, cfg)
    except (ConfigError, corpus.CorpusError) as exc:
        return _fail(EXIT_CONFIG, "ConfigError", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "MissingFile", exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "NumericalFailure", exc)
    except GradCheckFailure as exc:
        return _fail(EXIT_GRADCHECK, "GradCheckFailure", exc)
    except CheckpointError as exc:
        return _fail(EXIT_CONFIG, "CheckpointError", exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_ERROR, type(exc).__name__, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
