"""Run the whole pipeline for one config: data, both pretraining stages, the
discrimination study, finetuning for each lambda, and the scoreboard.

    python scripts/run_pipeline.py --config configs/smoke.yaml --out runs/smoke
"""

import argparse
import sys
from pathlib import Path

from ttrss.cli import main
from ttrss.config import load_config


def run(config: str, out: str, lambdas=None) -> int:
    out = Path(out)
    cfg = load_config(config)
    lambdas = list(cfg.finetune.lambdas) if lambdas is None else lambdas
    steps = [
        ["gen-data", "--config", config, "--out", str(out / "data")],
        ["pretrain-summarizer", "--config", config, "--data", str(out / "data"), "--out", str(out / "summarizer")],
        ["discriminate", "--config", config, "--data", str(out / "data"),
         "--summarizer", str(out / "summarizer" / "summarizer.ckpt"), "--out", str(out / "discrimination")],
        ["pretrain-separator", "--config", config, "--data", str(out / "data"), "--out", str(out / "separator")],
    ]
    checkpoints = [f"baseline={out / 'separator' / 'separator.ckpt'}"]
    for lam in lambdas:
        ft = out / f"finetune_{lam}"
        steps.append(["finetune", "--config", config, "--data", str(out / "data"),
                      "--summarizer", str(out / "summarizer" / "summarizer.ckpt"),
                      "--separator", str(out / "separator" / "separator.ckpt"),
                      "--lambda", str(lam), "--out", str(ft)])
        checkpoints.append(f"ttr_{lam}={ft / 'separator.ckpt'}@{lam}")
    steps.append(["evaluate", "--config", config, "--data", str(out / "data"),
                  "--checkpoints", *checkpoints, "--out", str(out / "scoreboard")])
    for step in steps:
        print("ttrss", " ".join(step), flush=True)
        code = main(step)
        if code:
            return code
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--lambdas", type=float, nargs="*", default=None)
    args = parser.parse_args()
    sys.exit(run(args.config, args.out, args.lambdas))
