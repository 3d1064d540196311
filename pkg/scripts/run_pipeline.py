"""End-to-end run on a synthetic children's-face-shaped dataset.

Generates the data, then writes verification, open-set, model fits, bands,
crossing times and a bootstrap through the command-line interface, so the
output directory doubles as a worked example of every subcommand.

    python3 scripts/run_pipeline.py --out runs/demo --seed 7
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from longface.cli import main as cli


@dataclass
class Config:
    out: str = "runs/demo"
    seed: int = 7
    subjects: int = 120
    singletons: int = 100
    replicates: int = 200


def steps(cfg: Config):
    out = Path(cfg.out)
    data = str(out / "data")
    yield ["synth", "--seed", str(cfg.seed), "--subjects", str(cfg.subjects),
           "--singletons", str(cfg.singletons), "--out", data]
    yield ["summary", "--data", data, "--out", str(out / "summary")]
    for m in ("A", "B"):
        d = out / m
        yield ["verify", "--data", data, "--matcher", m, "--far", "0.0001,0.001", "--buckets", "1,3,5",
               "--out", str(d)]
        yield ["openset", "--data", data, "--matcher", m, "--ranks", "1,3", "--far", "0.01", "--out", str(d)]
        yield ["fit", "--data", data, "--matcher", m, "--model", "bt", "--out", str(d)]
        yield ["band", "--fit", str(d / "fit.json"), "--coverage", "0.8", "--grid", "0:8:0.1", "--out", str(d)]
        yield ["crossing", "--fit", str(d / "fit.json"), "--data", data, "--far", "0.0001,0.001",
               "--fraction", "0.95,0.99", "--out", str(d)]
        yield ["bootstrap", "--data", data, "--matcher", m, "-B", str(cfg.replicates), "--seed", str(cfg.seed),
               "--out", str(d)]
    yield ["report", "--data", data, "--fuse", "A+B", "--out", str(out / "report")]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = Config()
    p.add_argument("--out", default=d.out)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--subjects", type=int, default=d.subjects)
    p.add_argument("--singletons", type=int, default=d.singletons)
    p.add_argument("--replicates", type=int, default=d.replicates)
    cfg = Config(**vars(p.parse_args()))
    for argv in steps(cfg):
        print("longface", " ".join(argv), flush=True)
        code = cli(argv)
        if code:
            sys.exit(code)
    print(f"outputs in {cfg.out}")


if __name__ == "__main__":
    main()
