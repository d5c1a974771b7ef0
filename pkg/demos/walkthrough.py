"""Train a small translator on synthetic scenes and look at what it learned.

Run from the repository root:

    python demos/walkthrough.py --steps 100 --out /tmp/walkthrough

Writes the datasets, the training run, metrics.json and a montage
(input | translation | reconstruction of the input) under --out.
"""

import argparse
from pathlib import Path

from instaformer.cli import main


def run(*argv: str) -> None:
    print("$ instaformer", " ".join(argv))
    code = main(list(argv))
    if code:
        raise SystemExit(code)


def walkthrough(out: Path, steps: int) -> None:
    data = out / "data"
    # Domain A: saturated shapes on a bright sky. Domain B: the same kinds of
    # scene at night. The two sets are drawn from different scene seeds, so no
    # image in A has a counterpart in B.
    run("gen-data", "--out", str(data), "--n", "8")

    config = out / "run_config.json"
    config.write_text(f'{{"steps": {steps}, "dtype": "float32", "ckpt_every": {steps}}}\n')
    run("train", "--config", str(config), "--data-a", str(data / "A"),
        "--data-b", str(data / "B"), "--out", str(out / "run"))

    # Two style seeds give two renderings of the same content.
    for seed in ("0", "1"):
        run("translate", "--ckpt", str(out / "run" / "final.ifck"), "--input", str(data / "A"),
            "--out", str(out / f"style{seed}"), "--style-seed", seed)

    # palette_B of the translations should sit below that of the inputs.
    run("eval", "--ckpt", str(out / "run" / "final.ifck"), "--data-a", str(data / "A"),
        "--data-b", str(data / "B"), "--out", str(out / "eval"))
    run("report", "--run", str(out / "run"), "--out", str(out / "report"))
    print(f"open {out / 'report' / 'montage.ppm'} to compare input, translation and reconstruction")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("walkthrough"))
    p.add_argument("--steps", type=int, default=100)
    args = p.parse_args()
    walkthrough(args.out, args.steps)
