import argparse
import sys
import time

from latentwave.cli import main


STAGES = [
    ["preprocess", "--synthesize"],
    ["train-ae1"],
    ["train-ae2"],
    ["encode-corpus"],
    ["train-gan"],
    ["generate", "--duration", "30", "--seed", "7"],
    ["evaluate", "--seconds", "40"],
    ["bench", "--duration", "10", "--repetitions", "10"],
]


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run every pipeline stage on one config, in order.")
    parser.add_argument('--config', '-c',
                        type=str,
                        default="configs/toy.yaml",
                        help="Run config; the toy config trains on a synthetic corpus.")
    parser.add_argument('--from_stage', '-f',
                        type=str,
                        default="preprocess",
                        help="First stage to run, e.g. train-gan to reuse trained autoencoders.")
    parser.add_argument('--deterministic', '-d',
                        action="store_true",
                        help="Single thread, deterministic kernels.")
    parser.add_argument('--workers', '-j',
                        type=int,
                        default=1,
                        help="Worker threads for encoding, generation and decoding.")
    args = parser.parse_args()

    names = [s[0] for s in STAGES]
    if args.from_stage not in names:
        parser.error(f"--from_stage must be one of {names}")

    common = ["--config", args.config, "--workers", str(args.workers)]
    if args.deterministic:
        common.append("--deterministic")

    for stage in STAGES[names.index(args.from_stage):]:
        started = time.perf_counter()
        code = main(common + stage)
        print(f"[{stage[0]}] exit {code} after {time.perf_counter() - started:.1f} s", flush=True)
        if code != 0:
            sys.exit(code)
