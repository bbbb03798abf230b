"""Train each model with and without batch normalisation and tabulate the convergence flags.

    python3 scripts/bn_study.py --out /tmp/bn-study [--data-dir CIFAR_DIR]

Without ``--data-dir`` the natural-image stand-in from ``tests/stand_in.py``
is generated and used.
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from lpae import cli  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--archs", default="lpae2,dcae2")
    p.add_argument("--limit", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)
    if args.data_dir:
        data, source = Path(args.data_dir), "cifar10"
    else:
        from stand_in import cifar_dir

        data, source = cifar_dir(out, n=max(args.limit, 2000))
    rows = []
    for arch in args.archs.split(","):
        kind = "dcae" if arch.startswith("dcae") else "lpae"
        for bn in (True, False):
            run = out / f"{arch}-{'bn' if bn else 'nobn'}"
            argv = ["train", "--arch", arch, "--model", kind, "--dataset", "cifar10",
                    "--data-dir", str(data), "--limit", str(args.limit), "--epochs", str(args.epochs),
                    "--seed", str(args.seed), "--deterministic", "--out", str(run)]
            if not bn:
                argv.append("--no-bn")
            code = cli.main(argv)
            res = json.loads((run / "manifest.json").read_text())["result"]
            rows.append({"arch": arch, "bn": bn, "exit_code": code, "converged": res.get("converged"),
                         "diverged": res.get("diverged"), "first_loss": res.get("first_loss"),
                         "last_loss": res.get("last_loss"), "ratio": res.get("ratio")})
    (out / "bn_study.json").write_text(json.dumps({"source": source, "rows": rows}, indent=2) + "\n")
    print(f"data: {source}, {args.limit} images, {args.epochs} epochs")
    print("| model | BN | first-epoch loss | last-epoch loss | ratio | converged | diverged |")
    print("|---|---|---|---|---|---|---|")
    for r in rows:
        print(f"| {r['arch']} | {'yes' if r['bn'] else 'no'} | {r['first_loss']:.4g} | "
              f"{r['last_loss']:.4g} | {r['ratio']:.3f} | {r['converged']} | {r['diverged']} |")


if __name__ == "__main__":
    main()
