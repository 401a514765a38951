"""Plot success rate and help rate against target success from sweep.csv.

    python docs/plot_sweep.py out/sweep.csv -o sweep.png
"""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv", help="sweep.csv written by `introplan sweep`")
    ap.add_argument("-o", "--out", default="sweep.png")
    args = ap.parse_args()

    df = pd.read_csv(args.csv)
    # NA rates (zero denominators) come through as NaN and leave gaps
    x = "target_success" if df["target_success"].nunique() > 1 else "kb_size"

    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.plot(df[x], df["SR"], marker="o", label="success rate")
    left.plot(df[x], df["HR"], marker="s", label="help rate")
    if x == "target_success":
        left.plot(df[x], df[x], ls="--", color="grey", label="target")
    left.set_xlabel(x)
    left.set_ylim(0, 1.05)
    left.legend()

    right.plot(df["HR"], df["SR"], marker="o")
    for _, row in df.iterrows():
        right.annotate(f"{row[x]:g}", (row["HR"], row["SR"]), fontsize=7)
    right.set_xlabel("help rate")
    right.set_ylabel("success rate")

    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
