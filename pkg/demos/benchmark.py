"""Time dense versus sketched linear layers and write a CSV.

The same run from the shell:

    randsketch bench linear --din 2048 --dout 2048 --l 1 --k 16,64,256 --trials 20 --out linear.csv
"""

from randsketch.bench import run_linear_bench, write_csv

records = run_linear_bench([2048], [2048], [1], [16, 64, 256], batch=64, trials=20, warmup=3)
for r in records:
    print(f"{r.impl:8s} k={r.k!s:>4}  {r.mean_ms:7.3f} ms +/- {r.std_ms:.3f}")
write_csv(records, "linear.csv")
