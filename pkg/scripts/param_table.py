"""Language-model weight counts for the reference layer configurations."""
from rgbnrnn.langmodel import param_count

ROWS = [
    ("basic-LSTM", (600,), None),
    ("basic-LSTM", (900, 900), None),
    ("topic-guided", (600,), (100,)),
    ("topic-guided", (600, 512), (100, 80)),
    ("topic-guided", (600, 512, 256), (100, 80, 50)),
]

if __name__ == "__main__":
    for name, H, K in ROWS:
        c = param_count(300, H, K)
        sizes = "-".join(map(str, H)) + ("" if K is None else " / " + "-".join(map(str, K)))
        print(f"{name:13s} {sizes:24s} {c['lm_total']:>11,d}  ({c['lm_total'] / 1e6:.2f}M)")
