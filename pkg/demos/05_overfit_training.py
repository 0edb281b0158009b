"""Desk-scale training sanity: a depth-8 plain network memorizes 100
synthetic samples in a handful of epochs, with either module kind.

Run:  python demos/05_overfit_training.py
"""

from propmod import NetworkConfig, TrainConfig, build_network, fit, make_synthetic

data = make_synthetic(num_classes=10, count=100, seed=0)

for ratio in ("1:1", "2:1"):
    model = build_network(NetworkConfig(family="plain", depth=8, ratio=ratio, seed=0))
    cfg = TrainConfig(epochs=50, batch_size=25, seed=0, augment=False)
    record = fit(model, data, None, cfg, stop_after=10)
    print(f"plain-8, conv:ReLU {ratio}")
    for e in record.epochs:
        bar = "#" * int(e.train_acc * 40)
        print(f"  epoch {e.epoch:2d}  loss {e.train_loss:7.4f}  acc {e.train_acc:5.2f} {bar}")
    print()
