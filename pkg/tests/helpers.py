"""Small fixtures shared by the unit and acceptance tests."""

import numpy as np
from scipy import special

from qrt import autodiff as ad
from qrt.calibration import pit
from qrt.mdn import MdnConfig, MixtureDensityNetwork
from qrt.training import qrt_loss

MODES = ("none", "frozen-init", "stop-grad", "learned-centers")


def tiny_network(seed, input_dim=3, width=4, n_layers=2, n_components=3, activation="relu"):
    return MixtureDensityNetwork(MdnConfig(input_dim, n_layers, width, n_components, activation), seed=seed)


def gradient_case(seed, mode, batch=8, bandwidth=0.1):
    """Finite-difference check of the alpha=1 loss for one ablation mode.

    Learned centers are differenced through their logits.  For stop-grad the
    numerical side holds the centers at their value at the base point, which
    is exactly the function whose gradient the stop-grad loss reports.
    """
    rng = np.random.default_rng(seed)
    model = tiny_network(seed)
    X = rng.standard_normal((batch, 3))
    y = rng.standard_normal(batch)
    point = model.params.state_dict()
    if mode == "learned-centers":
        point["logits"] = special.logit(rng.uniform(0.05, 0.95, size=batch))
    frozen = rng.uniform(0.0, 1.0, size=batch) if mode == "frozen-init" else None
    z0 = pit(model.forward(X), y)

    def net(p):
        return {k: v for k, v in p.items() if k != "logits"}

    def loss(p):
        centers = None
        if mode == "learned-centers":
            centers = ad.sigmoid(p["logits"])
        elif mode == "frozen-init":
            centers = frozen
        ablation = "stop-grad" if mode == "stop-grad" else "none"
        return qrt_loss(model, X, y, 1.0, bandwidth, ablation, centers=centers, params=net(p))

    numeric = None
    if mode == "stop-grad":
        def numeric(p):
            return qrt_loss(model, X, y, 1.0, bandwidth, "none", centers=z0, params=net(p))
    return ad.finite_diff_check(loss, point, h=1e-5, numeric_fn=numeric)


class SequenceValidation:
    """Validation callback replaying a fixed NLL sequence and snapshotting weights."""

    def __init__(self, values):
        self.values = list(values)
        self.snapshots = {}

    def __call__(self, model, epoch):
        self.snapshots[epoch] = model.params.state_dict()
        return self.values[epoch], 0.0


ACCEPTANCE_LINES = []


def report(number, passed, detail):
    """Record and print one acceptance line; returns ``passed`` for asserting."""
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
