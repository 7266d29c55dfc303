import numpy as np

from vvdet.autodiff import Value, grad_check, ops


def jitter_biases(module, rng):
    """Zero-initialised biases put empty rows exactly on relu kinks; move them off."""
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(scale=0.5, size=p.shape)


def probe_loss(fn, shape, rng):
    """Scalar ``sum(fn() * w)`` with a fixed random ``w``, so every output entry matters."""
    w = Value(rng.normal(size=shape))
    return lambda: ops.sum(ops.mul(fn(), w))


def assert_grads(loss_fn, params, tol=1e-5, max_elems=16):
    report = grad_check(loss_fn, params, max_elems=max_elems)
    assert report.passed(tol), str(report)
    return report


def canonical_rows(a):
    a = np.asarray(a)
    return a[np.lexsort(a.T[::-1])]


ACCEPTANCE_LINES = []

TINY = [
    "scene.half_range=10.0", "scene.min_objects=2", "scene.max_objects=4", "scene.ground_points=300",
    "scene.max_points=1500", "data.num_train=10", "data.num_val=3",
    "model.vfe_widths=[8,8]", "model.backbone_channels=[8,8,8]", "model.neck_widths=[8]",
    "model.seg_widths=[8]", "model.sir_widths=[8]", "model.mixer_width=8", "model.mixer_channels=[8,8]",
    "model.head_widths=[8]", "train.epochs=1",
]
