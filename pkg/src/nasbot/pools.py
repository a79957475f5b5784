"""The ten feed-forward networks that seed every search."""

from . import archgraph as ag

CNN_INPUT_CHANNELS = 3
MLP_INPUT_FEATURES = 16


def _vgg(blocks, fc):
    layers = [("ip",)]
    for label, units, reps in blocks:
        layers += [(label, units, 1)] * reps
        layers.append(("max-pool",))
    layers += [("fc", u) for u in fc]
    layers += [("softmax",), ("op",)]
    return ag.chain(ag.CNN, layers, CNN_INPUT_CHANNELS)


def _blocked_cnn(stem, blocks, head_pool="avg-pool", fc=(128,)):
    """Stem conv, then blocks whose first layer halves the image (stride 2)."""
    layers = [("ip",), (stem[0], stem[1], 1)]
    for label, units, reps in blocks:
        layers.append((label, units, 2))
        layers += [(label, units, 1)] * (reps - 1)
    layers.append((head_pool,))
    layers += [("fc", u) for u in fc]
    layers += [("softmax",), ("op",)]
    return ag.chain(ag.CNN, layers, CNN_INPUT_CHANNELS)


def _blocked_mlp(blocks):
    layers = [("ip",)]
    for label, units, reps in blocks:
        layers += [(label, units)] * reps
    layers += [("linear",), ("op",)]
    return ag.chain(ag.MLP, layers, MLP_INPUT_FEATURES)


def cnn_pool() -> list:
    return [
        _vgg([("conv3", 64, 1), ("conv3", 128, 1), ("conv3", 256, 2)], (512,)),
        _vgg([("conv3", 64, 2), ("conv3", 128, 2), ("conv3", 256, 2)], (256, 256)),
        _vgg([("conv3", 32, 2), ("conv3", 64, 2), ("conv3", 128, 3), ("conv3", 256, 2)], (256,)),
        _blocked_cnn(("conv7", 32), [("conv3", 64, 2), ("conv3", 128, 2)]),
        _blocked_cnn(("conv5", 32), [("res3", 64, 2), ("res3", 128, 2), ("res3", 256, 2)]),
        _blocked_cnn(("conv3", 16), [("conv5", 32, 3), ("conv5", 64, 3)], "max-pool"),
        _blocked_cnn(("conv3", 64), [("res5", 64, 2), ("res5", 128, 2)], fc=(256, 128)),
        _blocked_cnn(("conv7", 16), [("conv3", 32, 1), ("conv5", 64, 1), ("conv7", 128, 1)]),
        _blocked_cnn(("conv3", 32), [("res3", 32, 3), ("res3", 64, 3), ("res3", 128, 2)]),
        _blocked_cnn(("conv5", 48), [("conv3", 96, 4)], fc=(192,)),
    ]


def mlp_pool() -> list:
    return [
        _blocked_mlp([("relu", 64, 2), ("relu", 32, 2)]),
        _blocked_mlp([("tanh", 128, 2), ("tanh", 64, 1)]),
        _blocked_mlp([("relu", 256, 1), ("logistic", 128, 2), ("relu", 64, 1)]),
        _blocked_mlp([("elu", 64, 3), ("tanh", 32, 2)]),
        _blocked_mlp([("leaky-relu", 128, 2), ("softplus", 64, 2), ("logistic", 32, 2)]),
        _blocked_mlp([("crelu", 32, 4)]),
        _blocked_mlp([("logistic", 256, 1), ("tanh", 128, 1), ("logistic", 64, 1)]),
        _blocked_mlp([("relu", 512, 1), ("relu", 256, 1), ("elu", 128, 2), ("tanh", 64, 2)]),
        _blocked_mlp([("softplus", 96, 2), ("leaky-relu", 48, 2)]),
        _blocked_mlp([("tanh", 64, 2), ("relu", 128, 2), ("logistic", 64, 2), ("relu", 32, 2)]),
    ]


def initial_pool(net_class: str) -> list:
    if net_class == ag.CNN:
        return cnn_pool()
    if net_class == ag.MLP:
        return mlp_pool()
    raise ValueError(f"unknown network class {net_class!r}")
