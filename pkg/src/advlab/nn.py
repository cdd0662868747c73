"""Network definitions with a designated pre-logits capture site.

Every architecture here exposes the same surface: an ordered parameter dict,
an input shape, and a forward pass that returns (logits, a_fc) where a_fc is
the post-relu activation feeding the final affine layer. A feature mask over
a_fc can be injected multiplicatively (no rescaling); passing no mask and
passing an all-ones mask produce identical logits. Evaluation helpers never
mask.

Weights are stored channels-last (conv kernels [kh,kw,Cin,F], flatten order
H,W,C) because the engine's fast conv path is NHWC. Forward accepts the
conventional NCHW input and transposes inside the graph, so input gradients
come back in the caller's layout.
"""

import numpy as np

from . import tensor as T

LENET_PARAM_COUNT = 3_274_634


class Network:
    """Parameter container plus architecture metadata.

    params is an ordered name -> Tensor(requires_grad=True) mapping; the
    ordering is the init draw order and the checkpoint blob order.
    """

    def __init__(self, arch, params, input_shape, a_fc_dim, num_classes):
        self.arch = arch
        self.params = params
        self.input_shape = tuple(input_shape)
        self.a_fc_dim = a_fc_dim
        self.num_classes = num_classes

    def parameters(self):
        return list(self.params.values())

    def zero_grads(self):
        T.zero_grads(self.params.values())

    def state_arrays(self):
        """name -> ndarray view of current parameter values."""
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays):
        for k, v in self.params.items():
            arr = np.asarray(arrays[k], dtype=v.data.dtype)
            if arr.shape != v.data.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != "
                                 f"{v.data.shape}")
            v.data = arr.copy()
        return self

    def clone(self):
        net = build_network(self.arch)
        net.load_state(self.state_arrays())
        return net


_LENET_SHAPES = [
    ("c1w", (5, 5, 1, 32)), ("c1b", (32,)),
    ("c2w", (5, 5, 32, 64)), ("c2b", (64,)),
    ("d1w", (3136, 1024)), ("d1b", (1024,)),
    ("d2w", (1024, 10)), ("d2b", (10,)),
]

_TINY_SHAPES = [
    ("c1w", (3, 3, 3, 32)), ("c1b", (32,)),
    ("c2w", (3, 3, 32, 32)), ("c2b", (32,)),
    ("c3w", (3, 3, 32, 64)), ("c3b", (64,)),
    ("c4w", (3, 3, 64, 64)), ("c4b", (64,)),
    ("c5w", (3, 3, 64, 128)), ("c5b", (128,)),
    ("c6w", (3, 3, 128, 128)), ("c6b", (128,)),
    ("d1w", (128, 256)), ("d1b", (256,)),
    ("d2w", (256, 10)), ("d2b", (10,)),
]

_ARCHS = {
    "lenet_mnist": (_LENET_SHAPES, (1, 28, 28), 1024, 10),
    "tiny_convnet": (_TINY_SHAPES, (3, 32, 32), 256, 10),
}


def build_network(arch):
    """Allocate a network of the given architecture with zeroed parameters."""
    if arch not in _ARCHS:
        raise ValueError(f"unknown architecture {arch!r}")
    shapes, input_shape, a_fc_dim, classes = _ARCHS[arch]
    params = {name: T.Tensor(np.zeros(shape, np.float32), requires_grad=True)
              for name, shape in shapes}
    net = Network(arch, params, input_shape, a_fc_dim, classes)
    if arch == "lenet_mnist":
        assert parameter_count(net) == LENET_PARAM_COUNT
    return net


def parameter_count(net):
    return sum(p.data.size for p in net.parameters())


def init_parameters(net, seed):
    """Fan-in-scaled uniform weights, zero biases, deterministic per seed.

    Weights draw U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in parameter order; conv
    fan-in is kh*kw*Cin, dense fan-in is the input width. Biases draw nothing,
    so the stream depends only on the weight shapes.
    """
    rng = np.random.default_rng(seed)
    for name, p in net.params.items():
        if name.endswith("b"):
            p.data = np.zeros(p.data.shape, np.float32)
            continue
        shape = p.data.shape
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / np.sqrt(fan_in)
        p.data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return net


def make_network(arch, seed):
    return init_parameters(build_network(arch), seed)


def _check_mask(net, mask):
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != (net.a_fc_dim,):
        raise ValueError(f"mask shape {mask.shape} != ({net.a_fc_dim},)")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValueError("mask must be 0/1 valued")
    return mask


def forward(net, x, mask=None):
    """Run the network on NCHW input x in [0,1].

    Returns (logits, a_fc). a_fc is the post-relu pre-logits activation,
    after mask multiplication when a mask is given, and is already marked as
    a gradient-capture site for grad_of().
    """
    if x.data.ndim != 4 or tuple(x.data.shape[1:]) != net.input_shape:
        raise ValueError(f"input shape {tuple(x.data.shape)} does not match "
                         f"(B,)+{net.input_shape}")
    xh = T.to_nhwc(x)
    P = net.params
    if net.arch == "lenet_mnist":
        h = T.relu_maxpool2(T.conv2d_nhwc(xh, P["c1w"], P["c1b"], 1, 2))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c2w"], P["c2b"], 1, 2))
        h = T.dense(T.flatten2d(h), P["d1w"], P["d1b"])
    else:  # tiny_convnet
        h = T.relu(T.conv2d_nhwc(xh, P["c1w"], P["c1b"], 1, 1))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c2w"], P["c2b"], 1, 1))
        h = T.relu(T.conv2d_nhwc(h, P["c3w"], P["c3b"], 1, 1))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c4w"], P["c4b"], 1, 1))
        h = T.relu(T.conv2d_nhwc(h, P["c5w"], P["c5b"], 1, 1))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c6w"], P["c6b"], 1, 1))
        h = T.dense(T.global_avgpool_nhwc(h), P["d1w"], P["d1b"])
    a_fc = T.relu(h)
    if mask is not None:
        a_fc = T.mul_rowvec(a_fc, _check_mask(net, mask))
    a_fc.mark_capture()
    logits = T.dense(a_fc, P["d2w"], P["d2b"])
    return logits, a_fc


def last_conv_activation(net, x):
    """Post-pool activation of the last conv block, for saliency maps.

    Returns (logits, act) with act in NHWC; act is capture-marked.
    """
    if x.data.ndim != 4 or tuple(x.data.shape[1:]) != net.input_shape:
        raise ValueError("input shape mismatch")
    xh = T.to_nhwc(x)
    P = net.params
    if net.arch == "lenet_mnist":
        h = T.relu_maxpool2(T.conv2d_nhwc(xh, P["c1w"], P["c1b"], 1, 2))
        act = T.relu_maxpool2(T.conv2d_nhwc(h, P["c2w"], P["c2b"], 1, 2))
        act.mark_capture()
        h = T.dense(T.flatten2d(act), P["d1w"], P["d1b"])
    else:
        h = T.relu(T.conv2d_nhwc(xh, P["c1w"], P["c1b"], 1, 1))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c2w"], P["c2b"], 1, 1))
        h = T.relu(T.conv2d_nhwc(h, P["c3w"], P["c3b"], 1, 1))
        h = T.relu_maxpool2(T.conv2d_nhwc(h, P["c4w"], P["c4b"], 1, 1))
        h = T.relu(T.conv2d_nhwc(h, P["c5w"], P["c5b"], 1, 1))
        act = T.relu_maxpool2(T.conv2d_nhwc(h, P["c6w"], P["c6b"], 1, 1))
        act.mark_capture()
        h = T.dense(T.global_avgpool_nhwc(act), P["d1w"], P["d1b"])
    a_fc = T.relu(h)
    a_fc.mark_capture()
    logits = T.dense(a_fc, P["d2w"], P["d2b"])
    return logits, act


def predict(net, x_arr, batch_size=256):
    """Class predictions for an NCHW array, unmasked, no graph."""
    out = np.empty(len(x_arr), np.int64)
    with T.no_grad():
        for s in range(0, len(x_arr), batch_size):
            with T.Tape() as tp:
                logits, _ = forward(net, T.tensor(x_arr[s:s + batch_size]))
                out[s:s + len(logits.data)] = logits.data.argmax(axis=1)
                tp.close()
    return out


def accuracy(net, x_arr, y_arr, batch_size=256):
    return float(np.mean(predict(net, x_arr, batch_size) == y_arr))
