import numpy as np
import pytest

from dance import model as M
from dance import pipeline

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_mlp(d, hidden, n_classes, seed):
    spec = M.mlp_spec(d, hidden, n_classes)
    w = M.init_weights(spec, seed)
    rng = np.random.default_rng(seed + 500)
    # non-zero biases so kinks are not all at the origin
    w.arrays = [a if a.ndim > 1 else rng.normal(0, 0.1, a.shape) for a in w.arrays]
    return M.Network(spec, w)


def random_cnn(side, seed, filters=3, pool=2, n_classes=3):
    spec = M.ModelSpec((1, side, side), (M.conv2d(filters, 3), M.RELU, M.maxpool2d(pool),
                                         M.FLATTEN, M.dense(n_classes), M.SOFTMAX), n_classes)
    w = M.init_weights(spec, seed)
    rng = np.random.default_rng(seed + 500)
    w.arrays = [a if a.ndim > 1 else rng.normal(0, 0.1, a.shape) for a in w.arrays]
    return M.Network(spec, w)


@pytest.fixture(scope="session")
def golden(tmp_path_factory):
    """The seed-0 synthetic-shapes run: config, data and trained CNN."""
    cfg = pipeline.RunConfig()
    tr, te = pipeline.load_data(cfg)
    net = pipeline.build_model(cfg, tr)
    path = tmp_path_factory.mktemp("golden") / "weights.dncw"
    M.save_weights(net.weights, net.spec, path)
    return {"cfg": cfg, "train": tr, "test": te, "net": net, "weights_path": path}
