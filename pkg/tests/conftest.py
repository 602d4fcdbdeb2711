import numpy as np

from safer_lab.diffcore import Graph
from safer_lab.losses import EmaState, ema_update, forget_loss, retain_loss
from safer_lab.model import Model, bind, extract, head, init_model

TERMS = ("total", "ce", "recon", "kl", "sep")


def toy_instance(seed: int, n_classes: int = 3, n: int = 5):
    """Small model, batch, frozen noise and an initialized EMA."""
    rng = np.random.default_rng(seed)
    model = init_model((4, 5), n_classes, 2, seed=seed, encoder_hidden=(3,), decoder_hidden=(3,))
    for v in model.params.values():
        v += 0.1 * rng.normal(size=v.shape)
    x = rng.normal(size=(n, 4))
    y = rng.integers(0, n_classes, size=n)
    eps = rng.normal(size=(n, 2))
    ema = ema_update(EmaState(2), rng.normal(size=(3, 2)))
    return model, x, y, eps, ema


def retain_term(model: Model, x, y, eps, ema, term: str, lam: float = 0.1):
    """(graph, params, node id) for one retain-loss term or the total."""
    g = Graph()
    p = bind(g, model)
    feats = extract(g, model.spec, p, g.constant(x))
    br = retain_loss(g, model.spec, p, feats, y, eps, ema, lam)
    return g, p, br.total_id if term == "total" else br.term_ids[term]


def flat_grad(model: Model, g: Graph, p: dict, node: int) -> np.ndarray:
    grads = g.backward(node)
    return np.concatenate([grads[p[name]].ravel() for name, _ in model.spec.layout()])


def flat_value(model: Model, build):
    """Scalar function of the flattened parameters for central differences."""

    def fn(vec):
        m = model.copy()
        m.load_flat(vec)
        g, _, node = build(m)
        return float(g.value(node))

    return fn


def forget_graph(model: Model, x, q):
    g = Graph()
    p = bind(g, model)
    logits = head(g, p, extract(g, model.spec, p, g.constant(x)))
    return g, p, forget_loss(g, logits, q)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
