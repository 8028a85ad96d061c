import numpy as np
import pytest

from nere import synthgen, textvec
from nere.features import SET_COLUMNS, USER_COLUMNS, SequenceTensorTriple
from nere.neuralcore.gradcheck import numerical_grad, relative_error


def small_manifest(card=3):
    """Manifest with the canonical column layout and a fixed small cardinality."""
    def stream(cols):
        return [{"name": n, "kind": k, "cardinality": card if k == "c" else 0} for n, k in cols]

    return {"user": stream(USER_COLUMNS), "set": stream(SET_COLUMNS)}


def random_triple(n, T=5, dim=8, card=3, seed=0):
    """Random tensors that satisfy the manifest returned by ``small_manifest(card)``."""
    rng = np.random.default_rng(seed)

    def block(cols):
        out = rng.random((n, T, len(cols)))
        for j, (_, kind) in enumerate(cols):
            if kind == "c":
                out[:, :, j] = rng.integers(0, card + 1, size=(n, T))
        return out

    content = rng.normal(size=(n, T, dim))
    return SequenceTensorTriple(
        user_meta=block(USER_COLUMNS),
        set_meta=block(SET_COLUMNS),
        set_content=content,
        target=content[:, -1].copy(),
        row_keys=[(i + 1, "Science") for i in range(n)],
        step_set_ids=rng.integers(1, 50, size=(n, T)),
    )


def max_param_error(layer, loss_fn):
    """Largest relative error between analytic grads already in ``layer.grads`` and FD grads."""
    worst = 0.0
    for name, p in layer.params.items():
        num = numerical_grad(loss_fn, p)
        worst = max(worst, relative_error(layer.grads[name], num))
    return worst


def _tiny_synth(**kw):
    base = dict(n_users=150, n_sets=120, n_topics=12, chapters_per_topic=10, vocab_size=600, rng_seed=3)
    base.update(kw)
    return synthgen.SynthConfig(**base)


@pytest.fixture(scope="session")
def tiny_config():
    return _tiny_synth()


@pytest.fixture(scope="session")
def tiny_catalog(tiny_config):
    return synthgen.generate_catalog(tiny_config)


@pytest.fixture(scope="session")
def tiny_sessions(tiny_config, tiny_catalog):
    return synthgen.generate_sessions(tiny_config, tiny_catalog)


@pytest.fixture(scope="session")
def tiny_vectors(tiny_catalog):
    _, ids, vecs = textvec.embed_catalog(tiny_catalog, dim=16, epochs=5, seed=0)
    return ids, vecs


# -- acceptance verdicts ---------------------------------------------------------

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Store and print one pass/fail line; the terminal summary repeats all of them."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
