import numpy as np
import pytest

from multikge.graph import build_graph, attach_attributes


def random_graph(seed, num_entities=20, num_triples=60, num_relations=3, types=None):
    rng = np.random.default_rng(seed)
    labeled = set()
    while len(labeled) < num_triples:
        h, t = rng.integers(num_entities, size=2)
        r = rng.integers(num_relations)
        labeled.add((f"n{h}", f"r{r}", f"n{t}"))
    return build_graph(sorted(labeled), types)


@pytest.fixture
def toy_kg():
    """Five entities, one attribute entity per modality."""
    labeled = [
        ("p", "binds", "m"), ("m", "treats", "d"), ("p", "assoc", "d"),
        ("x", "binds", "m"), ("y", "assoc", "d"), ("x", "treats", "y"),
        ("p", "binds", "x"),
    ]
    types = {"p": "protein", "m": "drug", "d": "disease", "x": "protein", "y": "pathway"}
    kg = build_graph(labeled, types)
    return attach_attributes(kg, records=[
        ("p", "protein", "MKVLA"),
        ("m", "molecule", "CC(=O)O"),
        ("d", "text", "chronic inflammatory disorder of the skin"),
    ])


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
