from gatrec.graph import build_graph
from gatrec.dataset import load_interactions
from gatrec.synthetic import N_SPARSE_USERS, N_USERS, generate, write_fixture


def test_bundled_fixture_matches_generator(tmp_path, synthetic_dir):
    write_fixture(tmp_path)
    for name in ("ratings.tsv", "items.tsv", "catalog.tsv"):
        assert (tmp_path / name).read_bytes() == (synthetic_dir / name).read_bytes()


def test_generator_deterministic_and_seeded():
    a, b, c = generate(), generate(), generate(seed=1)
    assert a[0] == b[0] and a[0] != c[0]


def test_fixture_shape(synthetic_dir):
    xs = load_interactions(synthetic_dir / "ratings.tsv", "ML100K")
    users = {x.user_id for x in xs}
    assert users == set(range(1, N_USERS + 1))
    per_user = {u: sum(1 for x in xs if x.user_id == u) for u in users}
    assert sum(n < 8 for n in per_user.values()) == N_SPARSE_USERS
    assert {x.rating for x in xs} == {1, 2, 3, 4, 5}
    g = build_graph(xs)
    assert 0 < len(g.positive_edges()) < len(g.edges)
