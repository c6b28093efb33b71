import numpy as np
import pytest

import htsolve.hsvd as H
from htsolve.htree import build_balanced_tree, build_linear_tree
from htsolve.tensorfile import load_htensor, save_htensor


@pytest.mark.parametrize("build,d", [(build_balanced_tree, 2),
                                     (build_balanced_tree, 4),
                                     (build_linear_tree, 3),
                                     (build_linear_tree, 5)])
def test_round_trip(tmp_path, build, d):
    rng = np.random.default_rng(d)
    tree = build(d)
    dims = tuple(int(n) for n in rng.integers(2, 6, size=d))
    h = H.orthogonalize(H.random_htensor(tree, dims, 3, rng))
    path = tmp_path / "t.ht"
    save_htensor(h, path)
    back = load_htensor(path)
    assert back.tree == h.tree
    assert back.dims == h.dims
    assert back.ranks == h.ranks
    assert back.orthogonal == h.orthogonal
    for i in range(d):
        assert np.array_equal(back.frames[i], h.frames[i])
    for node in h.transfer:
        assert np.array_equal(back.transfer[node], h.transfer[node])
    assert np.array_equal(back.root_transfer, h.root_transfer)


def test_round_trip_zero_tensor(tmp_path):
    tree = build_balanced_tree(3)
    h = H.zero_htensor(tree, (4, 5, 6))
    path = tmp_path / "z.ht"
    save_htensor(h, path)
    back = load_htensor(path)
    assert back.ranks == (0, 0, 0)
    assert H.norm(back) == 0.0


def test_save_deterministic(tmp_path):
    rng = np.random.default_rng(99)
    h = H.random_htensor(build_balanced_tree(3), (3, 4, 3), 2, rng)
    p1, p2 = tmp_path / "a.ht", tmp_path / "b.ht"
    save_htensor(h, p1)
    save_htensor(h, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_corruption(tmp_path):
    rng = np.random.default_rng(5)
    h = H.random_htensor(build_balanced_tree(2), (3, 3), 2, rng)
    path = tmp_path / "t.ht"
    save_htensor(h, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "m.ht"
    bad_magic.write_bytes(b"XTENSOR" + raw[7:])
    with pytest.raises(ValueError, match="magic"):
        load_htensor(bad_magic)

    bad_version = tmp_path / "v.ht"
    bad_version.write_bytes(raw.replace(b"HTENSOR 1", b"HTENSOR 99", 1))
    with pytest.raises(ValueError, match="version"):
        load_htensor(bad_version)

    truncated = tmp_path / "s.ht"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_htensor(truncated)

    trailing = tmp_path / "l.ht"
    trailing.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(ValueError, match="trailing"):
        load_htensor(trailing)

    not_tensor = tmp_path / "n.ht"
    not_tensor.write_bytes(b"hello world")
    with pytest.raises(ValueError):
        load_htensor(not_tensor)
