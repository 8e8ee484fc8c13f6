import math
import struct
import zlib

import numpy as np
import pytest

from spsg.nn import Network, backward_input
from spsg.oracle import QueryMode, QueryResponse, VictimOracle
from spsg.spgq import (
    QS_MAGIC, QuerySetIntegrityError, build_query_set, load_query_set, pixel_fd_gradient,
    query_set_bytes, query_set_from_bytes, save_query_set, scalarize, superpixel_fd_gradient,
)
from spsg.superpixel import Segmentation, segment, segment_grid

from stubs import affine_oracle as _affine_oracle


def _rel(a, b):
    return np.max(np.abs(a - b) / np.abs(b))


def test_scalarize_examples():
    p1 = QueryResponse(QueryMode.PROBABILITY, 0, 1.0, np.array([1.0, 0.0]))
    assert scalarize(p1, 0) == 0.0
    pe = QueryResponse(QueryMode.PROBABILITY, 1, 1 - math.exp(-1), np.array([math.exp(-1), 1 - math.exp(-1)]))
    assert scalarize(pe, 0) == pytest.approx(1.0, abs=1e-15)
    flipped = QueryResponse(QueryMode.HARD_LABEL, 2, 0.5)
    assert scalarize(flipped, 0) == pytest.approx(0.6931, abs=1e-4)
    same = QueryResponse(QueryMode.HARD_LABEL, 0, 0.8)
    assert scalarize(same, 0) == pytest.approx(-math.log(0.8))
    zero = QueryResponse(QueryMode.PROBABILITY, 1, 1.0, np.array([0.0, 1.0]))
    assert scalarize(zero, 0) == pytest.approx(-math.log(1e-12))
    certain_flip = QueryResponse(QueryMode.HARD_LABEL, 1, 1.0)
    assert scalarize(certain_flip, 0) == pytest.approx(-math.log(1e-12))


def test_pixel_fd_affine_exact():
    x = np.random.default_rng(1).random((2, 5, 4))
    oracle, w = _affine_oracle((2, 5, 4), x=x)
    q = pixel_fd_gradient(oracle, x, 1e-5)
    assert _rel(q, w) < 1e-9
    assert oracle.ledger.total_queries == 2 * 5 * 4 + 1


def test_superpixel_fd_affine_exact_sum_and_mean():
    x = np.random.default_rng(3).random((3, 6, 6))
    oracle, w = _affine_oracle((3, 6, 6), seed=2, x=x)
    seg = segment_grid(x, 4)
    rec = superpixel_fd_gradient(oracle, x, seg, 1e-5)
    sums = np.array([[w[c][seg.labels == j].sum() for c in range(3)] for j in range(seg.n_segments)])
    assert _rel(rec.g * seg.sizes[:, None], sums) < 1e-9
    assert _rel(rec.g, sums / seg.sizes[:, None]) < 1e-9
    assert oracle.ledger.total_queries == 3 * seg.n_segments + 1


def test_pixel_fd_matches_autodiff_on_small_cnn():
    net = Network("conv:3:3,relu,maxpool:2,dense:5", (1, 8, 8), seed=4)
    x = np.random.default_rng(4).random((1, 8, 8))
    q = pixel_fd_gradient(VictimOracle(net), x)
    ref = backward_input(net, x, int(net.predict(x[None])[0]))
    mask = np.abs(ref) > 1e-6
    assert np.max(np.abs(q - ref)[mask] / np.abs(ref[mask])) < 1e-3


def test_superpixel_fd_matches_autodiff_mean():
    net = Network("conv:4:3,relu,maxpool:2,dense:6", (3, 12, 12), seed=5)
    x = np.random.default_rng(5).random((3, 12, 12))
    seg = segment(x, "slic", k=9)
    rec = superpixel_fd_gradient(VictimOracle(net), x, seg)
    ref = backward_input(net, x, rec.base_label)
    expect = np.array([[ref[c][seg.labels == j].mean() for c in range(3)] for j in range(seg.n_segments)])
    mask = np.abs(expect) > 1e-6
    assert np.max(np.abs(rec.g - expect)[mask] / np.abs(expect[mask])) < 1e-3


def test_record_shapes_and_cached_responses():
    net = Network("dense:4", (2, 4, 4), seed=6)
    oracle = VictimOracle(net)
    x = np.random.default_rng(6).random((2, 4, 4))
    seg = segment_grid(x, 2)
    rec = superpixel_fd_gradient(oracle, x, seg, 1e-5, "img")
    assert rec.g.shape == rec.perturbed.shape == (4, 2)
    assert np.all(np.isfinite(rec.g))
    # cached responses are exactly what the victim says for x + eps·E_j^c
    j, c = 2, 1
    assert VictimOracle(net).query(rec.perturbation(j, c)) == rec.perturbed[j, c]
    assert np.count_nonzero(rec.perturbation(j, c) - x) == seg.sizes[j]


def test_mode_consistency_on_base_label():
    net = Network("dense:3", (1, 4, 4), seed=8)
    x = np.random.default_rng(8).random((1, 4, 4))
    seg = segment_grid(x, 2)
    soft = superpixel_fd_gradient(VictimOracle(net), x, seg)
    hard = superpixel_fd_gradient(VictimOracle(net, QueryMode.HARD_LABEL), x, seg)
    assert soft.base.top_label == hard.base.top_label


def test_zero_flip_policy_gives_zero_gradient():
    # the base label flips for every perturbation with a huge epsilon
    net = Network("dense:2", (1, 2, 2))
    import torch
    with torch.no_grad():
        net.module[-1].weight.copy_(torch.tensor([[0.0] * 4, [1.0] * 4], dtype=torch.float64))
        net.module[-1].bias.copy_(torch.tensor([0.5, 0.0], dtype=torch.float64))
    x = np.zeros((1, 2, 2))
    seg = segment_grid(x, 1)
    rec = superpixel_fd_gradient(VictimOracle(net, "hard_label"), x, seg, epsilon=2.0, flip_policy="zero")
    assert np.all(rec.g == 0)
    rec = superpixel_fd_gradient(VictimOracle(net, "hard_label"), x, seg, epsilon=2.0)
    assert np.all(rec.g != 0)


def test_fd_argument_checks():
    oracle, _ = _affine_oracle((1, 3, 3))
    with pytest.raises(ValueError):
        pixel_fd_gradient(oracle, np.zeros((1, 3, 3)), 0.0)
    with pytest.raises(ValueError):
        superpixel_fd_gradient(oracle, np.zeros((1, 3, 3)), segment_grid(np.zeros((1, 4, 4)), 2))


def test_pixel_fd_query_count_rgb():
    oracle, _ = _affine_oracle((3, 16, 16))
    pixel_fd_gradient(oracle, np.random.default_rng(0).random((3, 16, 16)))
    assert oracle.ledger.total_queries == 3 * 16 * 16 + 1


def test_build_query_set_counts():
    net = Network("dense:3", (3, 6, 6), seed=1)
    oracle = VictimOracle(net)
    images = np.random.default_rng(1).random((1, 3, 6, 6))
    qs = build_query_set(oracle, images, "grid", {"block": 6}, gradient_fraction=1.0)
    assert qs.ledger["total_queries"] == 4 == oracle.ledger.total_queries

    oracle = VictimOracle(net)
    images = np.random.default_rng(2).random((5, 3, 6, 6))
    qs = build_query_set(oracle, images, "slic", {"k": 4}, gradient_fraction=1.0)
    expect = sum(3 * r.segmentation.n_segments + 1 for r in qs.records)
    assert qs.ledger["total_queries"] == expect == oracle.ledger.total_queries


def test_build_query_set_gradient_subset_and_header():
    net = Network("dense:3", (1, 5, 5), seed=1)
    images = np.random.default_rng(3).random((20, 1, 5, 5))
    qs = build_query_set(VictimOracle(net), images, "grid", {"block": 5}, gradient_fraction=0.25, seed=7)
    assert len(qs) == 20 and len(qs.gradient_records) == 5
    assert qs.ledger["total_queries"] == 15 + 5 * 2
    h = qs.header
    for key in ("epsilon", "segmentation_method", "segmentation_params", "query_mode", "flip_policy",
                "victim_fingerprint", "seed", "scalar_functional", "gradient_fraction"):
        assert key in h
    again = build_query_set(VictimOracle(net), images, "grid", {"block": 5}, gradient_fraction=0.25, seed=7)
    assert query_set_bytes(qs) == query_set_bytes(again)
    other = build_query_set(VictimOracle(net), images, "grid", {"block": 5}, gradient_fraction=0.25, seed=8)
    assert [r.has_gradient for r in other.records] != [r.has_gradient for r in qs.records]


def test_build_query_set_rejects_empty_and_reports_image():
    net = Network("dense:3", (1, 5, 5))
    with pytest.raises(ValueError):
        build_query_set(VictimOracle(net), np.zeros((0, 1, 5, 5)))
    with pytest.raises(RuntimeError, match="img-a"):
        build_query_set(VictimOracle(net), np.zeros((2, 1, 5, 5)), "grid", {"block": -1},
                        gradient_fraction=1.0, image_ids=["img-a", "img-b"])


@pytest.mark.parametrize("mode", ["probability", "hard_label"])
def test_query_set_roundtrip(tmp_path, mode):
    net = Network("conv:2:3,dense:4", (3, 8, 8), seed=2)
    images = np.random.default_rng(4).random((6, 3, 8, 8))
    qs = build_query_set(VictimOracle(net, mode), images, "slic", {"k": 5}, gradient_fraction=0.5, seed=1)
    path = tmp_path / "qs.spsgqs"
    save_query_set(qs, path)
    back = load_query_set(path)
    assert back.header == qs.header and back.ledger == qs.ledger
    for a, b in zip(qs.records, back.records):
        assert a.image_id == b.image_id and np.array_equal(a.image, b.image) and a.base == b.base
        assert a.has_gradient == b.has_gradient
        if a.has_gradient:
            assert np.array_equal(a.segmentation.labels, b.segmentation.labels)
            assert np.array_equal(a.g, b.g)
            assert all(x == y for x, y in zip(a.perturbed.ravel(), b.perturbed.ravel()))
    assert query_set_bytes(back) == path.read_bytes()


def test_large_label_maps_use_16_bit_pgm():
    net = Network("dense:2", (1, 20, 20))
    qs = build_query_set(VictimOracle(net), np.random.default_rng(0).random((1, 1, 20, 20)),
                         "grid", {"block": 1}, gradient_fraction=1.0)
    back = query_set_from_bytes(query_set_bytes(qs))
    assert back.records[0].segmentation.n_segments == 400


@pytest.fixture
def blob():
    net = Network("dense:3", (1, 4, 4), seed=3)
    qs = build_query_set(VictimOracle(net), np.random.default_rng(5).random((3, 1, 4, 4)),
                         "grid", {"block": 2}, gradient_fraction=1.0)
    return query_set_bytes(qs)


def test_truncated_file_rejected(blob):
    for cut in (5, len(blob) // 2, len(blob) - 1):
        with pytest.raises(QuerySetIntegrityError):
            query_set_from_bytes(blob[:cut])


def test_bit_flip_rejected(blob):
    corrupt = bytearray(blob)
    corrupt[len(blob) // 2] ^= 0x40
    with pytest.raises(QuerySetIntegrityError):
        query_set_from_bytes(bytes(corrupt))


def test_bad_magic_and_version(blob):
    with pytest.raises(QuerySetIntegrityError):
        query_set_from_bytes(b"XXXXXXX\n" + blob[8:])
    body = bytearray(blob[:-4])
    body[len(QS_MAGIC)] = 9
    body = bytes(body)
    with pytest.raises(QuerySetIntegrityError, match="version"):
        query_set_from_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _reseal(blob: bytes, patch) -> bytes:
    """Apply ``patch`` to the first record body and recompute both checksums."""
    pos = len(QS_MAGIC) + 1
    (hlen,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4 + hlen + 4
    (rlen,) = struct.unpack("<I", blob[pos:pos + 4])
    body = patch(bytearray(blob[pos + 4:pos + 4 + rlen]))
    out = blob[:pos + 4] + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))) + blob[pos + 8 + rlen:-4]
    return out + struct.pack("<I", zlib.crc32(out))


def test_header_record_policy_mismatch_rejected(blob):
    def bump_epsilon(body):
        (n,) = struct.unpack("<H", body[:2])
        off = 2 + n + 1
        body[off:off + 8] = struct.pack("<d", 2e-5)
        return body

    def switch_mode(body):
        (n,) = struct.unpack("<H", body[:2])
        body[2 + n] = 1
        return body

    query_set_from_bytes(_reseal(blob, lambda b: b))
    for patch in (bump_epsilon, switch_mode):
        with pytest.raises(QuerySetIntegrityError, match="disagree"):
            query_set_from_bytes(_reseal(blob, patch))


def test_perturbation_reconstruction_matches_segmentation():
    x = np.zeros((2, 3, 3))
    labels = np.array([[0, 0, 1], [0, 1, 1], [2, 2, 2]])
    from spsg.spgq import perturbation_batch
    batch = perturbation_batch(x, labels, 3, 0.5)
    assert batch.shape == (6, 2, 3, 3)
    # (j=1, c=0) is row 2
    assert np.array_equal(batch[2][0], 0.5 * (labels == 1)) and np.all(batch[2][1] == 0)
    seg = Segmentation(labels, "grid")
    assert seg.n_segments == 3
