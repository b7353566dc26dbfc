import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capegraph.annotations import (AnnotationError, InsufficientDataError, parse_annotations,
                                   sample_episode, serialize_annotations, unify_index_base)
from capegraph.graph import Skeleton
from capegraph.synthetic import write_pgm

FIXTURE = Path(__file__).parent / "fixtures" / "one_based.json"


def doc(skeleton, k=3, **extra):
    return {"categories": [{"id": 1, "name": "c", "keypoints": [f"k{i}" for i in range(k)],
                            "skeleton": skeleton, **extra}],
            "annotations": []}


def test_one_based_skeleton_is_shifted():
    ds = parse_annotations(doc([[1, 2], [2, 3]]))
    assert ds.categories[0].skeleton.edges == ((0, 1), (1, 2))


def test_zero_based_skeleton_unchanged():
    ds = parse_annotations(doc([[0, 1], [1, 2]]))
    assert ds.categories[0].skeleton.edges == ((0, 1), (1, 2))


def test_out_of_range_index_names_category():
    with pytest.raises(AnnotationError, match="'c'"):
        parse_annotations(doc([[0, 5]]))


def test_unify_index_base_rule():
    assert unify_index_base([(1, 2), (3, 4)], 4).edges == ((0, 1), (2, 3))
    assert unify_index_base([(0, 3)], 4).edges == ((0, 3),)
    with pytest.raises(AnnotationError, match="irreconcilable"):
        unify_index_base([(0, 4)], 4)
    with pytest.raises(AnnotationError):
        unify_index_base([(-1, 2)], 4)


@settings(max_examples=80, deadline=None)
@given(k=st.integers(2, 12), data=st.data())
def test_unify_is_idempotent(k, data):
    one_based = data.draw(st.booleans())
    pairs = data.draw(st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1))
                               .filter(lambda p: p[0] != p[1]), min_size=1, max_size=6, unique=True))
    if one_based:
        pairs = [(i + 1, j + 1) for i, j in pairs]
    try:
        once = unify_index_base(pairs, k)
    except (AnnotationError, ValueError):
        return
    twice = unify_index_base(list(once.edges), k)
    assert once == twice


def test_malformed_json_reports_location():
    with pytest.raises(AnnotationError, match=r"line 2, column"):
        parse_annotations('{"categories": [],\n "annotations": [}')


def test_missing_key_reports_path():
    bad = doc([[0, 1]])
    bad["annotations"] = [{"category_id": 1, "bbox": [0, 0, 1, 1], "keypoints": [0] * 9}]
    with pytest.raises(AnnotationError, match=r"annotations\[0\].*image_path"):
        parse_annotations(bad)


def test_keypoint_count_and_visibility_checked():
    bad = doc([[0, 1]])
    bad["annotations"] = [{"image_path": "x", "category_id": 1, "bbox": [0, 0, 1, 1], "keypoints": [0] * 6}]
    with pytest.raises(AnnotationError, match="expected 9"):
        parse_annotations(bad)
    bad["annotations"][0]["keypoints"] = [0, 0, 3] * 3
    with pytest.raises(AnnotationError, match="visibility"):
        parse_annotations(bad)


def test_visible_keypoint_outside_image_rejected():
    bad = doc([[0, 1]])
    bad["annotations"] = [{"image_path": "x", "category_id": 1, "bbox": [0, 0, 1, 1],
                           "keypoints": [0, 0, 2, 70, 0, 2, 1, 1, 0], "width": 64, "height": 64}]
    with pytest.raises(AnnotationError, match="outside"):
        parse_annotations(bad)


def test_fixture_round_trip_is_fixpoint():
    first = parse_annotations(FIXTURE.read_text())
    assert first.category(7).skeleton == Skeleton(4, ((0, 3), (1, 3), (2, 3)))
    assert first.category(9).skeleton.edges == ((0, 1), (1, 2))
    text = serialize_annotations(first)
    second = parse_annotations(text)
    assert second == first
    assert serialize_annotations(second) == text


def _write_dataset(tmp_path, n_instances, k=3):
    anns = []
    for i in range(n_instances):
        img = np.zeros((32, 32))
        img[i % 32, :] = 1.0
        write_pgm(tmp_path / f"im{i}.pgm", img)
        kps = []
        for j in range(k):
            kps += [4.0 * j + 1, 2.0 * i + 1, 2]
        anns.append({"image_path": f"im{i}.pgm", "category_id": 1, "bbox": [0, 0, 16, 16],
                     "keypoints": kps, "width": 32, "height": 32})
    d = doc([[0, 1], [1, 2]], k=k)
    d["annotations"] = anns
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(d))
    return parse_annotations(d, root=tmp_path)


def test_sample_episode_one_shot(tmp_path):
    ds = _write_dataset(tmp_path, 2)
    ep = sample_episode(ds, 1, 1, np.random.default_rng(0), image_size=64)
    assert ep.n_shots == 1
    assert ep.support_images[0].shape == (64, 64)
    # keypoints and bbox are rescaled by 64 / 32
    ys = {float(ep.support_keypoints[0][0, 1]), float(ep.query_keypoints[0, 1])}
    assert ys == {2.0, 6.0}
    assert ep.query_bbox == (0.0, 0.0, 32.0, 32.0)


def test_sample_episode_insufficient(tmp_path):
    ds = _write_dataset(tmp_path, 3)
    with pytest.raises(InsufficientDataError):
        sample_episode(ds, 1, 5, np.random.default_rng(0), image_size=32)


def test_sample_episode_deterministic_and_disjoint(tmp_path):
    ds = _write_dataset(tmp_path, 8)
    for seed in range(10):
        a = sample_episode(ds, 1, 5, np.random.default_rng(seed), image_size=32)
        b = sample_episode(ds, 1, 5, np.random.default_rng(seed), image_size=32)
        rows = [float(kp[0, 1]) for kp in a.support_keypoints] + [float(a.query_keypoints[0, 1])]
        assert len(set(rows)) == 6  # supports and query are distinct instances
        assert all(np.array_equal(x, y) for x, y in zip(a.support_images, b.support_images))
        assert np.array_equal(a.query_keypoints, b.query_keypoints)
        assert a.valid.shape == (3,) and a.valid.all()
