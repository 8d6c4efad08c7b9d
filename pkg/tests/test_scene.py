import json
import math

import numpy as np
import pytest

from graspadapt.errors import FormatError
from graspadapt.scene import Scene, default_scene_objects, extrinsics_error, load_scene, scene_from_json
from graspadapt.se3 import IDENTITY, SampleRange, compose, error_between, inverse
from graspadapt.world import DEFAULT_REFERENCE_EEF, observe


def test_defaults():
    s = Scene()
    assert [o.name for o in s.objects] == ["bar"] and len(s.objects[0]) == 256
    assert [o.name for o in default_scene_objects()] == ["bar", "hammer", "lshape", "random"]
    assert s.collect_range == SampleRange(0.30, 60)
    assert s.servo.total_steps == 20 and s.servo.gain == 0.7
    assert s.protocol.grasps == 4 and s.protocol.deployments == 5


def test_empty_document_equals_defaults():
    assert scene_from_json({}) == Scene()


def test_camera_faces_reference_pose():
    w = Scene().world()
    rel = compose(inverse(w.eef_pose), w.camera.pose_WC)
    assert math.dist(rel.t, (0.6, 0, 0)) < 1e-12
    assert len(observe(w, np.random.default_rng(0))) > 0


@pytest.mark.parametrize("mm,deg", [(0, 0), (10, 0), (0, 5), (10, 5)])
def test_extrinsics_error_magnitude(mm, deg):
    e = error_between(extrinsics_error(mm, deg), IDENTITY)
    assert e.position_mm == pytest.approx(mm, abs=1e-9)
    assert e.orientation_deg == pytest.approx(deg, abs=1e-9)


def test_extrinsics_error_only_moves_belief():
    s = Scene(extrinsics_error=extrinsics_error(10, 5))
    w, w0 = s.world(), Scene().world()
    assert w.camera.pose_WC == w0.camera.pose_WC
    assert error_between(w.camera.believed_pose_WC, w0.camera.believed_pose_WC).position_mm > 1


def test_structured_dropout_in_world():
    w = Scene(structured_dropout=0.7).world()
    assert w.camera.dropout_region is not None


def test_load_scene_file(tmp_path):
    doc = {
        "objects": [{"kind": "lshape", "points": 32, "seed": 2}],
        "camera": {"noise_sigma": 0.0, "extrinsics_error": [5, 0]},
        "occlusion": None,
        "collect": {"range": [0.1, 20], "m": 10, "fine_m": 0},
        "estimator": {"estimator": "oracle", "noise_t_mm": 1.0},
        "servo": {"gain": 1.0},
        "protocol": {"grasps": 2, "tolerances_mm": [1, 2]},
    }
    (tmp_path / "s.json").write_text(json.dumps(doc))
    s = load_scene(tmp_path / "s.json")
    assert s.objects[0].name == "lshape" and len(s.objects[0]) == 32
    assert s.occlusion is None and s.noise_sigma == 0.0 and s.m == 10
    assert s.estimator.estimator == "oracle" and s.servo.gain == 1.0
    assert s.protocol.tolerances_mm == (1.0, 2.0)
    assert s.reference_eef == DEFAULT_REFERENCE_EEF


def test_serialized_object_entry(tmp_path):
    obj = default_scene_objects(16)[1]
    s = scene_from_json({"objects": [obj.to_json()]})
    assert s.objects[0] == obj


@pytest.mark.parametrize(
    "doc",
    [
        {"estimator": {"estimator": "neural"}},
        {"protocol": {"tolerances_mm": [4, 2]}},
        {"objects": [{"kind": "spoon"}]},
        {"camera": {"structured_dropout": 1.5}},
        {"servo": {"gain": 0}},
        {"collect": {"range": [0.1]}},
    ],
)
def test_bad_sections(doc):
    with pytest.raises(FormatError):
        scene_from_json(doc)


def test_bad_files(tmp_path):
    (tmp_path / "a.json").write_text("{")
    (tmp_path / "b.json").write_text("[1, 2]")
    for name in ("a.json", "b.json"):
        with pytest.raises(FormatError):
            load_scene(tmp_path / name)
    with pytest.raises(OSError):
        load_scene(tmp_path / "missing.json")
