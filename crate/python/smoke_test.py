"""Smoke test for the Python bindings.

Build with `cargo build -p penalized-icp-py` and put the shared library on
the path as `penalized_icp.so`, or install the wheel from
`maturin build` in crates/python.
"""

import math
import tempfile
import os

import penalized_icp as picp


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    phi = [0.1, -0.2, 0.3]
    r = picp.exp_so3(phi)
    back = picp.log_so3(r)
    assert all(close(x, y, 1e-12) for x, y in zip(phi, back)), back
    assert picp.vee(picp.hat(phi)) == phi

    j = picp.left_jacobian(phi)
    jinv = picp.left_jacobian_inv(phi)
    for i in range(3):
        for k in range(3):
            s = sum(j[i][m] * jinv[m][k] for m in range(3))
            assert close(s, 1.0 if i == k else 0.0, 1e-12)

    ident = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    prior = picp.RotationPrior(r, [[1e-2, 0, 0], [0, 1e-2, 0], [0, 0, 1e-2]])
    beta = picp.rotation_error(r, ident)
    expected = sum(b * b for b in beta) / 1e-2
    assert close(prior.penalty(ident), expected, 1e-9 * expected)

    tp = picp.TranslationPrior([1.0, 2.0, 3.0], [[4.0, 0, 0], [0, 4.0, 0], [0, 0, 4.0]])
    assert close(tp.penalty([1.0, 2.0, 5.0]), 1.0, 1e-12)

    scene = picp.generate_scene("structured_room", density=8.0, extent=12.0, seed=3)
    truth = picp.RigidTransform.from_yaw(math.radians(4.0), [0.3, -0.2, 0.0])
    scan = picp.sample_scan(scene, truth, subsample=1.0, seed=4)
    cfg = picp.RegistrationConfig(max_correspondence_distance=2.0)
    result = picp.register(scan, scene, initial=picp.RigidTransform(), config=cfg)
    assert result.converged
    err = [a - b for a, b in zip(result.estimate.translation, truth.translation)]
    assert max(abs(e) for e in err) < 1e-6, err
    assert len(result.trace_costs) == result.iterations

    poses = [picp.RigidTransform.from_yaw(0.0, [float(i), 0.0, 0.0]) for i in range(200)]
    metrics = picp.kitti_metrics(poses, poses, [100.0])
    assert metrics["translation_error_percent"] == 0.0
    assert metrics["segments"] > 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scan.xyzb")
        scan.write(path, binary=True)
        assert len(picp.PointCloud.read(path)) == len(scan)

    try:
        picp.RegistrationConfig(trim_ratio=2.0)
    except picp.PenalizedIcpError:
        pass
    else:
        raise AssertionError("invalid trim_ratio accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
