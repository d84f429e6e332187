"""Independent forward-kinematics oracle: plain 4x4 homogeneous products.

Writes fixtures/fk_oracle.rs.in with frozen (q, pose) pairs for the 6-DOF
fixture. Pose = [x, y, z, roll, pitch, yaw] with R = Rz(yaw) Ry(pitch) Rx(roll).
"""
import json
import pathlib

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent


def rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def homog(rot, trans):
    t = np.eye(4)
    t[:3, :3] = rot
    t[:3, 3] = trans
    return t


def offset(entry):
    r, p, y = entry.get("rpy", [0, 0, 0])
    return homog(rot_z(y) @ rot_y(p) @ rot_x(r), entry.get("xyz", [0, 0, 0]))


def axis_angle(axis, a):
    k = np.asarray(axis, float)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(a) * kx + (1 - np.cos(a)) * kx @ kx


def fk(chain, q):
    t = np.eye(4)
    for joint, angle in zip(chain["joints"], q):
        t = t @ offset(joint["offset"]) @ homog(axis_angle(joint["axis"], angle), [0, 0, 0])
    t = t @ offset(chain["ee_offset"])
    r = t[:3, :3]
    pitch = -np.arcsin(np.clip(r[2, 0], -1, 1))
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return [*t[:3, 3], roll, pitch, yaw]


def main():
    chain = json.loads((ROOT / "fixtures" / "six_dof.json").read_text())
    rng = np.random.default_rng(2024)
    rows = []
    for _ in range(8):
        q = rng.uniform(-2.5, 2.5, size=6)
        rows.append((q, fk(chain, q)))
    out = ["const ORACLE_FK: &[(&[f64], [f64; 6])] = &["]
    for q, pose in rows:
        qs = ", ".join(repr(float(v)) for v in q)
        ps = ", ".join(repr(float(v)) for v in pose)
        out.append(f"    (&[{qs}], [{ps}]),")
    out.append("];")
    (ROOT / "fixtures" / "fk_oracle.rs.in").write_text("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
