"""Generate the shipped scenario scripts, the recorded teleop master log and
the offline waypoint examples. Start poses come from the numpy FK in
fk_oracle.py so the files do not depend on the Rust code under test.
"""
import csv
import json
import math
import pathlib

from fk_oracle import ROOT, fk

HOME = [0.0, -1.2, 1.5, -1.9, -1.5708, 0.0]
FC = 100


def load_chain():
    return json.loads((ROOT / "fixtures" / "six_dof.json").read_text())


def pose_at(base, dx=0.0, dy=0.0, dz=0.0, drpy=(0.0, 0.0, 0.0)):
    return [
        base[0] + dx,
        base[1] + dy,
        base[2] + dz,
        base[3] + drpy[0],
        base[4] + drpy[1],
        base[5] + drpy[2],
    ]


def script(name, duration, **extra):
    out = {
        "name": name,
        "chain": "../fixtures/six_dof.json",
        "fc": FC,
        "duration": duration,
        "robot": "arm",
        "initial_q": HOME,
        "tracking_lag": 0.0,
        "noise_std": 0.0,
        "seed": 7,
        "events": [],
    }
    out.update(extra)
    return out


def line_waypoints(base, n=7, d=0.5, length=0.18):
    return [
        {"pose": pose_at(base, dy=length * i / n, dz=-0.3 * length * i / n), "duration": d}
        for i in range(1, n + 1)
    ]


def circle_waypoints(base, n=18, d=0.5, radius=0.05):
    wps = []
    for i in range(1, n + 1):
        a = 2 * math.pi * i / n
        wps.append(
            {"pose": pose_at(base, dy=radius * math.sin(a), dz=radius * (1 - math.cos(a))), "duration": d}
        )
    return wps


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2) + "\n")


def main():
    chain = load_chain()
    base = [float(v) for v in fk(chain, HOME)]
    out = ROOT / "scenarios"
    out.mkdir(exist_ok=True)

    line = line_waypoints(base)
    write_json(
        out / "draw-line.json",
        script(
            "draw-line",
            4.5,
            path_check="line",
            events=[
                {"t": 0.0, "action": "send_request", "id": "line", "waypoints": line},
                {"t": 4.0, "action": "assert", "check": "at_rest", "tol": 1e-6},
                {"t": 4.0, "action": "assert", "check": "pose_near", "pose": line[-1]["pose"], "tol": 1e-4},
            ],
        ),
    )

    circle = circle_waypoints(base)
    write_json(
        out / "draw-circle.json",
        script(
            "draw-circle",
            10.0,
            path_check="circle",
            events=[
                {"t": 0.0, "action": "send_request", "id": "circle", "waypoints": circle},
                {"t": 9.5, "action": "assert", "check": "at_rest", "tol": 1e-6},
            ],
        ),
    )

    # Target drifts along y for 12 s, then stops; perception runs at 1 Hz.
    start = [base[0] + 0.04, base[1] - 0.04, base[2] - 0.06]
    write_json(
        out / "chase.json",
        script(
            "chase",
            17.0,
            chase={
                "start": 0.0,
                "period": 1.0,
                "segment_duration": 1.5,
                "grasp_threshold": 0.002,
                "grasp_cycles": 2,
            },
            events=[
                {"t": 0.0, "action": "move_target", "position": start, "velocity": [0.0, 0.008, 0.0]},
                {"t": 12.0, "action": "move_target",
                 "position": [start[0], start[1] + 0.096, start[2]], "velocity": [0.0, 0.0, 0.0]},
            ],
        ),
    )

    # Recorded master: 0.5 s at rest on the start pose, then smooth motion.
    rows = []
    for k in range(0, 501):
        t = k / 50
        s = max(t - 0.5, 0.0)
        rows.append(
            [
                round(t, 6),
                *pose_at(
                    base,
                    dx=0.02 * (1 - math.cos(0.6 * s)),
                    dy=0.05 * (1 - math.cos(0.9 * s)),
                    dz=-0.03 * (1 - math.cos(1.1 * s)),
                    drpy=(0.0, 0.0, 0.05 * (1 - math.cos(0.5 * s))),
                ),
            ]
        )
    with open(out / "teleop-master.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["timestamp", "x", "y", "z", "roll", "pitch", "yaw"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    write_json(
        out / "teleop-replay.json",
        script(
            "teleop-replay",
            10.5,
            teleop={
                "master_log": "teleop-master.csv",
                "rate": 25,
                "buffer": 5,
                "segment_duration": 0.04,
                "start": 0.0,
                "jitter": 0.0,
            },
        ),
    )

    write_json(ROOT / "fixtures" / "line_waypoints.json", line)
    write_json(ROOT / "fixtures" / "empty_waypoints.json", [])


if __name__ == "__main__":
    main()
