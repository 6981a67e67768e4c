#!/usr/bin/env python3
"""Generates data/default_body.json, the synthetic 25-region vascular topology.

Layout: a one-turn helical heart segment centred on the origin, with 24
straight peripheral corridors leaving the heart's exit/entry point along 12
directions. Each corridor is an arterial run (optionally starting with an
aortic piece) on the anterior plane, a V-shaped transition at the tip, and a
venous run directly beneath the artery on the posterior plane back to the
heart. Two corridors share each direction: the first on the direction's axis,
the second shifted sideways by LANE_OFFSET once clear of the heart, so the two
lie between 1 and 2 cm apart along the shorter one's whole length.
Mirrored pairs are reflections in x and therefore share loop times.
"""

import argparse
import json
import math

ARTERY_Z = 0.5
VEIN_Z = -0.5
HEART_LENGTH = 5.0
HEART_SPEED = 5.0
HEART_PIECES = 24

LANE_OFFSET = 1.5  # cm, sideways shift of a direction's second corridor
LANE_SPLIT = 2.0   # cm along the direction where the second corridor reaches its lane

# name, direction in degrees (0 = towards the head, positive = +x), lane (0 on
# the axis, +1/-1 shifted towards +x/-x when viewed head-up), corridor length
# (cm), aortic length (cm), vein speed (cm/s), target loop time (s). The
# transition length is solved from the target loop time.
REGIONS = [
    ("head", 0.0, 0, 30.0, 10.0, 4.0, 17.5),
    ("neck", 0.0, 1, 14.0, 0.0, 4.0, 10.0),
    ("left_arm", 60.0, 0, 65.0, 10.0, 2.0, 43.5),
    ("right_arm", -60.0, 0, 65.0, 10.0, 2.0, 43.5),
    ("left_lung", 60.0, -1, 16.0, 0.0, 4.0, 11.5),
    ("right_lung", -60.0, 1, 16.0, 0.0, 4.0, 11.5),
    ("left_leg", 150.0, 0, 95.0, 30.0, 2.0, 60.5),
    ("right_leg", -150.0, 0, 95.0, 30.0, 2.0, 60.5),
    ("left_kidney", 150.0, -1, 22.0, 0.0, 4.0, 14.5),
    ("right_kidney", -150.0, 1, 22.0, 0.0, 4.0, 14.5),
    ("upper_back", 30.0, 0, 30.0, 0.0, 4.0, 20.5),
    ("upper_chest", 30.0, 1, 10.0, 0.0, 4.0, 7.0),
    ("diaphragm", -30.0, 0, 30.0, 0.0, 4.0, 22.0),
    ("liver", -30.0, 1, 20.0, 0.0, 4.0, 13.0),
    ("pancreas", 90.0, 0, 28.0, 0.0, 4.0, 19.0),
    ("stomach", 90.0, 1, 12.0, 0.0, 4.0, 8.5),
    ("gallbladder", -90.0, 0, 32.0, 0.0, 4.0, 23.5),
    ("spleen", -90.0, 1, 24.0, 0.0, 4.0, 16.0),
    ("lower_back", 120.0, 0, 50.0, 0.0, 4.0, 29.5),
    ("large_intestine", 120.0, 1, 44.0, 0.0, 4.0, 26.5),
    ("pelvis", -120.0, 0, 52.0, 0.0, 4.0, 31.0),
    ("small_intestine", -120.0, 1, 40.0, 0.0, 4.0, 25.0),
    ("reproductive", 180.0, 0, 55.0, 0.0, 4.0, 32.5),
    ("bladder", 180.0, 1, 48.0, 0.0, 4.0, 28.0),
]

MIRRORED = [
    ("left_arm", "right_arm"),
    ("left_leg", "right_leg"),
    ("left_lung", "right_lung"),
    ("left_kidney", "right_kidney"),
]


def heart_polyline():
    # Solve the helix radius so the polyline length is exactly HEART_LENGTH.
    dz = (ARTERY_Z - VEIN_Z) / HEART_PIECES
    piece = HEART_LENGTH / HEART_PIECES
    chord = math.sqrt(piece * piece - dz * dz)
    radius = chord / (2.0 * math.sin(math.pi / HEART_PIECES))
    points = []
    for i in range(HEART_PIECES + 1):
        theta = 2.0 * math.pi * i / HEART_PIECES
        # Start at (0, -r): the point of the heart closest to the head.
        points.append([radius * math.sin(theta), -radius * math.cos(theta),
                       VEIN_Z + dz * i])
    points[-1][0] = 0.0
    points[-1][1] = -radius
    return radius, points


def r6(v):
    return [round(c, 9) for c in v]


def build():
    radius, heart = heart_polyline()
    hub = (0.0, -radius)
    segments = [{
        "id": "heart",
        "kind": "heart",
        "region": "heart",
        "speed_cm_s": HEART_SPEED,
        "polyline_cm": [r6(p) for p in heart],
        "successors": [],
    }]
    regions = [{"id": "heart", "segments": ["heart"]}]
    for name, deg, lane, length, aorta_len, vein_speed, target in REGIONS:
        phi = math.radians(deg)
        ux, uy = math.sin(phi), -math.cos(phi)
        px, py = math.cos(phi), math.sin(phi)
        side = lane * LANE_OFFSET

        def at(s, z, b=side):
            return [hub[0] + ux * s + px * b, hub[1] + uy * s + py * b, z]

        def path(z):
            # Axis corridors run straight out; lane corridors first step
            # sideways into their lane.
            if lane == 0:
                return [at(aorta_len, z), at(length, z)]
            if aorta_len > 0:
                raise SystemExit(f"{name}: lane corridors have no aortic piece")
            return [at(0.0, z, 0.0), at(LANE_SPLIT, z), at(length, z)]

        artery = path(ARTERY_Z)
        artery_len = sum(math.dist(p, q) for p, q in zip(artery, artery[1:]))
        transition_len = (target - HEART_LENGTH / HEART_SPEED - aorta_len / 20.0
                          - artery_len / 10.0 - (aorta_len + artery_len) / vein_speed)
        if transition_len < 2.0:
            raise SystemExit(f"{name}: transition too short ({transition_len})")
        reach = math.sqrt((transition_len / 2.0) ** 2 - 0.25)
        members = []
        first = None
        if aorta_len > 0:
            segments.append({
                "id": f"{name}_aorta", "kind": "aorta", "region": name,
                "speed_cm_s": 20.0,
                "polyline_cm": [r6(at(0.0, ARTERY_Z)), r6(at(aorta_len, ARTERY_Z))],
                "successors": [{"segment": f"{name}_artery", "weight": 1.0}],
            })
            members.append(f"{name}_aorta")
            first = f"{name}_aorta"
        segments.append({
            "id": f"{name}_artery", "kind": "artery", "region": name,
            "speed_cm_s": 10.0,
            "polyline_cm": [r6(p) for p in artery],
            "successors": [{"segment": f"{name}_transition", "weight": 1.0}],
        })
        members.append(f"{name}_artery")
        first = first or f"{name}_artery"
        segments.append({
            "id": f"{name}_transition", "kind": "transition", "region": name,
            "speed_cm_s": 1.0,
            "polyline_cm": [r6(at(length, ARTERY_Z)), r6(at(length + reach, 0.0)),
                            r6(at(length, VEIN_Z))],
            "successors": [{"segment": f"{name}_vein", "weight": 1.0}],
        })
        members.append(f"{name}_transition")
        vein = [at(0.0, VEIN_Z)] if aorta_len > 0 else []
        vein = list(reversed(path(VEIN_Z))) + vein
        segments.append({
            "id": f"{name}_vein", "kind": "vein", "region": name,
            "speed_cm_s": vein_speed,
            "polyline_cm": [r6(p) for p in vein],
            "successors": [{"segment": "heart", "weight": 1.0}],
        })
        members.append(f"{name}_vein")
        segments[0]["successors"].append({"segment": first, "weight": 1.0})
        regions.append({"id": name, "segments": members})

    return {
        "schema_version": 1,
        "heart_region": "heart",
        "anchor_position_cm": [0.0, 0.0, 2.0],
        "mirrored_pairs": [list(p) for p in MIRRORED],
        "regions": regions,
        "segments": segments,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/default_body.json")
    args = parser.parse_args()
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(build(), fh, indent=1)
        fh.write("\n")


if __name__ == "__main__":
    main()
