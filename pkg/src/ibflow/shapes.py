"""Synthetic test surfaces: cube, icosphere, straight/bent tubes, T-branch.

Generators emit triangle soups and route them through the standard surface
finalization (weld, orient, loop extraction), so every returned surface has
been through the same validation as an STL from disk.  Units are meters.
"""
from __future__ import annotations

import numpy as np

from .geometry import TriangleSurface, surface_from_triangles


def cube_surface(size: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleSurface:
    """Closed axis-aligned cube of edge length ``size``."""
    h = 0.5 * size
    c = np.asarray(center, dtype=np.float64)
    corners = (
        np.array(
            [[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)],
            dtype=np.float64,
        )
        + c
    )
    # Quads per face (outward CCW), split into triangles.
    quads = [
        (0, 1, 3, 2),  # x = -h
        (4, 6, 7, 5),  # x = +h
        (0, 4, 5, 1),  # y = -h
        (2, 3, 7, 6),  # y = +h
        (0, 2, 6, 4),  # z = -h
        (1, 5, 7, 3),  # z = +h
    ]
    tris = []
    for a, b, cc, d in quads:
        tris.append(corners[[a, b, cc]])
        tris.append(corners[[a, cc, d]])
    return surface_from_triangles(np.asarray(tris), "<cube>")


def icosphere_surface(
    radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)
) -> TriangleSurface:
    """Closed geodesic sphere from a subdivided icosahedron."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    tris = verts[faces]
    for _ in range(subdivisions):
        a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
        ab = 0.5 * (a + b)
        bc = 0.5 * (b + c)
        ca = 0.5 * (c + a)
        tris = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ]
        )
        tris /= np.linalg.norm(tris, axis=2)[:, :, None]
    tris = tris * radius + np.asarray(center, dtype=np.float64)
    return surface_from_triangles(tris, "<icosphere>")


def _sweep_tube(
    path: np.ndarray, e1: np.ndarray, e2: np.ndarray, radius: float, n_theta: int
) -> np.ndarray:
    """Triangle soup of a tube swept along ``path`` with per-ring frames."""
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    ct, st = np.cos(theta), np.sin(theta)
    rings = (
        path[:, None, :]
        + radius * ct[None, :, None] * e1[:, None, :]
        + radius * st[None, :, None] * e2[:, None, :]
    )  # (n_rings, n_theta, 3)
    n_rings = len(path)
    tris = []
    for i in range(n_rings - 1):
        r0 = rings[i]
        r1 = rings[i + 1]
        jn = (np.arange(n_theta) + 1) % n_theta
        tris.append(np.stack([r0, r1, r0[jn]], axis=1))
        tris.append(np.stack([r0[jn], r1, r1[jn]], axis=1))
    return np.concatenate(tris)


def open_cylinder_surface(
    radius: float,
    length: float,
    n_theta: int = 24,
    n_axial: int = 8,
    axis: str = "z",
    origin=(0.0, 0.0, 0.0),
) -> TriangleSurface:
    """Uncapped circular cylinder from the origin along +axis."""
    s = np.linspace(0.0, length, n_axial + 1)
    k = {"x": 0, "y": 1, "z": 2}[axis]
    path = np.zeros((len(s), 3))
    path[:, k] = s
    path += np.asarray(origin, dtype=np.float64)
    e1 = np.zeros_like(path)
    e2 = np.zeros_like(path)
    e1[:, (k + 1) % 3] = 1.0
    e2[:, (k + 2) % 3] = 1.0
    soup = _sweep_tube(path, e1, e2, radius, n_theta)
    return surface_from_triangles(soup, "<cylinder>")


def straight_tube_surface(
    diameter: float = 4.0e-3,
    length: float = 12.0e-3,
    n_theta: int = 32,
    n_axial: int = 24,
    axis: str = "z",
    origin=(0.0, 0.0, 0.0),
) -> TriangleSurface:
    """Uncapped straight vessel; caps land on the planes axis=0 and axis=length."""
    return open_cylinder_surface(
        diameter / 2.0, length, n_theta=n_theta, n_axial=n_axial, axis=axis,
        origin=origin,
    )


def bend_tube_surface(
    diameter: float = 4.0e-3,
    bend_radius: float = 24.0e-3,
    inlet_length: float = 8.0e-3,
    outlet_length: float = 8.0e-3,
    n_theta: int = 32,
    ds: float | None = None,
) -> TriangleSurface:
    """90-degree planar bend: enters along +y at the origin, exits along +x.

    The inlet ring lies exactly in the y = 0 plane and the outlet ring in the
    x = bend_radius + outlet_length plane, so both caps can sit on faces of a
    surrounding box.
    """
    r = diameter / 2.0
    if ds is None:
        ds = 2.0 * np.pi * r / n_theta  # roughly isotropic panels
    pts = []
    tans = []
    n_in = max(2, int(np.ceil(inlet_length / ds)))
    for s in np.linspace(0.0, inlet_length, n_in + 1):
        pts.append([0.0, s, 0.0])
        tans.append([0.0, 1.0, 0.0])
    n_arc = max(4, int(np.ceil(0.5 * np.pi * bend_radius / ds)))
    center = np.array([bend_radius, inlet_length])
    for th in np.linspace(np.pi, 0.5 * np.pi, n_arc + 1)[1:]:
        pts.append(
            [center[0] + bend_radius * np.cos(th),
             center[1] + bend_radius * np.sin(th), 0.0]
        )
        tans.append([np.sin(th), -np.cos(th), 0.0])
    n_out = max(2, int(np.ceil(outlet_length / ds)))
    x_end = bend_radius + outlet_length
    for s in np.linspace(bend_radius, x_end, n_out + 1)[1:]:
        pts.append([s, inlet_length + bend_radius, 0.0])
        tans.append([1.0, 0.0, 0.0])
    path = np.asarray(pts)
    tangents = np.asarray(tans)
    # In-plane normal and the out-of-plane direction frame the rings.
    e1 = np.column_stack(
        [tangents[:, 1], -tangents[:, 0], np.zeros(len(path))]
    )
    e2 = np.zeros_like(path)
    e2[:, 2] = 1.0
    # Pin the end rings exactly onto their cap planes.
    path[0, 1] = 0.0
    path[-1, 0] = x_end
    soup = _sweep_tube(path, e1, e2, r, n_theta)
    return surface_from_triangles(soup, "<bend>")


def t_branch_surface(
    half_width: float = 1.0e-3,
    arm_halfspan: float = 8.0e-3,
    junction_height: float = 10.0e-3,
) -> TriangleSurface:
    """Square-section T-branch: trunk up +y, arms out to x = +-arm_halfspan.

    One inlet (y = 0), two outlets (x = +-arm_halfspan), all caps exactly
    planar and axis-aligned so they can be tagged on box faces.
    """
    r = half_width
    yc = junction_height
    X = arm_halfspan
    if X <= 2.0 * r or yc <= 2.0 * r:
        raise ValueError("T-branch arms and trunk must be longer than the duct width")

    def rect(p0, p1, p2, p3):
        p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
        return [np.stack([p0, p1, p2]), np.stack([p0, p2, p3])]

    tris: list[np.ndarray] = []
    # T-shaped flat faces at z = +-r: trunk rectangle plus three arm
    # sub-rectangles so shared edges stay conforming.
    for z in (-r, r):
        tris += rect((-r, 0, z), (r, 0, z), (r, yc - r, z), (-r, yc - r, z))
        for x0, x1 in ((-X, -r), (-r, r), (r, X)):
            tris += rect(
                (x0, yc - r, z), (x1, yc - r, z), (x1, yc + r, z), (x0, yc + r, z)
            )
    # Side walls (openings at y=0 and x=+-X are left out).
    tris += rect((r, 0, -r), (r, 0, r), (r, yc - r, r), (r, yc - r, -r))
    tris += rect((-r, 0, -r), (-r, 0, r), (-r, yc - r, r), (-r, yc - r, -r))
    tris += rect((r, yc - r, -r), (r, yc - r, r), (X, yc - r, r), (X, yc - r, -r))
    tris += rect((-r, yc - r, -r), (-r, yc - r, r), (-X, yc - r, r), (-X, yc - r, -r))
    # Top wall split at x = +-r to stay edge-conforming with the flat faces.
    for x0, x1 in ((-X, -r), (-r, r), (r, X)):
        tris += rect(
            (x0, yc + r, -r), (x0, yc + r, r), (x1, yc + r, r), (x1, yc + r, -r)
        )
    return surface_from_triangles(np.asarray(tris), "<t-branch>")
