"""Planar similarity and homography helpers (4-point DLT)."""

from __future__ import annotations

import math

import numpy as np


class DegenerateHomographyError(ValueError):
    pass


def image_corners(size: tuple[int, int]) -> np.ndarray:
    """Corner pixels in the order top-left, top-right, bottom-left, bottom-right."""
    w, h = size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def image_center(size: tuple[int, int]) -> np.ndarray:
    w, h = size
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


def similarity_matrix(scale: float, rotation: float, translation, center) -> np.ndarray:
    """3x3 map ``p -> center + scale * R(rotation) (p - center) + translation``."""
    c = np.asarray(center, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64)
    cs, sn = scale * math.cos(rotation), scale * math.sin(rotation)
    lin = np.array([[cs, -sn], [sn, cs]])
    H = np.eye(3)
    H[:2, :2] = lin
    H[:2, 2] = c - lin @ c + t
    return H


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ H[:, :2].T + H[:, 2]
    return hom[:, :2] / hom[:, 2:3]


def _quad_order(pts4: np.ndarray) -> np.ndarray:
    # TL, TR, BL, BR -> cyclic TL, TR, BR, BL
    return pts4[[0, 1, 3, 2]]


def is_convex_quad(pts4) -> bool:
    """True for a strictly convex quad with the image's orientation (TL, TR, BL, BR order)."""
    q = _quad_order(np.asarray(pts4, dtype=np.float64).reshape(4, 2))
    e = np.roll(q, -1, axis=0) - q
    nxt = np.roll(e, -1, axis=0)
    cross = e[:, 0] * nxt[:, 1] - e[:, 1] * nxt[:, 0]
    return bool(np.all(cross > 0.0))


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_from_points(src, dst) -> np.ndarray:
    """Homography taking 4 (or more) ``src`` points onto ``dst`` (normalised DLT)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise ValueError("need at least 4 matching point pairs")
    Ts, Td = _hartley(src), _hartley(dst)
    a = apply_homography(Ts, src)
    b = apply_homography(Td, dst)
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    A = np.array(rows)
    _, sv, vt = np.linalg.svd(A)
    if sv[-2] <= 1e-12 * sv[0]:
        raise DegenerateHomographyError("point configuration does not determine a homography")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-15:
        raise DegenerateHomographyError("homography maps a point to infinity")
    return H / H[2, 2]


def corner_homography(corners, size: tuple[int, int]) -> np.ndarray:
    """Homography taking the image's four corners onto ``corners`` (TL, TR, BL, BR)."""
    corners = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    if not is_convex_quad(corners):
        raise DegenerateHomographyError("corners are not in convex position")
    return homography_from_points(image_corners(size), corners)
