import math

import numpy as np


def clip_polygon(subject, clip):
    """
    Clips a polygon against a convex, counter-clockwise polygon (Sutherland-Hodgman).

    Parameters:
        subject (list): Vertices (x, y) of the polygon to clip.
        clip (list): Vertices (x, y) of the convex clipping polygon, counter-clockwise.

    Returns:
        list: Vertices of the intersection polygon, empty if they do not overlap.
    """
    output = [tuple(p) for p in subject]
    if not output or len(clip) == 0:
        return []
    clip = [tuple(p) for p in clip]

    def inside(p, c1, c2):
        return (c2[0] - c1[0]) * (p[1] - c1[1]) - (c2[1] - c1[1]) * (p[0] - c1[0]) >= 0

    def intersection(s, e, c1, c2):
        dc = (c1[0] - c2[0], c1[1] - c2[1])
        dp = (s[0] - e[0], s[1] - e[1])
        n1 = c1[0] * c2[1] - c1[1] * c2[0]
        n2 = s[0] * e[1] - s[1] * e[0]
        denom = dc[0] * dp[1] - dc[1] * dp[0]
        if denom == 0:
            return e
        return ((n1 * dp[0] - n2 * dc[0]) / denom, (n1 * dp[1] - n2 * dc[1]) / denom)

    c1 = clip[-1]
    for c2 in clip:
        if not output:
            return []
        current, output = output, []
        s = current[-1]
        for e in current:
            if inside(e, c1, c2):
                if not inside(s, c1, c2):
                    output.append(intersection(s, e, c1, c2))
                output.append(e)
            elif inside(s, c1, c2):
                output.append(intersection(s, e, c1, c2))
            s = e
        c1 = c2
    return output


def polygon_area(polygon):
    """
    Area of a simple polygon by the shoelace formula.
    """
    if len(polygon) < 3:
        return 0.0
    total = 0.0
    for (x0, y0), (x1, y1) in zip(polygon, list(polygon[1:]) + [polygon[0]]):
        total += x0 * y1 - x1 * y0
    return abs(total) / 2.0


def barycentric(corners: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Barycentric coordinates of points with respect to triangles.

    Parameters:
        corners (np.ndarray): (n, 3, 2) triangle vertices.
        points (np.ndarray): (n, 2) query points, one per triangle.

    Returns:
        np.ndarray: (n, 3) coordinates, summing to one.
    """
    v0 = corners[:, 1] - corners[:, 0]
    v1 = corners[:, 2] - corners[:, 0]
    v2 = points - corners[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def p1_gradients(points: np.ndarray, triangles: np.ndarray):
    """
    Constant gradients of the three hat functions on every triangle.

    Returns:
        tuple: ((n, 3, 2) gradients, (n,) signed areas).
    """
    p = points[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    grads = np.empty((len(triangles), 3, 2))
    # rotate the opposite edge by -90 degrees and scale
    for i in range(3):
        a = p[:, (i + 1) % 3]
        b = p[:, (i + 2) % 3]
        grads[:, i, 0] = (a[:, 1] - b[:, 1]) / det
        grads[:, i, 1] = (b[:, 0] - a[:, 0]) / det
    return grads, 0.5 * det


def min_angles(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Smallest interior angle of each triangle, in degrees."""
    p = points[triangles]
    angles = []
    for i in range(3):
        u = p[:, (i + 1) % 3] - p[:, i]
        v = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return np.min(angles, axis=0)


def diameters(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Longest edge of each triangle."""
    p = points[triangles]
    lengths = [np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3)]
    return np.max(lengths, axis=0)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))
