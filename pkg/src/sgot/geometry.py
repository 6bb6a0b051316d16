"""Convex polytope clipping, polygon clipping, and simplex quadrature.

All exact-backend geometry lives here: 3D convex polytopes with synchronized
vertex/half-space representations, half-space clipping, tetrahedral fan
decomposition, Gauss quadrature on tetrahedra/triangles (collapsed product
rules, exact to a requested polynomial degree), and a 2D polygon path that
tolerates non-convex domains.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

MERGE_TOL = 1e-10
ON_TOL = 1e-10


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# quadrature rules
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss01(n):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def tetrahedron_rule(degree):
    """Quadrature on the reference tetrahedron, exact for total degree <= degree.

    Collapsed (Duffy) product rule: x1 = u, x2 = v(1-u), x3 = w(1-u)(1-v)
    with Jacobian (1-u)^2 (1-v).  Weights are positive and sum to 1/6.
    """
    d = max(int(degree), 1)
    nu = (d + 4) // 2
    nv = (d + 3) // 2
    nw = (d + 2) // 2
    u, wu = _gauss01(nu)
    v, wv = _gauss01(nv)
    t, wt = _gauss01(nw)
    U, V, T = np.meshgrid(u, v, t, indexing="ij")
    WU, WV, WT = np.meshgrid(wu, wv, wt, indexing="ij")
    x1 = U
    x2 = V * (1.0 - U)
    x3 = T * (1.0 - U) * (1.0 - V)
    w = WU * WV * WT * (1.0 - U) ** 2 * (1.0 - V)
    pts = np.stack([x1.ravel(), x2.ravel(), x3.ravel()], axis=1)
    return pts, w.ravel()


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Quadrature on the reference triangle, exact for total degree <= degree.

    Weights sum to 1/2.
    """
    d = max(int(degree), 1)
    nu = (d + 3) // 2
    nv = (d + 2) // 2
    u, wu = _gauss01(nu)
    v, wv = _gauss01(nv)
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    x1 = U
    x2 = V * (1.0 - U)
    w = WU * WV * (1.0 - U)
    pts = np.stack([x1.ravel(), x2.ravel()], axis=1)
    return pts, w.ravel()


# ---------------------------------------------------------------------------
# 3D convex polytope
# ---------------------------------------------------------------------------

def _cross3(a, b):
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _plane_basis(n):
    """Two unit vectors spanning the plane orthogonal to unit normal n."""
    k = np.argmin(np.abs(n))
    e = np.zeros(3)
    e[k] = 1.0
    e1 = _cross3(n, e)
    e1 /= np.sqrt(e1 @ e1)
    e2 = _cross3(n, e1)
    return e1, e2


def _order_ring(points, n):
    """Indices ordering coplanar points counterclockwise around unit normal n."""
    c = points.mean(axis=0)
    e1, e2 = _plane_basis(n)
    rel = points - c
    ang = np.arctan2(rel @ e2, rel @ e1)
    return np.argsort(ang)


class ConvexPolytope:
    """Bounded convex polytope with synchronized V- and H-representations.

    vertices : (V, 3) array.
    facets   : list of vertex-index rings, each ordered so the right-hand
               rule around the ring gives the outward normal.
    normals, offsets : facet planes, unit n with n.p <= d inside.
    tags     : per-facet labels recording which clip produced the facet.
    """

    def __init__(self, vertices, facets, normals, offsets, tags=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.facets = [np.asarray(f, dtype=int) for f in facets]
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(offsets, dtype=float).ravel()
        self.tags = list(tags) if tags is not None else [None] * len(self.facets)
        self._volume = None
        self._centroid = None
        self._tets = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), [], np.zeros((0, 3)), np.zeros(0), [])

    @classmethod
    def from_vertices_and_planes(cls, vertices, normals, offsets, tags=None):
        """Assemble facet rings from vertices known to satisfy n.p <= d.

        Planes touching fewer than three vertices are dropped as redundant.
        """
        vertices = np.asarray(vertices, dtype=float)
        normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        offsets = np.asarray(offsets, dtype=float).ravel()
        scale = 1.0 + np.abs(vertices).max() if len(vertices) else 1.0
        lens = np.linalg.norm(normals, axis=1)
        normals = normals / lens[:, None]
        offsets = offsets / lens
        if tags is None:
            tags = [None] * len(normals)
        dist = vertices @ normals.T - offsets
        if dist.size and dist.max() > 1e-9 * scale:
            raise GeometryError("vertices do not satisfy the supplied half-spaces")
        facets, keep_n, keep_d, keep_t = [], [], [], []
        for k in range(len(normals)):
            on = np.nonzero(np.abs(dist[:, k]) <= ON_TOL * scale)[0]
            if len(on) < 3:
                continue
            order = _order_ring(vertices[on], normals[k])
            facets.append(on[order])
            keep_n.append(normals[k])
            keep_d.append(offsets[k])
            keep_t.append(tags[k])
        return cls(vertices, facets, np.array(keep_n), np.array(keep_d), keep_t)

    @classmethod
    def box(cls, lo, hi, tags=None):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise GeometryError("box needs positive side lengths")
        verts = np.array(
            [
                [
                    (lo[0], hi[0])[i >> 2 & 1],
                    (lo[1], hi[1])[i >> 1 & 1],
                    (lo[2], hi[2])[i & 1],
                ]
                for i in range(8)
            ]
        )
        normals = np.array(
            [
                [1.0, 0, 0],
                [-1.0, 0, 0],
                [0, 1.0, 0],
                [0, -1.0, 0],
                [0, 0, 1.0],
                [0, 0, -1.0],
            ]
        )
        offsets = np.array([hi[0], -lo[0], hi[1], -lo[1], hi[2], -lo[2]])
        return cls.from_vertices_and_planes(verts, normals, offsets, tags)

    @classmethod
    def simplex(cls, vertices):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.shape != (4, 3):
            raise GeometryError("simplex needs exactly 4 vertices")
        normals, offsets = [], []
        for k in range(4):
            face = np.delete(np.arange(4), k)
            a, b, c = vertices[face]
            n = np.cross(b - a, c - a)
            nn = np.linalg.norm(n)
            if nn < 1e-14:
                raise GeometryError("degenerate simplex")
            n = n / nn
            d = n @ a
            if n @ vertices[k] > d:
                n, d = -n, -d
            normals.append(n)
            offsets.append(d)
        return cls.from_vertices_and_planes(vertices, np.array(normals), np.array(offsets))

    @classmethod
    def from_point_cloud(cls, points):
        """Convex hull of a point cloud (requires scipy)."""
        from scipy.spatial import ConvexHull

        hull = ConvexHull(np.asarray(points, dtype=float))
        eqs = hull.equations  # n.x + b <= 0
        seen, normals, offsets = set(), [], []
        for eq in eqs:
            key = tuple(np.round(eq, 9))
            if key in seen:
                continue
            seen.add(key)
            normals.append(eq[:3])
            offsets.append(-eq[3])
        return cls.from_vertices_and_planes(
            hull.points[hull.vertices], np.array(normals), np.array(offsets)
        )

    # -- basic queries -------------------------------------------------------

    @property
    def is_empty(self):
        return len(self.vertices) == 0

    @property
    def n_vertices(self):
        return len(self.vertices)

    def contains(self, points, tol=1e-9):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.is_empty:
            return np.zeros(len(points), dtype=bool)
        d = points @ self.normals.T - self.offsets
        return np.all(d <= tol, axis=1)

    def facet_index_by_tag(self, tag):
        for k, t in enumerate(self.tags):
            if t == tag:
                return k
        return None

    # -- clipping -------------------------------------------------------------

    def clip(self, normal, offset, tag=None):
        """Intersect with the half-space {p : normal.p <= offset}.

        Returns self unchanged when the plane is redundant, an empty polytope
        when infeasible.  New vertices closer than MERGE_TOL are merged.
        """
        if self.is_empty:
            return self
        n = np.asarray(normal, dtype=float)
        ln = np.linalg.norm(n)
        if ln == 0.0:
            raise GeometryError("zero clip normal")
        n = n / ln
        d = float(offset) / ln
        V = self.vertices
        scale = 1.0 + np.abs(V).max()
        eps = ON_TOL * scale
        dist = V @ n - d
        if np.all(dist <= eps):
            return self
        if np.all(dist >= -eps):
            return ConvexPolytope.empty()

        state = np.zeros(len(V), dtype=int)  # -1 in, 0 on, +1 out
        state[dist < -eps] = -1
        state[dist > eps] = 1

        new_pts = [V[i] for i in range(len(V)) if state[i] <= 0]
        index_map = {}
        for i in range(len(V)):
            if state[i] <= 0:
                index_map[i] = len(index_map)
        cut_cache = {}

        merge = MERGE_TOL * scale
        merge2 = merge * merge

        def cut_vertex(a, b):
            key = (a, b) if a < b else (b, a)
            if key in cut_cache:
                return cut_cache[key]
            t = dist[a] / (dist[a] - dist[b])
            p = V[a] + t * (V[b] - V[a])
            # merge with existing on-plane points
            for idx, q in enumerate(new_pts):
                if abs(q[0] - p[0]) <= merge:
                    d = q - p
                    if d @ d <= merge2:
                        cut_cache[key] = idx
                        return idx
            new_pts.append(p)
            cut_cache[key] = len(new_pts) - 1
            return cut_cache[key]

        new_facets, new_normals, new_offsets, new_tags = [], [], [], []
        section = set()
        for ring, fn, fd, ft in zip(self.facets, self.normals, self.offsets, self.tags):
            out_ring = []
            m = len(ring)
            for k in range(m):
                a, b = ring[k], ring[(k + 1) % m]
                if state[a] <= 0:
                    out_ring.append(index_map[a])
                    if state[a] == 0:
                        section.add(index_map[a])
                if (state[a] < 0 and state[b] > 0) or (state[a] > 0 and state[b] < 0):
                    idx = cut_vertex(a, b)
                    out_ring.append(idx)
                    section.add(idx)
            # drop consecutive duplicates
            cleaned = []
            for idx in out_ring:
                if not cleaned or cleaned[-1] != idx:
                    cleaned.append(idx)
            if len(cleaned) > 1 and cleaned[0] == cleaned[-1]:
                cleaned.pop()
            if len(cleaned) >= 3:
                new_facets.append(np.array(cleaned, dtype=int))
                new_normals.append(fn)
                new_offsets.append(fd)
                new_tags.append(ft)

        pts = np.array(new_pts).reshape(-1, 3)
        if len(section) >= 3:
            sec = np.fromiter(section, dtype=int)
            order = _order_ring(pts[sec], n)
            new_facets.append(sec[order])
            new_normals.append(n)
            new_offsets.append(d)
            new_tags.append(tag)

        if len(new_facets) < 4 or len(pts) < 4:
            return ConvexPolytope.empty()

        # drop vertices no longer referenced
        used = np.unique(np.concatenate(new_facets))
        remap = -np.ones(len(pts), dtype=int)
        remap[used] = np.arange(len(used))
        facets = [remap[f] for f in new_facets]
        poly = ConvexPolytope(pts[used], facets, np.array(new_normals), np.array(new_offsets), new_tags)
        if poly.volume <= 0.0:
            return ConvexPolytope.empty()
        return poly

    # -- measures -------------------------------------------------------------

    def tetrahedra(self):
        """Fan decomposition (T, 4, 3) from the vertex centroid over facet fans."""
        if self._tets is not None:
            return self._tets
        if self.is_empty:
            self._tets = np.zeros((0, 4, 3))
            return self._tets
        c = self.vertices.mean(axis=0)
        tets = []
        for ring in self.facets:
            v = self.vertices[ring]
            for k in range(1, len(ring) - 1):
                tets.append([c, v[0], v[k], v[k + 1]])
        self._tets = np.array(tets)
        return self._tets

    def _signed_volumes(self):
        tets = self.tetrahedra()
        if len(tets) == 0:
            return np.zeros(0)
        e = tets[:, 1:, :] - tets[:, :1, :]
        return np.linalg.det(e) / 6.0

    @property
    def volume(self):
        if self._volume is None:
            self._volume = float(self._signed_volumes().sum()) if not self.is_empty else 0.0
        return self._volume

    @property
    def centroid(self):
        if self.is_empty:
            raise GeometryError("centroid of empty polytope")
        if self._centroid is None:
            tets = self.tetrahedra()
            vols = self._signed_volumes()
            cents = tets.mean(axis=1)
            self._centroid = (vols[:, None] * cents).sum(axis=0) / vols.sum()
        return self._centroid

    def facet_area(self, k):
        ring = self.facets[k]
        v = self.vertices[ring]
        area = 0.0
        for i in range(1, len(ring) - 1):
            area += 0.5 * np.linalg.norm(np.cross(v[i] - v[0], v[i + 1] - v[0]))
        return area

    def to_json_dict(self):
        return {
            "vertices": self.vertices.tolist(),
            "facets": [f.tolist() for f in self.facets],
        }


def integrate_volume(poly, fn, degree=4):
    """Integrate fn over the polytope with a simplex rule of the given degree.

    fn maps (Q, 3) points to (Q,) or (Q, k) values; exact for polynomial
    integrands up to the requested total degree.
    """
    if poly.is_empty:
        return 0.0
    tets = poly.tetrahedra()
    ref, w = tetrahedron_rule(degree)
    origins = tets[:, 0, :]
    edges = tets[:, 1:, :] - tets[:, :1, :]
    dets = np.abs(np.linalg.det(edges))
    pts = origins[:, None, :] + np.einsum("qi,tij->tqj", ref, edges)
    vals = np.asarray(fn(pts.reshape(-1, 3)))
    if vals.ndim == 1:
        vals = vals.reshape(len(tets), -1)
        return float(np.einsum("t,q,tq->", dets, w, vals))
    vals = vals.reshape(len(tets), len(w), -1)
    return np.einsum("t,q,tqk->k", dets, w, vals)


def integrate_facet(poly, facet_index, fn, degree=4):
    """Surface integral of fn over one facet (2D Hausdorff measure)."""
    if poly.is_empty:
        return 0.0
    ring = poly.facets[facet_index]
    v = poly.vertices[ring]
    ref, w = triangle_rule(degree)
    total = 0.0
    for i in range(1, len(ring) - 1):
        a, b, c = v[0], v[i], v[i + 1]
        cross = np.cross(b - a, c - a)
        jac = np.linalg.norm(cross)
        if jac == 0.0:
            continue
        pts = a + ref[:, :1] * (b - a) + ref[:, 1:2] * (c - a)
        total += jac * float(w @ np.asarray(fn(pts)))
    return total


# ---------------------------------------------------------------------------
# 2D polygons (possibly non-convex after clipping against curved domains)
# ---------------------------------------------------------------------------

class Polygon:
    """Simple polygon with tagged edges, counterclockwise orientation.

    tags[k] labels the edge from vertex k to vertex k+1.  Sutherland-Hodgman
    clipping against half-planes may produce degenerate bridge edges when a
    cell is disconnected; area and edge measures remain correct (bridges
    cancel in the signed accounting).
    """

    def __init__(self, vertices, tags=None):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 2)
        n = len(self.vertices)
        self.tags = list(tags) if tags is not None else [None] * n
        if len(self.tags) != n:
            raise GeometryError("one tag per edge required")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), [])

    @classmethod
    def rectangle(cls, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        verts = [
            [lo[0], lo[1]],
            [hi[0], lo[1]],
            [hi[0], hi[1]],
            [lo[0], hi[1]],
        ]
        return cls(np.array(verts), ["bottom", "right", "top", "left"])

    @property
    def is_empty(self):
        return len(self.vertices) < 3

    @property
    def area(self):
        if self.is_empty:
            return 0.0
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def centroid(self):
        if self.is_empty:
            raise GeometryError("centroid of empty polygon")
        v = self.vertices
        nxt = np.roll(v, -1, axis=0)
        cr = v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]
        a = 0.5 * cr.sum()
        cx = np.sum((v[:, 0] + nxt[:, 0]) * cr) / (6.0 * a)
        cy = np.sum((v[:, 1] + nxt[:, 1]) * cr) / (6.0 * a)
        return np.array([cx, cy])

    def integrate_affine(self, linear, offset):
        """Exact integral of linear.p + offset over the polygon."""
        if self.is_empty:
            return 0.0
        a = self.area
        if a == 0.0:
            return 0.0
        return a * (float(np.dot(self.centroid, linear)) + float(offset))

    def clip(self, normal, offset, tag=None):
        """Clip against {p : normal.p <= offset}, tagging new edges.

        Each surviving vertex carries the tag of its outgoing edge: kept
        vertices keep theirs, exit intersections start a clip-line edge, and
        entry intersections resume the original edge.
        """
        if self.is_empty:
            return Polygon.empty()
        n = np.asarray(normal, dtype=float)
        ln = np.linalg.norm(n)
        n = n / ln
        d = float(offset) / ln
        V = self.vertices
        scale = 1.0 + np.abs(V).max()
        eps = ON_TOL * scale
        dist = V @ n - d
        if np.all(dist <= eps):
            return self
        if np.all(dist >= -eps):
            return Polygon.empty()
        inside = dist <= eps
        m = len(V)
        nxt_inside = np.roll(inside, -1)
        dist_next = np.roll(dist, -1)
        V_next = np.roll(V, -1, axis=0)
        crossing = inside != nxt_inside
        cross_idx = np.nonzero(crossing)[0]
        with np.errstate(invalid="ignore", divide="ignore"):
            tcr = dist[cross_idx] / (dist[cross_idx] - dist_next[cross_idx])
        X = V[cross_idx] + tcr[:, None] * (V_next[cross_idx] - V[cross_idx])
        tags_arr = np.array(self.tags + [None], dtype=object)[:-1]  # force object dtype
        cross_tags = np.empty(len(cross_idx), dtype=object)
        exiting = inside[cross_idx]
        for k in np.nonzero(exiting)[0]:  # tuple tags defeat broadcast assignment
            cross_tags[k] = tag
        cross_tags[~exiting] = tags_arr[cross_idx[~exiting]]
        pts = np.concatenate([V[inside], X]) if len(X) else V[inside]
        keys = np.concatenate([2 * np.nonzero(inside)[0], 2 * cross_idx + 1])
        all_tags = np.concatenate([tags_arr[inside], cross_tags])
        order = np.argsort(keys, kind="stable")
        verts = pts[order]
        tags = all_tags[order]
        if len(verts) < 3:
            return Polygon.empty()
        # merge cyclically-consecutive duplicates, keeping the later tag
        gap = np.linalg.norm(verts - np.roll(verts, 1, axis=0), axis=1)
        dup = gap <= MERGE_TOL * scale
        if dup.any():
            keep = ~dup
            if keep.sum() < 3:
                return Polygon.empty()
            for k in np.nonzero(dup)[0]:
                prev = (k - 1) % len(verts)
                while dup[prev]:
                    prev = (prev - 1) % len(verts)
                tags[prev] = tags[k]
            verts = verts[keep]
            tags = tags[keep]
        poly = Polygon(verts, list(tags))
        if poly.area <= 0.0:
            return Polygon.empty()
        return poly

    def edge_measure(self, tag):
        """Total H^1 measure of edges carrying the tag.

        Edges with one tag are collinear (they came from one clip line); the
        signed sweep cancels bridge edges traversed in both directions.
        """
        segs = []
        m = len(self.vertices)
        for k in range(m):
            if self.tags[k] == tag:
                segs.append((self.vertices[k], self.vertices[(k + 1) % m]))
        if not segs:
            return 0.0
        p0, p1 = segs[0]
        direction = None
        for a, b in segs:
            if np.linalg.norm(b - a) > 0:
                direction = (b - a) / np.linalg.norm(b - a)
                break
        if direction is None:
            return 0.0
        events = []
        for a, b in segs:
            sa = float((a - p0) @ direction)
            sb = float((b - p0) @ direction)
            if sa == sb:
                continue
            events.append((min(sa, sb), max(sa, sb), 1 if sb > sa else -1))
        if not events:
            return 0.0
        cuts = sorted({s for e in events for s in e[:2]})
        total = 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            mid = 0.5 * (lo + hi)
            cover = sum(sg for (a, b, sg) in events if a < mid < b)
            if cover != 0:
                total += hi - lo
        return total

    def to_json_dict(self):
        return {"vertices": self.vertices.tolist()}
