//! Planar geometry: points, axis-aligned rectangles and visibility-graph
//! shortest paths around rectangle obstacles.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn norm(self) -> f64 {
        libm::hypot(self.x, self.y)
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self.add(o.sub(self).scale(t))
    }

    /// Unit vector toward `o`; zero vector if coincident.
    pub fn dir_to(self, o: Vec2) -> Vec2 {
        let d = o.sub(self);
        let n = d.norm();
        if n > 1e-12 {
            d.scale(1.0 / n)
        } else {
            Vec2::new(0.0, 0.0)
        }
    }
}

/// Axis-aligned rectangle, `min` strictly below `max` in both axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn from_center(center: Vec2, half_w: f64, half_h: f64) -> Self {
        Rect {
            min: Vec2::new(center.x - half_w, center.y - half_h),
            max: Vec2::new(center.x + half_w, center.y + half_h),
        }
    }

    pub fn center(&self) -> Vec2 {
        self.min.lerp(self.max, 0.5)
    }

    pub fn half_extents(&self) -> (f64, f64) {
        (
            (self.max.x - self.min.x) / 2.0,
            (self.max.y - self.min.y) / 2.0,
        )
    }

    /// Closed containment.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn inflate(&self, m: f64) -> Rect {
        Rect {
            min: Vec2::new(self.min.x - m, self.min.y - m),
            max: Vec2::new(self.max.x + m, self.max.y + m),
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            self.max,
            Vec2::new(self.min.x, self.max.y),
        ]
    }
}

/// Does segment `p..q` spend positive length inside the open interior of
/// `r`? Boundary-sliding segments do not count.
pub fn segment_hits_rect(p: Vec2, q: Vec2, r: &Rect) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (pa, qa, lo, hi) in [
        (p.x, q.x, r.min.x, r.max.x),
        (p.y, q.y, r.min.y, r.max.y),
    ] {
        let d = qa - pa;
        if d.abs() < 1e-15 {
            if pa <= lo || pa >= hi {
                return false;
            }
        } else {
            let ta = (lo - pa) / d;
            let tb = (hi - pa) / d;
            let (a, b) = if ta < tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 >= t1 {
                return false;
            }
        }
    }
    t1 - t0 > 1e-12
}

fn segment_clear(p: Vec2, q: Vec2, obstacles: &[Rect]) -> bool {
    obstacles.iter().all(|r| !segment_hits_rect(p, q, r))
}

pub fn polyline_len(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Shortest collision-free polyline from `start` to `goal`.
///
/// Graph nodes are the endpoints plus the corners of each obstacle inflated
/// by `corner_margin`; edges are tested against the obstacles inflated by
/// `test_margin` (strictly smaller, so paths along inflated boundaries stay
/// clear of the test region). Returns `None` when no path exists.
pub fn visibility_path(
    start: Vec2,
    goal: Vec2,
    obstacles: &[Rect],
    corner_margin: f64,
    test_margin: f64,
) -> Option<Vec<Vec2>> {
    let test: Vec<Rect> = obstacles.iter().map(|r| r.inflate(test_margin)).collect();
    if segment_clear(start, goal, &test) {
        return Some(alloc::vec![start, goal]);
    }
    let mut nodes = alloc::vec![start, goal];
    for r in obstacles {
        for c in r.inflate(corner_margin).corners() {
            // skip corners buried inside another obstacle's test region
            if test.iter().all(|t| !t.contains(c)) {
                nodes.push(c);
            }
        }
    }
    let n = nodes.len();
    let mut adj: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if segment_clear(nodes[i], nodes[j], &test) {
                let d = nodes[i].dist(nodes[j]);
                adj[i].push((j, d));
                adj[j].push((i, d));
            }
        }
    }

    // Dijkstra; the graph is tiny, a linear scan beats a heap here.
    let mut dist = alloc::vec![f64::INFINITY; n];
    let mut prev = alloc::vec![usize::MAX; n];
    let mut done = alloc::vec![false; n];
    dist[0] = 0.0;
    loop {
        let mut u = usize::MAX;
        let mut best = f64::INFINITY;
        for i in 0..n {
            if !done[i] && dist[i] < best {
                best = dist[i];
                u = i;
            }
        }
        if u == usize::MAX {
            return None;
        }
        if u == 1 {
            break;
        }
        done[u] = true;
        for &(v, w) in &adj[u] {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                prev[v] = u;
            }
        }
    }
    let mut path = alloc::vec![nodes[1]];
    let mut cur = 1;
    while prev[cur] != usize::MAX {
        cur = prev[cur];
        path.push(nodes[cur]);
    }
    path.reverse();
    Some(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rect() -> Rect {
        Rect {
            min: Vec2::new(0.4, 0.4),
            max: Vec2::new(0.6, 0.6),
        }
    }

    #[test]
    fn segment_through_interior_hits() {
        let r = unit_rect();
        assert!(segment_hits_rect(
            Vec2::new(0.0, 0.5),
            Vec2::new(1.0, 0.5),
            &r
        ));
    }

    #[test]
    fn segment_outside_misses() {
        let r = unit_rect();
        assert!(!segment_hits_rect(
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            &r
        ));
    }

    #[test]
    fn segment_along_boundary_does_not_count() {
        let r = unit_rect();
        assert!(!segment_hits_rect(
            Vec2::new(0.0, 0.4),
            Vec2::new(1.0, 0.4),
            &r
        ));
        assert!(!segment_hits_rect(
            Vec2::new(0.6, 0.0),
            Vec2::new(0.6, 1.0),
            &r
        ));
    }

    #[test]
    fn segment_ending_at_boundary_does_not_count() {
        let r = unit_rect();
        assert!(!segment_hits_rect(
            Vec2::new(0.2, 0.5),
            Vec2::new(0.4, 0.5),
            &r
        ));
    }

    #[test]
    fn direct_path_when_clear() {
        let p = visibility_path(
            Vec2::new(0.1, 0.1),
            Vec2::new(0.9, 0.1),
            &[unit_rect()],
            0.04,
            0.02,
        )
        .unwrap();
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn detour_routes_around_obstacle() {
        let start = Vec2::new(0.1, 0.5);
        let goal = Vec2::new(0.9, 0.5);
        let p = visibility_path(start, goal, &[unit_rect()], 0.04, 0.02).unwrap();
        assert!(p.len() > 2, "expected a detour, got {p:?}");
        // every leg clear of the test-inflated obstacle
        let test = unit_rect().inflate(0.02);
        for w in p.windows(2) {
            assert!(!segment_hits_rect(w[0], w[1], &test));
        }
        // detour is longer than the straight line but bounded
        let len = polyline_len(&p);
        assert!(len > start.dist(goal));
        assert!(len < start.dist(goal) + 1.0);
    }

    #[test]
    fn enclosed_goal_is_unreachable() {
        // box the goal in with four slabs
        let goal = Vec2::new(0.5, 0.5);
        let walls = [
            Rect { min: Vec2::new(0.3, 0.3), max: Vec2::new(0.7, 0.4) },
            Rect { min: Vec2::new(0.3, 0.6), max: Vec2::new(0.7, 0.7) },
            Rect { min: Vec2::new(0.3, 0.3), max: Vec2::new(0.4, 0.7) },
            Rect { min: Vec2::new(0.6, 0.3), max: Vec2::new(0.7, 0.7) },
        ];
        assert!(visibility_path(Vec2::new(0.1, 0.1), goal, &walls, 0.04, 0.02).is_none());
    }
}
