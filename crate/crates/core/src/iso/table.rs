//! The 256-case marching-cubes triangle table, built once from per-face
//! crossing segments. On a face whose inside corners sit on a diagonal the
//! two inside corners are kept apart; because the rule only looks at the
//! face, neighbouring cells always agree and the surface has no cracks.

use std::sync::OnceLock;

/// Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
pub fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The twelve cube edges as `(low corner, high corner, axis)`.
pub fn edges() -> &'static [(usize, usize, usize); 12] {
    static EDGES: OnceLock<[(usize, usize, usize); 12]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut out = [(0, 0, 0); 12];
        let mut n = 0;
        for axis in 0..3 {
            for c in 0..8 {
                if c & (1 << axis) == 0 {
                    out[n] = (c, c | (1 << axis), axis);
                    n += 1;
                }
            }
        }
        out
    })
}

fn edge_index(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    edges()
        .iter()
        .position(|&(x, y, _)| x == lo && y == hi)
        .expect("cube edge")
}

/// Triangles (as edge-index triples, outward winding) for every case.
/// Case bit `c` is set when corner `c` is inside.
pub fn triangle_table() -> &'static [Vec<[usize; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[usize; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(case: usize) -> Vec<[usize; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3 {
        for side in 0..2 {
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let corner = |a: usize, b: usize| (side << axis) | (a << u) | (b << v);
            let ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            let face_edges: Vec<usize> = (0..4)
                .map(|i| edge_index(ring[i], ring[(i + 1) % 4]))
                .collect();
            let crossing: Vec<usize> = (0..4)
                .filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4]))
                .map(|i| face_edges[i])
                .collect();
            let mut link = |a: usize, b: usize| {
                links[a].push(b);
                links[b].push(a);
            };
            match crossing.len() {
                0 => {}
                2 => link(crossing[0], crossing[1]),
                4 => {
                    for i in 0..4 {
                        if inside(ring[i]) {
                            link(face_edges[(i + 3) % 4], face_edges[i]);
                        }
                    }
                }
                _ => unreachable!("a face has an even number of crossings"),
            }
        }
    }

    let mid = |e: usize| {
        let (a, b, _) = edges()[e];
        let (pa, pb) = (corner_offset(a), corner_offset(b));
        [0, 1, 2].map(|k| (pa[k] + pb[k]) as f64 / 2.0)
    };
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if used[start] || links[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut prev = start;
        let mut cur = links[start][0].min(links[start][1]);
        while cur != start {
            lp.push(cur);
            used[cur] = true;
            let next = if links[cur][0] == prev {
                links[cur][1]
            } else {
                links[cur][0]
            };
            prev = cur;
            cur = next;
        }
        // Newell normal of the loop against the direction of its inside ends.
        let pts: Vec<[f64; 3]> = lp.iter().map(|&e| mid(e)).collect();
        let mut n = [0.0; 3];
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            n[0] += (p[1] - q[1]) * (p[2] + q[2]);
            n[1] += (p[2] - q[2]) * (p[0] + q[0]);
            n[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut d = [0.0; 3];
        for (&e, p) in lp.iter().zip(&pts) {
            let (a, b, _) = edges()[e];
            let c = corner_offset(if inside(a) { a } else { b });
            for k in 0..3 {
                d[k] += c[k] as f64 - p[k];
            }
        }
        if n[0] * d[0] + n[1] * d[1] + n[2] * d[2] > 0.0 {
            lp[1..].reverse();
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(triangle_table()[0].is_empty());
        assert!(triangle_table()[255].is_empty());
        assert_eq!(triangle_table()[1].len(), 1);
        assert_eq!(triangle_table()[0b0000_0011].len(), 2);
    }

    #[test]
    fn every_case_is_a_set_of_closed_cycles_on_crossing_edges() {
        for (case, tris) in triangle_table().iter().enumerate() {
            let crossing: Vec<usize> = (0..12)
                .filter(|&e| {
                    let (a, b, _) = edges()[e];
                    (case >> a & 1) != (case >> b & 1)
                })
                .collect();
            let mut seen = [false; 12];
            for t in tris {
                for &e in t {
                    assert!(crossing.contains(&e), "case {case}");
                    seen[e] = true;
                }
            }
            assert!(crossing.iter().all(|&e| seen[e]), "case {case}");
        }
    }

    #[test]
    fn complementary_cases_have_mirrored_face_links_on_unambiguous_faces() {
        // A single inside corner and its complement cut the same three edges.
        let a = &triangle_table()[1];
        let b = &triangle_table()[254];
        let mut ea: Vec<usize> = a.iter().flatten().copied().collect();
        let mut eb: Vec<usize> = b.iter().flatten().copied().collect();
        ea.sort();
        eb.sort();
        assert_eq!(ea, eb);
    }
}
