use std::collections::HashMap;

use super::mesh::{triangle_area, TriMesh};
use super::table::{corner_offset, edges, triangle_table};
use super::Lattice;

const MIN_AREA: f64 = 1e-12;

/// Meshes every cell whose eight corners are known. Vertices are shared
/// between cells through their lattice edge, so a closed surface comes out
/// watertight. Inside is `v > τ`.
pub fn marching_cubes(lat: &Lattice, tau: f64) -> TriMesh {
    let n = lat.n();
    let table = triangle_table();
    let mut mesh = TriMesh::default();
    let mut ids: HashMap<(usize, usize), u32> = HashMap::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let pts: [[usize; 3]; 8] = std::array::from_fn(|c| {
                    let o = corner_offset(c);
                    [x + o[0], y + o[1], z + o[2]]
                });
                let mut vals = [0.0; 8];
                let mut known = true;
                for c in 0..8 {
                    match lat.get(pts[c]) {
                        Some(v) => vals[c] = v,
                        None => known = false,
                    }
                }
                if !known {
                    continue;
                }
                let case = (0..8)
                    .filter(|&c| vals[c] > tau)
                    .fold(0, |acc, c| acc | 1 << c);
                if table[case].is_empty() {
                    continue;
                }
                let mut vertex = |e: usize, mesh: &mut TriMesh| -> u32 {
                    let (a, b, axis) = edges()[e];
                    let key = (lat.index(pts[a]), axis);
                    *ids.entry(key).or_insert_with(|| {
                        let (pa, pb) = (lat.position(pts[a]), lat.position(pts[b]));
                        let t = (tau - vals[a]) / (vals[b] - vals[a]);
                        let mut p = pa;
                        p[axis] = pa[axis] + t * (pb[axis] - pa[axis]);
                        mesh.vertices.push(p);
                        (mesh.vertices.len() - 1) as u32
                    })
                };
                for tri in &table[case] {
                    let idx = tri.map(|e| vertex(e, &mut mesh));
                    let [p, q, r] = idx.map(|i| mesh.vertices[i as usize]);
                    if triangle_area(p, q, r) >= MIN_AREA {
                        mesh.triangles.push(idx);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::super::{dense_lattice, FnField};
    use super::*;

    #[test]
    fn empty_and_full_lattices_have_no_surface() {
        for c in [0.0, 1.0] {
            let lat = dense_lattice(&FnField(move |_| c), 4).unwrap();
            assert!(marching_cubes(&lat, 0.2).is_empty());
        }
    }

    #[test]
    fn every_case_in_isolation_is_closed() {
        // One cell surrounded by an outside margin: each case becomes a
        // closed surface of genus 0 per component.
        for case in 1..256usize {
            let f = FnField(move |p: [f64; 3]| {
                let idx = p.map(|c| ((c + 0.5) * 4.0).round() as i64);
                let ok = idx.iter().all(|&i| i == 1 || i == 2);
                if !ok {
                    return 0.0;
                }
                let c = (idx[0] - 1) | (idx[1] - 1) << 1 | (idx[2] - 1) << 2;
                if case >> c & 1 == 1 {
                    0.9
                } else {
                    0.0
                }
            });
            let mesh = marching_cubes(&dense_lattice(&f, 4).unwrap(), 0.2);
            assert!(mesh.is_watertight(), "case {case}");
            assert!(mesh.signed_volume() > 0.0, "case {case}");
        }
    }
}
