//! Occupancy fields, octree-refined lattice evaluation, marching cubes and
//! OBJ meshes.

mod mc;
mod mesh;
mod table;

pub use mc::marching_cubes;
pub use mesh::{triangle_area, TriMesh};
pub use table::{corner_offset, edges, triangle_table};

use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Anything that maps points of `[-0.5, 0.5]³` to occupancy values.
pub trait ScalarField {
    fn eval_batch(&self, points: &[[f64; 3]]) -> Result<Vec<f64>>;
}

/// Wraps a plain function as a field.
pub struct FnField<F>(pub F);

impl<F: Fn([f64; 3]) -> f64> ScalarField for FnField<F> {
    fn eval_batch(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&p| (self.0)(p)).collect())
    }
}

/// The decoder's occupancy for a fixed image feature and latent code.
pub struct DecoderField<'a> {
    pub model: &'a ModelParams,
    pub feature: Vec<f64>,
    pub z: Vec<f64>,
}

impl ScalarField for DecoderField<'_> {
    fn eval_batch(&self, points: &[[f64; 3]]) -> Result<Vec<f64>> {
        self.model.decode(&self.feature, &self.z, points)
    }
}

/// Values on the `(n+1)³` lattice points of the unit cube. Points that were
/// never evaluated are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    n: usize,
    values: Vec<Option<f64>>,
}

impl Lattice {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("lattice needs at least one cell per axis"));
        }
        Ok(Lattice {
            n,
            values: vec![None; (n + 1).pow(3)],
        })
    }

    /// Cells per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[2] * (self.n + 1) + p[1]) * (self.n + 1) + p[0]
    }

    pub fn position(&self, p: [usize; 3]) -> [f64; 3] {
        p.map(|i| -0.5 + i as f64 / self.n as f64)
    }

    pub fn get(&self, p: [usize; 3]) -> Option<f64> {
        self.values[self.index(p)]
    }

    /// Number of field evaluations that produced this lattice.
    pub fn evaluated(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Evaluates the listed points that are not cached yet.
    pub fn fill(
        &mut self,
        field: &dyn ScalarField,
        points: impl IntoIterator<Item = [usize; 3]>,
    ) -> Result<()> {
        let todo: Vec<[usize; 3]> = points
            .into_iter()
            .filter(|&p| self.get(p).is_none())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if todo.is_empty() {
            return Ok(());
        }
        let coords: Vec<[f64; 3]> = todo.iter().map(|&p| self.position(p)).collect();
        let vals = field.eval_batch(&coords)?;
        if vals.len() != todo.len() {
            return Err(Error::contract(format!(
                "field returned {} values for {} points",
                vals.len(),
                todo.len()
            )));
        }
        for ((p, x), v) in todo.iter().zip(&coords).zip(vals) {
            if !v.is_finite() {
                return Err(Error::Domain {
                    op: "field evaluation",
                    detail: format!(
                        "value {v} at lattice {p:?} = ({}, {}, {})",
                        x[0], x[1], x[2]
                    ),
                });
            }
            let i = self.index(*p);
            self.values[i] = Some(v);
        }
        Ok(())
    }
}

fn corners(cell: [usize; 3], size: usize) -> [[usize; 3]; 8] {
    std::array::from_fn(|c| {
        let o = corner_offset(c);
        [0, 1, 2].map(|k| cell[k] + o[k] * size)
    })
}

/// The (up to four) unit cells that share the lattice edge from `p` along `axis`.
fn edge_cells(p: [usize; 3], axis: usize, n: usize) -> impl Iterator<Item = [usize; 3]> {
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    [(0usize, 0usize), (1, 0), (0, 1), (1, 1)]
        .into_iter()
        .filter_map(move |(du, dv)| {
            let mut c = p;
            c[u] = p[u].checked_sub(du)?;
            c[v] = p[v].checked_sub(dv)?;
            (c[u] < n && c[v] < n).then_some(c)
        })
}

/// Evaluates every lattice point at resolution `n`.
pub fn dense_lattice(field: &dyn ScalarField, n: usize) -> Result<Lattice> {
    let mut lat = Lattice::new(n)?;
    let all = (0..=n).flat_map(|z| (0..=n).flat_map(move |y| (0..=n).map(move |x| [x, y, z])));
    lat.fill(field, all)?;
    Ok(lat)
}

/// Coarse-to-fine evaluation from an `r0` lattice down to `r_final`. Sign
/// changes on the coarse lattice are located at the fine level by repeated
/// halving, then the surface is followed across crossing edges so that every
/// fine cell connected to a detected crossing gets its corners evaluated.
/// Regions away from the surface keep only their coarse samples.
pub fn mise_refine(
    field: &dyn ScalarField,
    r0: usize,
    r_final: usize,
    tau: f64,
) -> Result<Lattice> {
    if !r0.is_power_of_two() || !r_final.is_power_of_two() || r0 >= r_final {
        return Err(Error::contract(format!(
            "mise_refine needs powers of two with r0 < r_final, got {r0} and {r_final}"
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::contract(format!("threshold {tau} outside (0, 1)")));
    }
    let mut lat = Lattice::new(r_final)?;
    let mut size = r_final / r0;
    let coarse = (0..=r0).flat_map(|z| {
        (0..=r0).flat_map(move |y| (0..=r0).map(move |x| [x * size, y * size, z * size]))
    });
    lat.fill(field, coarse)?;

    // Every coarse edge whose ends disagree is halved until the sign change
    // sits on a single fine edge; the fine cells around it seed the walk.
    let n = r_final;
    let inside = |lat: &Lattice, p| lat.get(p).is_some_and(|v: f64| v > tau);
    let mut spans: Vec<([usize; 3], [usize; 3], usize, bool)> = Vec::new();
    for z in 0..=r0 {
        for y in 0..=r0 {
            for x in 0..=r0 {
                let lo = [x * size, y * size, z * size];
                for axis in 0..3 {
                    if lo[axis] + size > n {
                        continue;
                    }
                    let mut hi = lo;
                    hi[axis] += size;
                    let ia = inside(&lat, lo);
                    if ia != inside(&lat, hi) {
                        spans.push((lo, hi, axis, ia));
                    }
                }
            }
        }
    }
    while size > 1 {
        size /= 2;
        let mids: Vec<[usize; 3]> = spans
            .iter()
            .map(|&(a, _, axis, _)| {
                let mut m = a;
                m[axis] += size;
                m
            })
            .collect();
        lat.fill(field, mids.iter().copied())?;
        for (span, m) in spans.iter_mut().zip(mids) {
            if inside(&lat, m) == span.3 {
                span.0 = m;
            } else {
                span.1 = m;
            }
        }
    }
    let mut active: Vec<[usize; 3]> = spans
        .iter()
        .flat_map(|&(a, _, axis, _)| edge_cells(a, axis, n))
        .collect();
    active.sort();
    active.dedup();
    lat.fill(field, active.iter().flat_map(|&c| corners(c, 1)))?;

    // Follow the surface through crossing edges of fine cells.
    let mut seen: BTreeSet<[usize; 3]> = active.iter().copied().collect();
    let mut queue: VecDeque<[usize; 3]> = active.into();
    while let Some(cell) = queue.pop_front() {
        let mut fresh = Vec::new();
        for &(a, b, axis) in edges() {
            let cs = corners(cell, 1);
            let (pa, pb) = (cs[a], cs[b]);
            if inside(&lat, pa) == inside(&lat, pb) {
                continue;
            }
            for c in edge_cells(pa, axis, n) {
                if seen.insert(c) {
                    fresh.push(c);
                }
            }
        }
        lat.fill(field, fresh.iter().flat_map(|&c| corners(c, 1)))?;
        queue.extend(fresh);
    }
    Ok(lat)
}

/// Refines and meshes a field in one go.
pub fn extract_mesh(
    field: &dyn ScalarField,
    r0: usize,
    r_final: usize,
    tau: f64,
) -> Result<(TriMesh, usize)> {
    let lat = mise_refine(field, r0, r_final, tau)?;
    Ok((marching_cubes(&lat, tau), lat.evaluated()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> FnField<impl Fn([f64; 3]) -> f64> {
        FnField(move |p: [f64; 3]| {
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            1.0 / (1.0 + ((d - r) * 40.0).exp())
        })
    }

    #[test]
    fn constant_fields_do_not_refine() {
        for c in [0.9, 0.0] {
            let f = FnField(move |_| c);
            let lat = mise_refine(&f, 8, 32, 0.2).unwrap();
            assert_eq!(lat.evaluated(), 9 * 9 * 9);
            assert!(marching_cubes(&lat, 0.2).is_empty());
        }
    }

    #[test]
    fn argument_checks() {
        let f = FnField(|_| 0.5);
        assert!(mise_refine(&f, 6, 32, 0.2).is_err());
        assert!(mise_refine(&f, 32, 32, 0.2).is_err());
        assert!(mise_refine(&f, 8, 32, 1.0).is_err());
        let bad = FnField(|p: [f64; 3]| if p[0] > 0.3 { f64::NAN } else { 0.5 });
        match mise_refine(&bad, 4, 8, 0.2) {
            Err(Error::Domain { detail, .. }) => assert!(detail.contains("NaN")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let lat = dense_lattice(&sphere(0.3), 32).unwrap();
        let mesh = marching_cubes(&lat, 0.2);
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        let vol = mesh.signed_volume();
        assert!(vol > 0.0);
        // Close to the analytic ball of the 0.2 level set.
        let r = 0.3 + (4.0f64).ln() / 40.0;
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        assert!((vol - exact).abs() / exact < 0.05, "{vol} vs {exact}");
    }

    #[test]
    fn single_occupied_sample_is_an_octahedron() {
        let f = FnField(|p: [f64; 3]| {
            if p.iter().all(|c| c.abs() < 1e-9) {
                1.0
            } else {
                0.0
            }
        });
        let lat = dense_lattice(&f, 2).unwrap();
        let mesh = marching_cubes(&lat, 0.2);
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.euler_characteristic(), 2);
        assert!(mesh.is_watertight());
        assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn refined_sphere_matches_dense() {
        let f = sphere(0.3);
        let lat = mise_refine(&f, 8, 32, 0.2).unwrap();
        assert!(
            (lat.evaluated() as f64) < 0.2 * 33f64.powi(3),
            "{}",
            lat.evaluated()
        );
        assert!(lat.evaluated() > 9 * 9 * 9);
        let dense = dense_lattice(&f, 32).unwrap();
        assert_eq!(marching_cubes(&lat, 0.2), marching_cubes(&dense, 0.2));
    }

    #[test]
    fn refined_blobs_match_dense() {
        use rand::Rng;
        for seed in 0..10u64 {
            let mut rng = crate::seed::rng(seed, &[7]);
            let blobs: Vec<([f64; 3], f64)> = (0..3)
                .map(|_| {
                    let c = [0, 1, 2].map(|_| rng.random_range(-0.2..0.2));
                    (c, rng.random_range(0.12..0.22))
                })
                .collect();
            let f = FnField(move |p: [f64; 3]| {
                let s: f64 = blobs
                    .iter()
                    .map(|(c, r)| {
                        let d2: f64 = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum();
                        (-d2 / (r * r)).exp()
                    })
                    .sum();
                s / (1.0 + s)
            });
            let lat = mise_refine(&f, 8, 32, 0.2).unwrap();
            let dense = marching_cubes(&dense_lattice(&f, 32).unwrap(), 0.2);
            assert!(!dense.is_empty());
            assert_eq!(marching_cubes(&lat, 0.2), dense, "seed {seed}");
        }
    }

    #[test]
    fn vertices_lie_on_the_level_set() {
        let f = sphere(0.25);
        let mesh = marching_cubes(&dense_lattice(&f, 16).unwrap(), 0.5);
        let vals = f.eval_batch(&mesh.vertices).unwrap();
        // The logistic has slope ≤ 10 per unit; one cell is 1/16 wide.
        assert!(vals.iter().all(|v| (v - 0.5).abs() < 10.0 / 16.0));
        let r: Vec<f64> = mesh
            .vertices
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .collect();
        assert!(r.iter().all(|r| (r - 0.25).abs() < 1.0 / 16.0));
    }
}
