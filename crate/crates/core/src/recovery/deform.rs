use log::debug;

use super::{smooth_vertices, uniform_laplacian, RecoveryProblem};
use crate::mesh::GarmentMesh;
use crate::vec3::{self, V3};
use crate::{Error, Result};

/// Laplacian smoothness weight η.
pub const DEFAULT_LAPLACIAN_WEIGHT: f64 = 5e3;
/// Anchor weight ω.
pub const DEFAULT_ANCHOR_WEIGHT: f64 = 8.0;

const DEGENERATE_EDGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
pub struct DeformOptions {
    pub max_iters: usize,
    /// Largest vertex displacement of the first trial step, in meters.
    pub initial_step: f64,
    /// Stop once an accepted step lowers the energy by less than this fraction.
    pub rel_tol: f64,
    /// Keep a copy of every accepted iterate.
    pub record_iterates: bool,
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self { max_iters: 500, initial_step: 1e-3, rel_tol: 1e-6, record_iterates: false }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DeformReport {
    pub positions: Vec<V3>,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
    pub iterates: Vec<Vec<V3>>,
    pub iterations: usize,
    /// Edge evaluations skipped because an edge collapsed.
    pub skipped_edges: usize,
    pub converged: bool,
}

/// Normal-alignment energy with Laplacian smoothness and an anchor to the
/// start positions:
///
/// `E(P) = Σ_p Σ_{q∈R¹(p)} (n_p·(q−p)/‖q−p‖)² + η Σ_p ‖Δp‖² + ω Σ_p ‖p₀−p‖²`
///
/// `Δ` is the uniform Laplacian, evaluated on interior vertices only.
pub struct DeformEnergy {
    rings: Vec<Vec<usize>>,
    smooth: Vec<bool>,
    normals: Vec<V3>,
    anchor: Vec<V3>,
    eta: f64,
    omega: f64,
}

impl DeformEnergy {
    pub fn new(problem: &RecoveryProblem) -> Self {
        let rings = problem.mesh.one_rings();
        let smooth = smooth_vertices(&problem.mesh, &rings);
        Self {
            rings,
            smooth,
            normals: problem.target_normals.clone(),
            anchor: problem.mesh.positions.clone(),
            eta: problem.weights.eta,
            omega: problem.weights.omega,
        }
    }

    /// Energy and the number of collapsed edges that were skipped.
    pub fn energy(&self, pos: &[V3]) -> (f64, usize) {
        let mut normal_term = 0.0;
        let mut skipped = 0;
        for (p, ring) in self.rings.iter().enumerate() {
            let n = self.normals[p];
            for &q in ring {
                let e = vec3::sub(pos[q], pos[p]);
                let len2 = vec3::dot(e, e);
                if len2 < DEGENERATE_EDGE * DEGENERATE_EDGE {
                    skipped += 1;
                    continue;
                }
                let s = vec3::dot(n, e);
                normal_term += s * s / len2;
            }
        }
        let mut lap_term = 0.0;
        let mut anchor_term = 0.0;
        for p in 0..pos.len() {
            if self.smooth[p] {
                let l = uniform_laplacian(pos, &self.rings[p], p);
                lap_term += vec3::dot(l, l);
            }
            let d = vec3::sub(self.anchor[p], pos[p]);
            anchor_term += vec3::dot(d, d);
        }
        (normal_term + self.eta * lap_term + self.omega * anchor_term, skipped)
    }

    pub fn gradient(&self, pos: &[V3]) -> Vec<V3> {
        let mut g = vec![[0.0; 3]; pos.len()];
        for (p, ring) in self.rings.iter().enumerate() {
            let n = self.normals[p];
            for &q in ring {
                let e = vec3::sub(pos[q], pos[p]);
                let len2 = vec3::dot(e, e);
                if len2 < DEGENERATE_EDGE * DEGENERATE_EDGE {
                    continue;
                }
                let s = vec3::dot(n, e);
                // d/de (s²/‖e‖²) = 2s n/‖e‖² − 2s² e/‖e‖⁴
                let de = vec3::sub(vec3::scale(n, 2.0 * s / len2), vec3::scale(e, 2.0 * s * s / (len2 * len2)));
                g[q] = vec3::add(g[q], de);
                g[p] = vec3::sub(g[p], de);
            }
        }
        for p in 0..pos.len() {
            if self.smooth[p] {
                let ring = &self.rings[p];
                let l = uniform_laplacian(pos, ring, p);
                let w = 2.0 * self.eta;
                g[p] = vec3::sub(g[p], vec3::scale(l, w));
                let share = vec3::scale(l, w / ring.len() as f64);
                for &q in ring {
                    g[q] = vec3::add(g[q], share);
                }
            }
            g[p] = vec3::add(g[p], vec3::scale(vec3::sub(pos[p], self.anchor[p]), 2.0 * self.omega));
        }
        g
    }
}

/// Backtracking gradient descent on `energy`. Trial steps move the vertex
/// with the largest gradient by `step` meters; a rejected trial halves the
/// step and an accepted one grows it by 25%.
pub(crate) fn descend(
    start: Vec<V3>,
    opts: &DeformOptions,
    energy: impl Fn(&[V3]) -> (f64, usize),
    gradient: impl Fn(&[V3]) -> Vec<V3>,
) -> Result<DeformReport> {
    let mut pos = start;
    let (mut e, mut skipped) = energy(&pos);
    if !e.is_finite() {
        return Err(Error::Numerical(format!("initial energy is {e}")));
    }
    let mut report = DeformReport { energies: vec![e], ..Default::default() };
    if opts.record_iterates {
        report.iterates.push(pos.clone());
    }
    let mut step = opts.initial_step;
    for it in 0..opts.max_iters {
        report.iterations = it + 1;
        let g = gradient(&pos);
        let gmax = g.iter().map(|v| vec3::norm(*v)).fold(0.0, f64::max);
        if !gmax.is_finite() {
            return Err(Error::Numerical(format!("gradient is not finite at iteration {it}")));
        }
        if gmax == 0.0 {
            report.converged = true;
            break;
        }
        let mut accepted = None;
        while step > 1e-15 {
            let s = step / gmax;
            let trial: Vec<V3> = pos.iter().zip(&g).map(|(p, d)| vec3::sub(*p, vec3::scale(*d, s))).collect();
            let (et, sk) = energy(&trial);
            if et.is_nan() {
                return Err(Error::Numerical(format!("energy became NaN at iteration {it}")));
            }
            if et <= e {
                accepted = Some((trial, et, sk));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, et, sk)) = accepted else {
            report.converged = true;
            break;
        };
        let rel = (e - et) / e.abs().max(1e-300);
        pos = trial;
        e = et;
        skipped += sk;
        report.energies.push(e);
        if opts.record_iterates {
            report.iterates.push(pos.clone());
        }
        step *= 1.25;
        if rel < opts.rel_tol {
            report.converged = true;
            break;
        }
    }
    debug!("descent: {} iterations, energy {:.6e} -> {:.6e}", report.iterations, report.energies[0], e);
    report.positions = pos;
    report.skipped_edges = skipped;
    Ok(report)
}

/// Moves vertices so one-ring edges become perpendicular to the target
/// normals. The returned energy never exceeds the starting energy.
pub fn deform_to_normals(problem: &RecoveryProblem, opts: &DeformOptions) -> Result<DeformReport> {
    problem.validate()?;
    let energy = DeformEnergy::new(problem);
    descend(problem.mesh.positions.clone(), opts, |p| energy.energy(p), |p| energy.gradient(p))
}

/// Mean angle (radians) between the vertex normals of `positions` (on the
/// connectivity of `mesh`) and `targets`, over interior vertices. Boundary
/// vertex normals only see faces on one side and are left out.
pub fn mean_angular_error(mesh: &GarmentMesh, positions: &[V3], targets: &[V3]) -> f64 {
    let normals = crate::mesh::vertex_normals(positions, &mesh.faces);
    let boundary = mesh.boundary_vertices();
    let mut total = 0.0;
    let mut count = 0;
    for ((n, t), &b) in normals.iter().zip(targets).zip(&boundary) {
        if !b && vec3::norm(*n) > 0.0 {
            total += vec3::angle(*n, *t);
            count += 1;
        }
    }
    total / count.max(1) as f64
}
