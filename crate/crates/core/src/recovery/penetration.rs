use log::{debug, warn};

use crate::mesh::{GarmentMesh, TriMesh};
use crate::vec3::{self, V3};
use crate::{Error, Result};

/// Penetration smoothness weight φ.
pub const DEFAULT_PENETRATION_SMOOTHNESS: f64 = 5e3;

#[derive(Clone, Copy, Debug)]
pub struct PenetrationOptions {
    pub phi: f64,
    pub max_rounds: usize,
    /// Depth below which a vertex counts as resolved, in meters.
    pub tolerance: f64,
    /// Extra distance to push projected targets out along the body normal.
    pub margin: f64,
    pub max_cg_iters: usize,
}

impl Default for PenetrationOptions {
    fn default() -> Self {
        Self { phi: DEFAULT_PENETRATION_SMOOTHNESS, max_rounds: 3, tolerance: 1e-4, margin: 0.0, max_cg_iters: 20000 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct PenetrationReport {
    pub positions: Vec<V3>,
    /// Vertices that were inside the body at some round.
    pub constrained: Vec<usize>,
    pub rounds: usize,
    pub max_depth_before: f64,
    /// Depth left by the last energy round, before snapping.
    pub residual_depth: f64,
    pub max_depth_after: f64,
    /// Vertices placed directly on the body after the last round.
    pub snapped: Vec<usize>,
    pub resolved: bool,
}

/// Closest point to `p` on triangle `abc`.
pub fn closest_point_on_triangle(p: V3, a: V3, b: V3, c: V3) -> V3 {
    let ab = vec3::sub(b, a);
    let ac = vec3::sub(c, a);
    let ap = vec3::sub(p, a);
    let d1 = vec3::dot(ab, ap);
    let d2 = vec3::dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = vec3::sub(p, b);
    let d3 = vec3::dot(ab, bp);
    let d4 = vec3::dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return vec3::add(a, vec3::scale(ab, d1 / (d1 - d3)));
    }
    let cp = vec3::sub(p, c);
    let d5 = vec3::dot(ab, cp);
    let d6 = vec3::dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return vec3::add(a, vec3::scale(ac, d2 / (d2 - d6)));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return vec3::add(b, vec3::scale(vec3::sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    vec3::add(a, vec3::add(vec3::scale(ab, v), vec3::scale(ac, w)))
}

/// Generalized winding number of `body` around `p` (1 inside, 0 outside
/// for a closed, outward-oriented mesh).
pub fn winding_number(p: V3, body: &TriMesh) -> f64 {
    let mut total = 0.0;
    for f in &body.faces {
        let a = vec3::sub(body.positions[f[0]], p);
        let b = vec3::sub(body.positions[f[1]], p);
        let c = vec3::sub(body.positions[f[2]], p);
        let (la, lb, lc) = (vec3::norm(a), vec3::norm(b), vec3::norm(c));
        let num = vec3::dot(a, vec3::cross(b, c));
        let den = la * lb * lc + vec3::dot(a, b) * lc + vec3::dot(b, c) * la + vec3::dot(c, a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

/// Body-space query helper with a bounding-box prefilter.
struct BodyQuery<'a> {
    body: &'a TriMesh,
    lo: V3,
    hi: V3,
}

impl<'a> BodyQuery<'a> {
    fn new(body: &'a TriMesh) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &body.positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Self { body, lo, hi }
    }

    fn inside(&self, p: V3) -> bool {
        (0..3).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k]) && winding_number(p, self.body) >= 0.5
    }

    fn closest(&self, p: V3) -> (V3, f64) {
        let mut best = (p, f64::INFINITY);
        for f in &self.body.faces {
            let [a, b, c] = f.map(|i| self.body.positions[i]);
            let q = closest_point_on_triangle(p, a, b, c);
            let d = vec3::norm(vec3::sub(q, p));
            if d < best.1 {
                best = (q, d);
            }
        }
        best
    }

    fn signed(&self, p: V3) -> f64 {
        let d = self.closest(p).1;
        if self.inside(p) { -d } else { d }
    }
}

/// Distance from `p` to `body`, negative inside.
pub fn signed_distance(p: V3, body: &TriMesh) -> f64 {
    BodyQuery::new(body).signed(p)
}

/// Uniform Laplacian on displacements, over every vertex with neighbours.
/// Including boundary vertices leaves only translations in its null space.
struct Smoothness {
    rings: Vec<Vec<usize>>,
}

impl Smoothness {
    /// Diagonal of `Lᵀ L`.
    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rings.len()];
        for (p, ring) in self.rings.iter().enumerate() {
            if ring.is_empty() {
                continue;
            }
            let inv = 1.0 / ring.len() as f64;
            d[p] += 1.0;
            for &q in ring {
                d[q] += inv * inv;
            }
        }
        d
    }

    /// `Lᵀ L x` for one coordinate.
    fn normal_op(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..x.len() {
            let ring = &self.rings[p];
            if ring.is_empty() {
                continue;
            }
            let inv = 1.0 / ring.len() as f64;
            let l = ring.iter().map(|&q| x[q]).sum::<f64>() * inv - x[p];
            out[p] -= l;
            for &q in ring {
                out[q] += l * inv;
            }
        }
    }
}

/// Solves `(S + φ LᵀL) d = S r` per coordinate by Jacobi-preconditioned
/// conjugate gradients, where `S` selects the constrained vertices.
fn solve_displacement(
    smooth: &Smoothness,
    phi: f64,
    selected: &[bool],
    rhs: &[V3],
    max_iters: usize,
) -> Result<Vec<V3>> {
    let n = rhs.len();
    let diag: Vec<f64> = smooth
        .diagonal()
        .iter()
        .zip(selected)
        .map(|(d, &s)| phi * d + if s { 1.0 } else { 0.0 })
        .collect();
    let inv_diag: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let mut out = vec![[0.0; 3]; n];
    let mut lap = vec![0.0; n];
    let apply = |x: &[f64], y: &mut [f64], lap: &mut [f64]| {
        smooth.normal_op(x, lap);
        for i in 0..n {
            y[i] = phi * lap[i] + if selected[i] { x[i] } else { 0.0 };
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for k in 0..3 {
        let b: Vec<f64> = (0..n).map(|i| if selected[i] { rhs[i][k] } else { 0.0 }).collect();
        let bnorm = dot(&b, &b).sqrt();
        if bnorm == 0.0 {
            continue;
        }
        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut d = z.clone();
        let mut ad = vec![0.0; n];
        let mut rz = dot(&r, &z);
        for _ in 0..max_iters {
            if dot(&r, &r).sqrt() <= 1e-12 * bnorm {
                break;
            }
            apply(&d, &mut ad, &mut lap);
            let dad = dot(&d, &ad);
            if dad <= 0.0 {
                break;
            }
            let alpha = rz / dad;
            for i in 0..n {
                x[i] += alpha * d[i];
                r[i] -= alpha * ad[i];
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                d[i] = z[i] + beta * d[i];
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("penetration solve produced non-finite displacement".into()));
        }
        for i in 0..n {
            out[i][k] = x[i];
        }
    }
    Ok(out)
}

/// Pushes garment vertices out of `body`.
///
/// Each round minimizes `Σ_{p∈P_C} ‖p* − p‖² + φ Σ_p ‖Δ(p − p_start)‖²`
/// where `p*` is the nearest body point of every vertex found inside.
/// Vertices that stay inside after a round have their target moved further
/// out by the remaining depth and the system is solved again. Whatever is
/// still inside after `max_rounds` is placed on its nearest body point.
pub fn resolve_penetrations(
    mesh: &GarmentMesh,
    positions: &[V3],
    body: &TriMesh,
    opts: &PenetrationOptions,
) -> Result<PenetrationReport> {
    body.check_closed()?;
    if !(opts.phi > 0.0) {
        return Err(Error::Parameter(format!("phi must be positive, got {}", opts.phi)));
    }
    if positions.len() != mesh.positions.len() {
        return Err(Error::Shape(format!("{} positions for {} vertices", positions.len(), mesh.positions.len())));
    }
    let query = BodyQuery::new(body);
    let n = positions.len();
    let depth_of = |p: V3| -> Option<(V3, f64)> {
        if query.inside(p) {
            let (q, d) = query.closest(p);
            Some((q, d))
        } else {
            None
        }
    };
    let initial: Vec<Option<(V3, f64)>> = positions.iter().map(|&p| depth_of(p)).collect();
    let max_depth_before = initial.iter().flatten().map(|x| x.1).fold(0.0, f64::max);
    let mut report = PenetrationReport {
        positions: positions.to_vec(),
        max_depth_before,
        max_depth_after: max_depth_before,
        resolved: true,
        ..Default::default()
    };
    if initial.iter().all(Option::is_none) {
        return Ok(report);
    }

    let smooth = Smoothness { rings: mesh.one_rings() };
    let mut selected = vec![false; n];
    let mut targets = vec![[0.0; 3]; n];
    let mut current = initial;
    let mut pos = positions.to_vec();
    for round in 0..opts.max_rounds.max(1) {
        for (i, hit) in current.iter().enumerate() {
            let Some((q, _)) = hit else { continue };
            let push = vec3::sub(*q, pos[i]);
            let out = match vec3::normalize(push) {
                Some(dir) => vec3::add(push, vec3::scale(dir, opts.margin)),
                None => push,
            };
            if selected[i] {
                targets[i] = vec3::add(targets[i], out);
            } else {
                selected[i] = true;
                targets[i] = vec3::add(pos[i], out);
            }
        }
        let rhs: Vec<V3> = (0..n).map(|i| vec3::sub(targets[i], positions[i])).collect();
        let disp = solve_displacement(&smooth, opts.phi, &selected, &rhs, opts.max_cg_iters)?;
        pos = positions.iter().zip(&disp).map(|(p, d)| vec3::add(*p, *d)).collect();
        current = pos.iter().map(|&p| depth_of(p)).collect();
        let depth = current.iter().flatten().map(|x| x.1).fold(0.0, f64::max);
        report.rounds = round + 1;
        report.max_depth_after = depth;
        debug!("penetration round {}: max depth {:.3e}", round + 1, depth);
        if depth <= opts.tolerance {
            break;
        }
    }
    report.residual_depth = report.max_depth_after;
    if report.max_depth_after > opts.tolerance {
        warn!(
            "penetrations not resolved after {} rounds (residual depth {:.3e} m); snapping remaining vertices",
            report.rounds, report.max_depth_after
        );
        for (i, hit) in current.iter().enumerate() {
            if let Some((q, _)) = hit {
                pos[i] = *q;
                report.snapped.push(i);
            }
        }
        report.max_depth_after = pos.iter().filter_map(|&p| depth_of(p)).map(|x| x.1).fold(0.0, f64::max);
    }
    report.resolved = report.max_depth_after <= opts.tolerance;
    report.constrained = (0..n).filter(|&i| selected[i]).collect();
    report.positions = pos;
    Ok(report)
}
