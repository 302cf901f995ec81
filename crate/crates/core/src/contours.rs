//! Closed planar test shapes with ground-truth nearest-point queries.
//!
//! Every shape is traversed counter-clockwise from a parameter `u ∈ [0, 1)`.
//! A cumulative arc-length table maps arc position to `u`; the outward
//! normal is the tangent rotated by -90°.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

use crate::geometry::heading;

/// Samples in the arc-length table.
pub const ARC_TABLE_SAMPLES: usize = 4096;

// 5-point Gauss-Legendre nodes/weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683,
    0.538_469_310_105_683,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
    0.236_926_885_056_189,
];

/// Shape family and size parameters, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeKind {
    Circle {
        radius: f64,
    },
    Square {
        side: f64,
        #[serde(default = "default_fillet")]
        fillet: f64,
    },
    /// Polar sinusoid `r(φ) = radius + amplitude·sin(waves·φ)`.
    CircularWave {
        radius: f64,
        amplitude: f64,
        waves: u32,
    },
}

fn default_fillet() -> f64 {
    2.0
}

impl ShapeKind {
    pub fn default_circle() -> Self {
        ShapeKind::Circle { radius: 50.0 }
    }

    pub fn default_square() -> Self {
        ShapeKind::Square {
            side: 100.0,
            fillet: 2.0,
        }
    }

    pub fn default_circular_wave() -> Self {
        ShapeKind::CircularWave {
            radius: 50.0,
            amplitude: 10.0,
            waves: 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle { .. } => "circle",
            ShapeKind::Square { .. } => "square",
            ShapeKind::CircularWave { .. } => "circular-wave",
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            ShapeKind::Circle { radius } if !(radius > 0.0) => Err("circle radius must be > 0".into()),
            ShapeKind::Square { side, fillet } if !(side > 0.0) || !(fillet >= 0.0) || 2.0 * fillet > side => {
                Err("square needs side > 0 and 0 <= fillet <= side/2".into())
            }
            ShapeKind::CircularWave {
                radius,
                amplitude,
                waves,
            } if !(radius > 0.0) || !(amplitude >= 0.0) || amplitude >= radius || waves == 0 => {
                Err("circular wave needs 0 <= amplitude < radius and waves > 0".into())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of a nearest-point query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourQuery {
    pub nearest_point: [f64; 2],
    /// Positive outside the shape.
    pub signed_distance: f64,
    pub tangent: [f64; 2],
    /// Outward unit normal.
    pub normal: [f64; 2],
    pub arc_position: f64,
}

impl ContourQuery {
    /// Heading of the tangent in degrees.
    pub fn tangent_angle(&self) -> f64 {
        heading(self.tangent)
    }
}

/// An immutable closed contour with a precomputed arc-length table.
#[derive(Debug, Clone)]
pub struct Contour {
    kind: ShapeKind,
    center: [f64; 2],
    /// Cumulative arc length at `u = i / N`, `N + 1` entries.
    arc: Vec<f64>,
    // Dense point samples for the coarse nearest-point search.
    samples: Vec<[f64; 2]>,
}

impl Contour {
    pub fn new(kind: ShapeKind, center: [f64; 2]) -> Result<Self, String> {
        kind.validate()?;
        let mut c = Contour {
            kind,
            center,
            arc: Vec::with_capacity(ARC_TABLE_SAMPLES + 1),
            samples: Vec::with_capacity(ARC_TABLE_SAMPLES),
        };
        let n = ARC_TABLE_SAMPLES;
        c.arc.push(0.0);
        for i in 0..n {
            let u0 = i as f64 / n as f64;
            let u1 = (i + 1) as f64 / n as f64;
            let seg = c.speed_integral(u0, u1);
            let last = *c.arc.last().unwrap();
            c.arc.push(last + seg);
            c.samples.push(c.eval(u0));
        }
        Ok(c)
    }

    pub fn circle(radius: f64) -> Self {
        Self::new(ShapeKind::Circle { radius }, [0.0, 0.0]).expect("valid circle")
    }

    pub fn square(side: f64, fillet: f64) -> Self {
        Self::new(ShapeKind::Square { side, fillet }, [0.0, 0.0]).expect("valid square")
    }

    pub fn circular_wave(radius: f64, amplitude: f64, waves: u32) -> Self {
        Self::new(
            ShapeKind::CircularWave {
                radius,
                amplitude,
                waves,
            },
            [0.0, 0.0],
        )
        .expect("valid circular wave")
    }

    pub fn kind(&self) -> &ShapeKind {
        &self.kind
    }

    pub fn center(&self) -> [f64; 2] {
        self.center
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn perimeter(&self) -> f64 {
        self.arc[ARC_TABLE_SAMPLES]
    }

    /// Same shape moved by `delta`.
    pub fn translated(&self, delta: [f64; 2]) -> Contour {
        let mut c = self.clone();
        c.center = [c.center[0] + delta[0], c.center[1] + delta[1]];
        for p in &mut c.samples {
            p[0] += delta[0];
            p[1] += delta[1];
        }
        c
    }

    /// Point on the contour for parameter `u` (periodic with period 1).
    pub fn eval(&self, u: f64) -> [f64; 2] {
        let u = u.rem_euclid(1.0);
        let [cx, cy] = self.center;
        match self.kind {
            ShapeKind::Circle { radius } => {
                let (s, c) = (2.0 * PI * u).sin_cos();
                [cx + radius * c, cy + radius * s]
            }
            ShapeKind::Square { side, fillet } => {
                let [x, y] = square_point(side, fillet, u * square_perimeter(side, fillet)).0;
                [cx + x, cy + y]
            }
            ShapeKind::CircularWave {
                radius,
                amplitude,
                waves,
            } => {
                let phi = 2.0 * PI * u;
                let r = radius + amplitude * (waves as f64 * phi).sin();
                let (s, c) = phi.sin_cos();
                [cx + r * c, cy + r * s]
            }
        }
    }

    /// Derivative of [`Contour::eval`] with respect to `u`.
    pub fn eval_derivative(&self, u: f64) -> [f64; 2] {
        let u = u.rem_euclid(1.0);
        match self.kind {
            ShapeKind::Circle { radius } => {
                let (s, c) = (2.0 * PI * u).sin_cos();
                let k = 2.0 * PI * radius;
                [-k * s, k * c]
            }
            ShapeKind::Square { side, fillet } => {
                let len = square_perimeter(side, fillet);
                let t = square_point(side, fillet, u * len).1;
                [t[0] * len, t[1] * len]
            }
            ShapeKind::CircularWave {
                radius,
                amplitude,
                waves,
            } => {
                let k = waves as f64;
                let phi = 2.0 * PI * u;
                let r = radius + amplitude * (k * phi).sin();
                let dr = amplitude * k * (k * phi).cos();
                let (s, c) = phi.sin_cos();
                [2.0 * PI * (dr * c - r * s), 2.0 * PI * (dr * s + r * c)]
            }
        }
    }

    fn speed(&self, u: f64) -> f64 {
        let [dx, dy] = self.eval_derivative(u);
        dx.hypot(dy)
    }

    fn speed_integral(&self, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        GL_NODES
            .iter()
            .zip(GL_WEIGHTS.iter())
            .map(|(x, w)| w * self.speed(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Arc length from `u = 0` to `u`.
    pub fn arc_at(&self, u: f64) -> f64 {
        let n = ARC_TABLE_SAMPLES;
        let u = u.rem_euclid(1.0);
        let i = ((u * n as f64).floor() as usize).min(n - 1);
        let u0 = i as f64 / n as f64;
        self.arc[i] + self.speed_integral(u0, u)
    }

    /// Parameter `u` at arc position `s` (wrapped modulo the perimeter).
    pub fn param_at(&self, s: f64) -> f64 {
        let n = ARC_TABLE_SAMPLES;
        let len = self.perimeter();
        let s = s.rem_euclid(len);
        // Last table entry with arc[i] <= s.
        let i = match self.arc.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        };
        let (s0, s1) = (self.arc[i], self.arc[i + 1]);
        let u0 = i as f64 / n as f64;
        let du = 1.0 / n as f64;
        let mut u = u0 + du * ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
        // Newton on the exact in-segment arc length.
        for _ in 0..3 {
            let f = s0 + self.speed_integral(u0, u) - s;
            let sp = self.speed(u);
            if sp <= 0.0 {
                break;
            }
            u = (u - f / sp).clamp(u0, u0 + du);
        }
        u
    }

    /// Point at arc position `s` (wraps modulo the perimeter).
    pub fn point_at(&self, s: f64) -> [f64; 2] {
        self.eval(self.param_at(s))
    }

    /// Unit tangent at parameter `u`.
    pub fn tangent_at_param(&self, u: f64) -> [f64; 2] {
        let [dx, dy] = self.eval_derivative(u);
        let n = dx.hypot(dy);
        [dx / n, dy / n]
    }

    /// Unit tangent at arc position `s`.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        self.tangent_at_param(self.param_at(s))
    }

    /// Nearest point, signed distance, local frame and arc position for `p`.
    pub fn query(&self, p: [f64; 2]) -> ContourQuery {
        let n = self.samples.len();
        let d2 = |q: &[f64; 2]| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let dist: Vec<f64> = self.samples.iter().map(d2).collect();
        // Local minima of the sampled distance, best few refined.
        let mut minima: Vec<usize> = (0..n)
            .filter(|&i| {
                let prev = dist[(i + n - 1) % n];
                let next = dist[(i + 1) % n];
                dist[i] <= prev && dist[i] <= next
            })
            .collect();
        minima.sort_by(|a, b| dist[*a].partial_cmp(&dist[*b]).unwrap().then(a.cmp(b)));
        minima.truncate(3);
        if minima.is_empty() {
            minima.push(0);
        }
        let mut best_u = 0.0;
        let mut best_d = f64::INFINITY;
        for &i in &minima {
            let lo = (i as f64 - 1.0) / n as f64;
            let hi = (i as f64 + 1.0) / n as f64;
            let u = golden_min(|u| d2(&self.eval(u)), lo, hi, 1e-13);
            let d = d2(&self.eval(u));
            if d < best_d {
                best_d = d;
                best_u = u.rem_euclid(1.0);
            }
        }
        self.query_at_param(p, best_u)
    }

    fn query_at_param(&self, p: [f64; 2], u: f64) -> ContourQuery {
        let q = self.eval(u);
        let tangent = self.tangent_at_param(u);
        let normal = [tangent[1], -tangent[0]];
        let dx = p[0] - q[0];
        let dy = p[1] - q[1];
        let dist = dx.hypot(dy);
        let side = dx * normal[0] + dy * normal[1];
        let signed_distance = if side < 0.0 { -dist } else { dist };
        ContourQuery {
            nearest_point: q,
            signed_distance,
            tangent,
            normal,
            arc_position: self.arc_at(u),
        }
    }

    /// Polyline with `n` points evenly spaced in arc length.
    pub fn polyline(&self, n: usize) -> Vec<[f64; 2]> {
        let len = self.perimeter();
        (0..n).map(|i| self.point_at(len * i as f64 / n as f64)).collect()
    }
}

/// Perimeter of a square with rounded corners.
fn square_perimeter(side: f64, fillet: f64) -> f64 {
    4.0 * (side - 2.0 * fillet) + 2.0 * PI * fillet
}

/// Point and unit tangent at arc length `s` along a rounded square centred
/// at the origin, starting at `(side/2, 0)` and running counter-clockwise.
fn square_point(side: f64, fillet: f64, s: f64) -> ([f64; 2], [f64; 2]) {
    let h = side / 2.0;
    let flat = side - 2.0 * fillet;
    let quarter = PI * fillet / 2.0;
    let len = square_perimeter(side, fillet);
    // Arc length from the start to the first corner.
    let mut s = (s + flat / 2.0).rem_euclid(len);
    // Each side: a straight run of `flat` then a quarter fillet.
    for k in 0..4 {
        let rot = k as f64 * PI / 2.0;
        let (sr, cr) = rot.sin_cos();
        let rotate = |v: [f64; 2]| [cr * v[0] - sr * v[1], sr * v[0] + cr * v[1]];
        if s < flat {
            let local = [h, -flat / 2.0 + s.min(flat)];
            return (rotate(local), rotate([0.0, 1.0]));
        }
        s -= flat;
        if s < quarter || k == 3 {
            let a = if fillet > 0.0 { (s / fillet).min(PI / 2.0) } else { 0.0 };
            let c = [h - fillet, h - fillet];
            let local = [c[0] + fillet * a.cos(), c[1] + fillet * a.sin()];
            let tangent = if fillet > 0.0 { [-a.sin(), a.cos()] } else { [0.0, 1.0] };
            return (rotate(local), rotate(tangent));
        }
        s -= quarter;
    }
    unreachable!("arc position wrapped into the perimeter")
}

/// Golden-section minimisation of `f` on `[lo, hi]`.
fn golden_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn shapes() -> Vec<Contour> {
        vec![
            Contour::circle(50.0),
            Contour::square(100.0, 2.0),
            Contour::circular_wave(50.0, 10.0, 6),
        ]
    }

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    #[test]
    fn circle_parameter_origin_and_quarter() {
        let c = Contour::new(ShapeKind::Circle { radius: 50.0 }, [3.0, -2.0]).unwrap();
        assert!(dist(c.point_at(0.0), [53.0, -2.0]) < 1e-9);
        assert!(dist(c.point_at(c.perimeter() / 4.0), [3.0, 48.0]) < 1e-6);
        assert!((c.perimeter() - 100.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn sharp_square_points_lie_on_boundary() {
        let c = Contour::square(100.0, 0.0);
        assert!((c.perimeter() - 400.0).abs() < 1e-9);
        for i in 0..1000 {
            let p = c.point_at(c.perimeter() * i as f64 / 1000.0);
            let m = p[0].abs().max(p[1].abs());
            assert!((m - 50.0).abs() < 1e-9, "{p:?}");
        }
        assert!(dist(c.point_at(0.0), [50.0, 0.0]) < 1e-12);
    }

    #[test]
    fn contours_close_and_are_unit_speed() {
        for c in shapes() {
            let len = c.perimeter();
            assert!(dist(c.point_at(0.0), c.point_at(len)) < 1e-6, "{}", c.name());
            let h = 1e-4;
            for i in 0..2000 {
                let s = len * (i as f64 + 0.37) / 2000.0;
                let v = dist(c.point_at(s + h), c.point_at(s - h)) / (2.0 * h);
                assert!((v - 1.0).abs() < 1e-3, "{} s={s} speed={v}", c.name());
            }
        }
    }

    #[test]
    fn circle_radial_query() {
        let c = Contour::circle(50.0);
        let q = c.query([60.0, 0.0]);
        assert!((q.signed_distance - 10.0).abs() < 1e-9);
        assert!(dist(q.nearest_point, [50.0, 0.0]) < 1e-6);
        assert!(dist(q.normal, [1.0, 0.0]) < 1e-6);
        assert!(q.arc_position < 1e-6 || (q.arc_position - c.perimeter()).abs() < 1e-6);
    }

    #[test]
    fn square_center_is_half_side_inside() {
        let c = Contour::square(100.0, 2.0);
        let q = c.query([0.0, 0.0]);
        assert!((q.signed_distance + 50.0).abs() < 1e-9, "{}", q.signed_distance);
    }

    #[test]
    fn query_frame_is_orthonormal_and_on_contour() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for c in shapes() {
            for _ in 0..200 {
                let p = [rng.random_range(-80.0..80.0), rng.random_range(-80.0..80.0)];
                let q = c.query(p);
                let dot = q.tangent[0] * q.normal[0] + q.tangent[1] * q.normal[1];
                assert!(dot.abs() < 1e-9);
                let back = c.query(q.nearest_point);
                assert!(back.signed_distance.abs() < 1e-6, "{}", back.signed_distance);
            }
        }
    }

    #[test]
    fn walking_back_along_normal_lands_on_contour() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for c in shapes() {
            let mut tested = 0;
            while tested < 200 {
                let a: f64 = rng.random_range(0.0..360.0);
                let r: f64 = rng.random_range(62.0..90.0);
                let p = [r * a.to_radians().cos(), r * a.to_radians().sin()];
                let q = c.query(p);
                if q.signed_distance <= 0.0 {
                    continue;
                }
                let land = [
                    p[0] - q.signed_distance * q.normal[0],
                    p[1] - q.signed_distance * q.normal[1],
                ];
                assert!(c.query(land).signed_distance.abs() < 1e-3);
                tested += 1;
            }
        }
    }

    #[test]
    fn arc_position_round_trips_away_from_corners() {
        for c in shapes() {
            let len = c.perimeter();
            for i in 0..500 {
                let s = len * (i as f64 + 0.5) / 500.0;
                let q = c.query(c.point_at(s));
                let diff = (q.arc_position - s).rem_euclid(len);
                let diff = diff.min(len - diff);
                assert!(diff < 1e-3, "{} s={s} got {}", c.name(), q.arc_position);
            }
        }
    }

    #[test]
    fn translation_moves_queries() {
        let c = Contour::circular_wave(50.0, 10.0, 6);
        let t = c.translated([10.0, -5.0]);
        let q0 = c.query([30.0, 40.0]);
        let q1 = t.query([40.0, 35.0]);
        assert!((q0.signed_distance - q1.signed_distance).abs() < 1e-9);
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(Contour::new(ShapeKind::Circle { radius: 0.0 }, [0.0, 0.0]).is_err());
        assert!(Contour::new(
            ShapeKind::CircularWave {
                radius: 10.0,
                amplitude: 10.0,
                waves: 3
            },
            [0.0, 0.0]
        )
        .is_err());
        assert!(Contour::new(ShapeKind::Square { side: 10.0, fillet: 6.0 }, [0.0, 0.0]).is_err());
    }
}
