//! Tactile image synthesis for marker-field and shading sensors.
//!
//! Both renderers share one contact field, [`penetration`], evaluated in the
//! sensor frame (millimetres, origin at the sensor centre, +x along image
//! columns, +y towards the top row). The model is phenomenological: markers
//! move in proportion to local penetration, shading follows the penetration
//! gradient under a fixed lateral light.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::geometry::direction;

/// Largest slide perturbation the renderer accepts (mm, degrees).
pub const MAX_SLIDE_MM: f64 = 5.0;
pub const MAX_SLIDE_DEG: f64 = 5.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("invalid sensor spec: {0}")]
    Spec(String),
    #[error("contact out of range: {0}")]
    Range(String),
    #[error("invalid image: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorFamily {
    /// Shading (GelSight/DIGIT-style) intensity images.
    Shading,
    /// Marker-field (TacTip/DigiTac-style) binary blob images.
    Marker,
}

impl SensorFamily {
    pub const ALL: [SensorFamily; 2] = [SensorFamily::Shading, SensorFamily::Marker];

    pub fn name(&self) -> &'static str {
        match self {
            SensorFamily::Marker => "marker",
            SensorFamily::Shading => "shading",
        }
    }
}

impl fmt::Display for SensorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensorFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "marker" => Ok(SensorFamily::Marker),
            "shading" => Ok(SensorFamily::Shading),
            _ => Err(format!("unknown sensor family `{s}` (expected marker or shading)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Edge,
    Surface,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Edge, Task::Surface];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Edge => "edge",
            Task::Surface => "surface",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "edge" => Ok(Task::Edge),
            "surface" => Ok(Task::Surface),
            _ => Err(format!("unknown task `{s}` (expected edge or surface)")),
        }
    }
}

/// Sensor geometry and the free parameters of the image-formation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub family: SensorFamily,
    pub image_width: usize,
    pub image_height: usize,
    /// Sensing field, mm.
    pub field_w: f64,
    pub field_h: f64,
    pub marker_count: usize,
    /// Marker disk radius, px.
    pub marker_radius: f64,
    /// Marker displacement per mm of penetration.
    pub gel_stiffness: f64,
    /// Penetration range the membrane resolves, mm.
    pub max_depth: f64,
    pub shear_gain: f64,
    /// Additive Gaussian pixel noise (intensity units).
    pub noise_sigma: f64,
    /// Per-marker position jitter, px.
    pub marker_jitter: f64,
    /// Width of the penetration taper across an edge, mm.
    pub falloff: f64,
    /// Penetration at the nominal edge contact height (depth label 0), mm.
    pub edge_nominal_depth: f64,
    /// Surface contact offset at which the labelled depth range starts, mm.
    pub surface_touch: f64,
    /// Penetration already present at `surface_touch`, mm.
    pub surface_preload: f64,
    /// Penetration gradient across the field for surface contacts, mm/mm.
    pub surface_slope: f64,
    /// Shading background intensity.
    pub ambient: f64,
    /// Shading response per unit penetration gradient.
    pub shading_gain: f64,
    /// Light direction for shading, degrees from +x.
    pub light_angle: f64,
}

impl SensorSpec {
    /// TacTip-style marker sensor: 40 mm field, 331 markers, 128×128 images.
    pub fn tactip() -> Self {
        SensorSpec {
            family: SensorFamily::Marker,
            image_width: 128,
            image_height: 128,
            field_w: 40.0,
            field_h: 40.0,
            marker_count: 331,
            marker_radius: 2.0,
            gel_stiffness: 0.6,
            max_depth: 4.0,
            shear_gain: 0.1,
            noise_sigma: 0.01,
            marker_jitter: 0.2,
            falloff: 2.0,
            edge_nominal_depth: 2.0,
            surface_touch: -1.0,
            surface_preload: 0.25,
            surface_slope: 0.1,
            ambient: 0.0,
            shading_gain: 0.0,
            light_angle: 0.0,
        }
    }

    /// DigiTac-style marker sensor: 25×19 mm field, 140 markers, 160×120 images.
    pub fn digitac() -> Self {
        SensorSpec {
            image_width: 160,
            image_height: 120,
            field_w: 25.0,
            field_h: 19.0,
            marker_count: 140,
            marker_radius: 3.0,
            ..Self::tactip()
        }
    }

    /// DIGIT-style shading sensor: 25×19 mm field, 160×120 images, 1 mm depth range.
    pub fn digit() -> Self {
        SensorSpec {
            family: SensorFamily::Shading,
            image_width: 160,
            image_height: 120,
            field_w: 25.0,
            field_h: 19.0,
            marker_count: 0,
            marker_radius: 0.0,
            gel_stiffness: 0.0,
            max_depth: 1.0,
            shear_gain: 0.1,
            noise_sigma: 0.01,
            marker_jitter: 0.0,
            falloff: 2.0,
            edge_nominal_depth: 0.5,
            surface_touch: -1.0,
            surface_preload: 0.25,
            surface_slope: 0.1,
            ambient: 0.5,
            shading_gain: 0.6,
            light_angle: 90.0,
        }
    }

    pub fn default_for(family: SensorFamily) -> Self {
        match family {
            SensorFamily::Marker => Self::tactip(),
            SensorFamily::Shading => Self::digit(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: &str| Err(SimError::Spec(m.to_string()));
        if self.image_width == 0 || self.image_height == 0 {
            return err("image dimensions must be > 0");
        }
        if !(self.field_w > 0.0 && self.field_h > 0.0) {
            return err("field_w and field_h must be > 0");
        }
        if self.family == SensorFamily::Marker && self.marker_count == 0 {
            return err("marker_count must be > 0 for the marker family");
        }
        if !(self.max_depth > 0.0) {
            return err("max_depth must be > 0");
        }
        if !(0.0..=1.0).contains(&self.shear_gain) {
            return err("shear_gain must lie in [0, 1]");
        }
        if !(self.falloff > 0.0) {
            return err("falloff must be > 0");
        }
        let non_negative = [
            ("noise_sigma", self.noise_sigma),
            ("marker_jitter", self.marker_jitter),
            ("marker_radius", self.marker_radius),
            ("gel_stiffness", self.gel_stiffness),
            ("edge_nominal_depth", self.edge_nominal_depth),
            ("surface_preload", self.surface_preload),
            ("surface_slope", self.surface_slope),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) {
                return Err(SimError::Spec(format!("{name} must be >= 0")));
            }
        }
        if !(self.ambient.is_finite() && self.shading_gain.is_finite() && self.light_angle.is_finite()) {
            return err("shading parameters must be finite");
        }
        Ok(())
    }

    pub fn px_per_mm(&self) -> (f64, f64) {
        (
            self.image_width as f64 / self.field_w,
            self.image_height as f64 / self.field_h,
        )
    }

    /// Sensor-frame position (mm) of the centre of pixel `(col, row)`.
    pub fn pixel_to_mm(&self, col: usize, row: usize) -> [f64; 2] {
        let (sx, sy) = self.px_per_mm();
        [
            (col as f64 + 0.5) / sx - self.field_w / 2.0,
            self.field_h / 2.0 - (row as f64 + 0.5) / sy,
        ]
    }

    /// Continuous pixel coordinates (column, row) of a sensor-frame point.
    pub fn mm_to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.px_per_mm();
        [(p[0] + self.field_w / 2.0) * sx, (self.field_h / 2.0 - p[1]) * sy]
    }

    /// Rest positions of the markers (mm, sensor frame): hexagonal packing
    /// filling the field with exactly `marker_count` markers.
    pub fn marker_layout(&self) -> Vec<[f64; 2]> {
        let n = self.marker_count;
        if n == 0 {
            return Vec::new();
        }
        let (hw, hh) = (self.field_w / 2.0, self.field_h / 2.0);
        let lattice = |s: f64| -> Vec<[f64; 2]> {
            let margin = s / 2.0;
            let row_h = s * 3f64.sqrt() / 2.0;
            let rows = ((hh - margin).max(0.0) / row_h).floor() as i64;
            let cols = ((hw - margin).max(0.0) / s).ceil() as i64 + 1;
            let mut pts = Vec::new();
            for j in -rows..=rows {
                let y = j as f64 * row_h;
                let shift = if j.rem_euclid(2) == 1 { 0.5 } else { 0.0 };
                for i in -cols..=cols {
                    let x = (i as f64 + shift) * s;
                    if x.abs() <= hw - margin + 1e-12 {
                        pts.push([x, y]);
                    }
                }
            }
            pts
        };
        // Largest spacing that still fits `n` markers.
        let (mut lo, mut hi) = (1e-3 * hw.min(hh), 2.0 * hw.max(hh));
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if lattice(mid).len() >= n {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut pts = lattice(lo);
        let key = |p: &[f64; 2]| (p[0].abs() / hw).max(p[1].abs() / hh);
        pts.sort_by(|a, b| {
            key(a)
                .partial_cmp(&key(b))
                .unwrap()
                .then(a[1].abs().partial_cmp(&b[1].abs()).unwrap())
                .then(a[1].partial_cmp(&b[1]).unwrap())
                .then(a[0].partial_cmp(&b[0]).unwrap())
        });
        pts.truncate(n);
        pts
    }
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self::tactip()
    }
}

/// Labelled pose plus the nuisance slide perturbation of one contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    pub task: Task,
    /// Edge: lateral offset across the edge. Surface: labelled contact depth
    /// (signed distance to the surface, negative when pressed in).
    pub offset: f64,
    /// Edge: contact height relative to nominal (unlabelled). Surface: unused.
    pub depth: f64,
    pub angle: f64,
    pub slide_x: f64,
    pub slide_y: f64,
    pub slide_angle: f64,
}

impl ContactParams {
    pub fn edge(offset: f64, depth: f64, angle: f64) -> Self {
        ContactParams {
            task: Task::Edge,
            offset,
            depth,
            angle,
            slide_x: 0.0,
            slide_y: 0.0,
            slide_angle: 0.0,
        }
    }

    pub fn surface(offset: f64, angle: f64) -> Self {
        ContactParams {
            task: Task::Surface,
            offset,
            depth: 0.0,
            angle,
            slide_x: 0.0,
            slide_y: 0.0,
            slide_angle: 0.0,
        }
    }

    pub fn with_slide(mut self, x: f64, y: f64, angle: f64) -> Self {
        self.slide_x = x;
        self.slide_y = y;
        self.slide_angle = angle;
        self
    }

    /// Checks the physical limits every rendered contact must satisfy.
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("offset", self.offset),
            ("depth", self.depth),
            ("angle", self.angle),
            ("slide_x", self.slide_x),
            ("slide_y", self.slide_y),
            ("slide_angle", self.slide_angle),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(SimError::Range(format!("{name} is not finite")));
            }
        }
        if !(self.angle > -180.0 && self.angle <= 180.0) {
            return Err(SimError::Range(format!("angle {} outside (-180, 180]", self.angle)));
        }
        for (name, v, lim) in [
            ("slide_x", self.slide_x, MAX_SLIDE_MM),
            ("slide_y", self.slide_y, MAX_SLIDE_MM),
            ("slide_angle", self.slide_angle, MAX_SLIDE_DEG),
        ] {
            if v.abs() > lim {
                return Err(SimError::Range(format!("{name} {v} outside [-{lim}, {lim}]")));
            }
        }
        if self.task == Task::Surface && self.slide_y != 0.0 {
            return Err(SimError::Range("surface contacts have no slide_y".into()));
        }
        Ok(())
    }
}

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl TactileImage {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        TactileImage {
            width,
            height,
            pixels: vec![fill.clamp(0.0, 1.0); width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, SimError> {
        if pixels.len() != width * height {
            return Err(SimError::Image(format!(
                "{} pixels for a {width}×{height} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SimError::Image("pixel outside [0, 1]".into()));
        }
        Ok(TactileImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Snaps every pixel to the nearest 8-bit level, `round(p·255)/255`.
    pub fn quantized(&self) -> TactileImage {
        TactileImage {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| crate::pgm::quantize(p) as f32 / 255.0)
                .collect(),
        }
    }
}

/// Penetration at the sensor centre, mm.
pub fn center_depth(spec: &SensorSpec, contact: &ContactParams) -> f64 {
    match contact.task {
        Task::Edge => (spec.edge_nominal_depth + contact.depth).clamp(0.0, spec.max_depth),
        Task::Surface => {
            spec.surface_preload
                + (spec.surface_touch - contact.offset).clamp(-spec.surface_preload, spec.max_depth)
        }
    }
}

// Outward feature normal in the sensor frame for an edge at `angle`.
fn edge_normal(angle: f64) -> [f64; 2] {
    let [c, s] = direction(angle);
    [-s, -c]
}

/// Penetration (mm) of the contact at sensor-frame point `p` (mm).
///
/// Edge: full depth on the object side of the edge line, which lies at
/// distance `offset` from the centre, tapering linearly to zero across a
/// band of width `falloff` centred on the line. Surface: the centre depth
/// with a linear gradient whose iso-lines run at `angle` to the image rows.
pub fn penetration(spec: &SensorSpec, contact: &ContactParams, p: [f64; 2]) -> f64 {
    let depth = center_depth(spec, contact);
    match contact.task {
        Task::Edge => {
            let n = edge_normal(contact.angle);
            let inside = -(n[0] * p[0] + n[1] * p[1]) - contact.offset;
            depth * (0.5 + inside / spec.falloff).clamp(0.0, 1.0)
        }
        Task::Surface => {
            let [c, s] = direction(contact.angle);
            let along = -s * p[0] + c * p[1];
            (depth - spec.surface_slope * along).max(0.0)
        }
    }
}

/// Spatial gradient of [`penetration`] (mm/mm).
pub fn penetration_gradient(spec: &SensorSpec, contact: &ContactParams, p: [f64; 2]) -> [f64; 2] {
    let depth = center_depth(spec, contact);
    match contact.task {
        Task::Edge => {
            let n = edge_normal(contact.angle);
            let inside = -(n[0] * p[0] + n[1] * p[1]) - contact.offset;
            let t = 0.5 + inside / spec.falloff;
            if t > 0.0 && t < 1.0 {
                let k = depth / spec.falloff;
                [-k * n[0], -k * n[1]]
            } else {
                [0.0, 0.0]
            }
        }
        Task::Surface => {
            let [c, s] = direction(contact.angle);
            if penetration(spec, contact, p) > 0.0 {
                [spec.surface_slope * s, -spec.surface_slope * c]
            } else {
                [0.0, 0.0]
            }
        }
    }
}

/// Global tangential shear displacement of the skin, mm.
pub fn shear_displacement(spec: &SensorSpec, contact: &ContactParams) -> [f64; 2] {
    let [c, s] = direction(contact.slide_angle);
    let (x, y) = (contact.slide_x, contact.slide_y);
    [spec.shear_gain * (c * x - s * y), spec.shear_gain * (s * x + c * y)]
}

/// Displacement (mm) of a marker resting at `rest`, excluding jitter.
pub fn marker_displacement(spec: &SensorSpec, contact: &ContactParams, rest: [f64; 2]) -> [f64; 2] {
    let pen = penetration(spec, contact, rest);
    let k = spec.gel_stiffness * pen;
    let push = match contact.task {
        // Away from the edge line, into the indented side.
        Task::Edge => {
            let n = edge_normal(contact.angle);
            [-k * n[0], -k * n[1]]
        }
        // Spreading out from the centre of the pressed patch.
        Task::Surface => {
            let r = 0.5 * spec.field_w.max(spec.field_h);
            [k * rest[0] / r, k * rest[1] / r]
        }
    };
    let shear = shear_displacement(spec, contact);
    [push[0] + shear[0], push[1] + shear[1]]
}

/// Renderer with the marker layout precomputed for one sensor.
#[derive(Debug, Clone)]
pub struct Renderer {
    spec: SensorSpec,
    layout: Vec<[f64; 2]>,
}

impl Renderer {
    pub fn new(spec: &SensorSpec) -> Result<Self, SimError> {
        spec.validate()?;
        let layout = match spec.family {
            SensorFamily::Marker => spec.marker_layout(),
            SensorFamily::Shading => Vec::new(),
        };
        Ok(Renderer {
            spec: spec.clone(),
            layout,
        })
    }

    pub fn spec(&self) -> &SensorSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[[f64; 2]] {
        &self.layout
    }

    /// Displaced marker centres in pixel coordinates, before jitter.
    pub fn marker_pixels(&self, contact: &ContactParams) -> Vec<[f64; 2]> {
        self.layout
            .iter()
            .map(|&rest| {
                let d = marker_displacement(&self.spec, contact, rest);
                self.spec.mm_to_pixel([rest[0] + d[0], rest[1] + d[1]])
            })
            .collect()
    }

    pub fn render(&self, contact: &ContactParams, rng_seed: u64) -> Result<TactileImage, SimError> {
        contact.validate()?;
        Ok(self.render_unchecked(contact, Some(rng_seed)))
    }

    /// Zero contact, zero noise.
    pub fn rest_frame(&self) -> TactileImage {
        let idle = ContactParams {
            task: Task::Surface,
            offset: f64::INFINITY,
            ..ContactParams::surface(0.0, 0.0)
        };
        match self.spec.family {
            SensorFamily::Marker => {
                let centres: Vec<_> = self.layout.iter().map(|&p| self.spec.mm_to_pixel(p)).collect();
                self.draw_markers(&centres)
            }
            SensorFamily::Shading => self.shade(&idle),
        }
    }

    fn render_unchecked(&self, contact: &ContactParams, rng_seed: Option<u64>) -> TactileImage {
        let mut rng = rng_seed.map(ChaCha8Rng::seed_from_u64);
        let mut img = match self.spec.family {
            SensorFamily::Marker => {
                let mut centres = self.marker_pixels(contact);
                if let (Some(rng), true) = (rng.as_mut(), self.spec.marker_jitter > 0.0) {
                    let jitter = Normal::new(0.0, self.spec.marker_jitter).expect("finite jitter");
                    for c in &mut centres {
                        c[0] += jitter.sample(rng);
                        c[1] += jitter.sample(rng);
                    }
                }
                self.draw_markers(&centres)
            }
            SensorFamily::Shading => self.shade(contact),
        };
        if let (Some(rng), true) = (rng.as_mut(), self.spec.noise_sigma > 0.0) {
            let noise = Normal::new(0.0, self.spec.noise_sigma as f32).expect("finite noise");
            for p in &mut img.pixels {
                *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        img
    }

    fn draw_markers(&self, centres: &[[f64; 2]]) -> TactileImage {
        let (w, h) = (self.spec.image_width, self.spec.image_height);
        let mut img = TactileImage::new(w, h, 0.0);
        let r = self.spec.marker_radius;
        for &[cx, cy] in centres {
            let c0 = (cx - r - 1.0).floor().max(0.0) as usize;
            let c1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(w);
            let r0 = (cy - r - 1.0).floor().max(0.0) as usize;
            let r1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(h);
            for row in r0..r1 {
                for col in c0..c1 {
                    let d = (col as f64 + 0.5 - cx).hypot(row as f64 + 0.5 - cy);
                    // One-pixel anti-aliased rim.
                    let cover = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                    let px = &mut img.pixels[row * w + col];
                    if cover > *px {
                        *px = cover;
                    }
                }
            }
        }
        img
    }

    fn shade(&self, contact: &ContactParams) -> TactileImage {
        let spec = &self.spec;
        let (w, h) = (spec.image_width, spec.image_height);
        let light = direction(spec.light_angle);
        let shear = if contact.offset.is_finite() {
            shear_displacement(spec, contact)
        } else {
            [0.0, 0.0]
        };
        let mut img = TactileImage::new(w, h, 0.0);
        for row in 0..h {
            for col in 0..w {
                let mut v = spec.ambient;
                if contact.offset.is_finite() {
                    let p = spec.pixel_to_mm(col, row);
                    let g = penetration_gradient(spec, contact, [p[0] - shear[0], p[1] - shear[1]]);
                    v += spec.shading_gain * (g[0] * light[0] + g[1] * light[1]);
                }
                img.pixels[row * w + col] = v.clamp(0.0, 1.0) as f32;
            }
        }
        img
    }
}

/// Renders one contact. Deterministic in `(spec, contact, rng_seed)`.
pub fn render(spec: &SensorSpec, contact: &ContactParams, rng_seed: u64) -> Result<TactileImage, SimError> {
    Renderer::new(spec)?.render(contact, rng_seed)
}

/// Renders with zero contact and no noise.
pub fn rest_frame(spec: &SensorSpec) -> Result<TactileImage, SimError> {
    Ok(Renderer::new(spec)?.rest_frame())
}
