//! Independent writers for the on-disk formats, shared by test targets.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use tacservo::data::{CollectionPlan, FORMAT, LABEL_HEADER, VERSION};
use tacservo::posenet::Architecture;
use tacservo::{SensorSpec, Task};

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// TOML float: shortest round-trip digits, always with a fraction or exponent.
pub fn toml_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn toml_range(lo: f64, hi: f64) -> String {
    format!("[{}, {}]", toml_f64(lo), toml_f64(hi))
}

pub fn toml_list(v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(|i| i.to_string()).collect();
    format!("[{}]", items.join(", "))
}

pub struct RefSample {
    pub pixels: Vec<u8>,
    /// offset, angle, depth, slide_x, slide_y, slide_angle
    pub contact: [f64; 6],
}

/// Writes a dataset directory by hand: manifest, labels CSV and P5 images,
/// with the whole-set checksum computed here. Returns the checksum.
pub fn write_reference_dataset(dir: &Path, w: usize, h: usize, samples: &[RefSample], train: &[usize], test: &[usize]) -> String {
    let plan = CollectionPlan::defaults(Task::Edge).with_samples(samples.len()).with_seed(77);
    let s = SensorSpec {
        image_width: w,
        image_height: h,
        ..SensorSpec::tactip()
    };
    let manifest = |checksum: &str| {
        let mut m = String::new();
        let _ = writeln!(m, "format = \"{FORMAT}\"");
        let _ = writeln!(m, "version = {VERSION}");
        let _ = writeln!(m, "n_samples = {}", samples.len());
        let _ = writeln!(m, "image_width = {w}");
        let _ = writeln!(m, "image_height = {h}");
        let _ = writeln!(m, "checksum = \"{checksum}\"");
        let _ = writeln!(m, "train = {}", toml_list(train));
        let _ = writeln!(m, "test = {}", toml_list(test));
        let _ = writeln!(m, "\n[plan]");
        let _ = writeln!(m, "task = \"edge\"");
        for (k, r) in [
            ("offset", plan.offset),
            ("depth", plan.depth),
            ("angle", plan.angle),
            ("slide_x", plan.slide_x),
            ("slide_y", plan.slide_y),
            ("slide_angle", plan.slide_angle),
        ] {
            let _ = writeln!(m, "{k} = {}", toml_range(r.0, r.1));
        }
        let _ = writeln!(m, "n_samples = {}", samples.len());
        let _ = writeln!(m, "seed = 77");
        let _ = writeln!(m, "\n[sensor]");
        let _ = writeln!(m, "family = \"marker\"");
        let _ = writeln!(m, "image_width = {w}");
        let _ = writeln!(m, "image_height = {h}");
        for (k, v) in [
            ("field_w", s.field_w),
            ("field_h", s.field_h),
        ] {
            let _ = writeln!(m, "{k} = {}", toml_f64(v));
        }
        let _ = writeln!(m, "marker_count = {}", s.marker_count);
        for (k, v) in [
            ("marker_radius", s.marker_radius),
            ("gel_stiffness", s.gel_stiffness),
            ("max_depth", s.max_depth),
            ("shear_gain", s.shear_gain),
            ("noise_sigma", s.noise_sigma),
            ("marker_jitter", s.marker_jitter),
            ("falloff", s.falloff),
            ("edge_nominal_depth", s.edge_nominal_depth),
            ("surface_touch", s.surface_touch),
            ("surface_preload", s.surface_preload),
            ("surface_slope", s.surface_slope),
            ("ambient", s.ambient),
            ("shading_gain", s.shading_gain),
            ("light_angle", s.light_angle),
        ] {
            let _ = writeln!(m, "{k} = {}", toml_f64(v));
        }
        m
    };

    let mut labels = format!("{LABEL_HEADER}\n");
    for (i, r) in samples.iter().enumerate() {
        let f: Vec<String> = r.contact.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(labels, "{i},{}", f.join(","));
    }
    let images: Vec<Vec<u8>> = samples
        .iter()
        .map(|r| {
            let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
            b.extend(&r.pixels);
            b
        })
        .collect();

    let mut sha = Sha256::new();
    sha.update(manifest("").as_bytes());
    sha.update(labels.as_bytes());
    for img in &images {
        sha.update(img);
    }
    let checksum = hex(&sha.finalize());

    fs::create_dir_all(dir.join("images")).unwrap();
    fs::write(dir.join("manifest.toml"), manifest(&checksum)).unwrap();
    fs::write(dir.join("labels.csv"), labels).unwrap();
    for (i, img) in images.iter().enumerate() {
        fs::write(dir.join("images").join(format!("{i:06}.pgm")), img).unwrap();
    }
    checksum
}

pub fn reference_samples(n: usize, w: usize, h: usize) -> Vec<RefSample> {
    (0..n)
        .map(|i| RefSample {
            pixels: (0..w * h).map(|p| ((p * 37 + i * 101) % 256) as u8).collect(),
            contact: [
                -4.5 + 1.25 * i as f64,
                -44.0 + 0.1 * (i * i) as f64,
                0.3 - 0.2 * i as f64,
                1.0 / 3.0 * i as f64,
                -2.0,
                0.0,
            ],
        })
        .collect()
}

/// Checkpoint bytes built by hand: magic, u32 header fields, f64 normalizer
/// pairs, u64 parameter count, f32 parameters, SHA-256 trailer. `le` picks
/// the byte order of every number.
pub fn reference_checkpoint(arch: &Architecture, norms: &[(f64, f64)], params: &[f32], le: bool) -> Vec<u8> {
    let mut b = b"TACSPNET".to_vec();
    let u32b = |b: &mut Vec<u8>, v: u32| b.extend(if le { v.to_le_bytes() } else { v.to_be_bytes() });
    u32b(&mut b, 1);
    u32b(&mut b, arch.input_height as u32);
    u32b(&mut b, arch.input_width as u32);
    u32b(&mut b, arch.conv.len() as u32);
    for c in &arch.conv {
        u32b(&mut b, c.filters as u32);
        u32b(&mut b, c.kernel as u32);
        u32b(&mut b, c.stride as u32);
    }
    u32b(&mut b, arch.hidden.len() as u32);
    for &n in &arch.hidden {
        u32b(&mut b, n as u32);
    }
    u32b(&mut b, arch.outputs as u32);
    u32b(&mut b, arch.binarize as u32);
    for &(mid, half) in norms {
        for v in [mid, half] {
            b.extend(if le { v.to_le_bytes() } else { v.to_be_bytes() });
        }
    }
    let n = params.len() as u64;
    b.extend(if le { n.to_le_bytes() } else { n.to_be_bytes() });
    for p in params {
        b.extend(if le { p.to_le_bytes() } else { p.to_be_bytes() });
    }
    let digest = Sha256::digest(&b);
    b.extend(digest);
    b
}

/// Every file of a saved dataset directory, in a fixed order.
pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for name in ["manifest.toml", "labels.csv"] {
        out.push((name.to_string(), fs::read(dir.join(name)).unwrap()));
    }
    let mut imgs: Vec<_> = fs::read_dir(dir.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    imgs.sort();
    for p in imgs {
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    out
}
