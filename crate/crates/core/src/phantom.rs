//! Synthetic tubular phantoms with exact ground truth.
//!
//! Each tube is a line across the image with a sinusoidal sideways
//! perturbation, sampled every half pixel and clamped inside the image. A
//! pixel is foreground when its centre lies within the tube radius of the
//! polyline, so each tube rasterizes to one 8-connected component.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::metrics::{BinaryMask, SegMask};
use crate::tensor::Tensor;

/// RNG stream offset of evaluation samples.
pub const EVAL_STREAM_OFFSET: u64 = 1_000_000;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub tubes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Sideways amplitude as a fraction of the image size.
    pub curvature: f64,
    pub bifurcation_prob: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Thin, strongly curved vessels.
    pub fn curved() -> Self {
        PhantomSpec {
            size: 32,
            tubes: 2,
            radius_min: 1.0,
            radius_max: 2.0,
            curvature: 0.15,
            bifurcation_prob: 0.5,
            contrast: 1.0,
            noise_sigma: 0.25,
            seed: 0,
        }
    }

    /// Same as [`PhantomSpec::curved`] with straight tubes.
    pub fn straight() -> Self {
        PhantomSpec { curvature: 0.0, ..Self::curved() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "curved" => Ok(Self::curved()),
            "straight" => Ok(Self::straight()),
            other => Err(Error::Config(format!("unknown phantom preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.size < 32 {
            return bad(format!("phantom size {} below 32", self.size));
        }
        if self.tubes == 0 {
            return bad("phantom needs at least one tube".into());
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return bad(format!("invalid radius range {}..{}", self.radius_min, self.radius_max));
        }
        if !(0.0..=1.0).contains(&self.bifurcation_prob) {
            return bad("bifurcation_prob must lie in [0, 1]".into());
        }
        if !(self.curvature >= 0.0 && self.noise_sigma >= 0.0 && self.contrast.is_finite()) {
            return bad("curvature and noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// A polyline centreline with a constant radius.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    /// `(row, col)` points.
    pub points: Vec<(f64, f64)>,
    pub radius: f64,
}

impl Tube {
    pub fn straight(start: (f64, f64), end: (f64, f64), radius: f64) -> Self {
        Tube { points: vec![start, end], radius }
    }
}

fn seg_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qr, qc) = (a.0 + t * dr - p.0, a.1 + t * dc - p.1);
    qr * qr + qc * qc
}

/// Marks every pixel whose centre lies within a tube's radius of its centreline.
pub fn rasterize(h: usize, w: usize, tubes: &[Tube]) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w);
    for t in tubes {
        let r2 = t.radius * t.radius;
        let pts = &t.points;
        let segs: Vec<_> =
            if pts.len() == 1 { vec![(pts[0], pts[0])] } else { pts.windows(2).map(|s| (s[0], s[1])).collect() };
        // bounding box
        let (mut r0, mut r1, mut c0, mut c1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in pts {
            r0 = r0.min(p.0);
            r1 = r1.max(p.0);
            c0 = c0.min(p.1);
            c1 = c1.max(p.1);
        }
        let lo = |v: f64| (v - t.radius).floor().max(0.0) as usize;
        let (rlo, rhi) = (lo(r0), ((r1 + t.radius).ceil() as usize).min(h.saturating_sub(1)));
        let (clo, chi) = (lo(c0), ((c1 + t.radius).ceil() as usize).min(w.saturating_sub(1)));
        for r in rlo..=rhi {
            for c in clo..=chi {
                if m.get(r, c) {
                    continue;
                }
                let p = (r as f64, c as f64);
                if segs.iter().any(|&(a, b)| seg_dist2(p, a, b) <= r2) {
                    m.set(r, c, true);
                }
            }
        }
    }
    m
}

fn perturbed_line(
    origin: (f64, f64),
    angle: f64,
    t_range: (f64, f64),
    amplitude: f64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let hi = (size - 1) as f64;
    let (dr, dc) = (angle.sin(), angle.cos());
    let (nr, nc) = (dc, -dr);
    let cycles = rng.gen_range(1.0..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let omega = std::f64::consts::TAU * cycles / size as f64;
    let mut pts = Vec::new();
    let mut t = t_range.0;
    while t <= t_range.1 {
        let off = amplitude * (omega * t + phase).sin();
        let p = (origin.0 + t * dr + off * nr, origin.1 + t * dc + off * nc);
        let q = (p.0.clamp(0.0, hi), p.1.clamp(0.0, hi));
        if pts.last() != Some(&q) {
            pts.push(q);
        }
        t += 0.5;
    }
    pts
}

/// Centrelines for one phantom: main tubes crossing the image plus optional
/// branches. Each branch is returned as its own tube, starting on its parent.
pub fn tube_paths(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Tube> {
    let n = spec.size as f64;
    let amplitude = spec.curvature * n;
    let mut tubes = Vec::new();
    for _ in 0..spec.tubes {
        let centre = (rng.gen_range(0.25 * n..0.75 * n), rng.gen_range(0.25 * n..0.75 * n));
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let radius = rng.gen_range(spec.radius_min..=spec.radius_max);
        let main = perturbed_line(centre, angle, (-0.75 * n, 0.75 * n), amplitude, spec.size, rng);
        let branch = rng.gen_bool(spec.bifurcation_prob);
        if branch && main.len() > 3 {
            let k = rng.gen_range(main.len() / 3..2 * main.len() / 3);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let b_angle = angle + sign * rng.gen_range(0.5..1.0);
            let b_radius = (radius * 0.75).max(spec.radius_min);
            let pts = perturbed_line(main[k], b_angle, (0.0, 0.5 * n), 0.5 * amplitude, spec.size, rng);
            tubes.push(Tube { points: main, radius });
            tubes.push(Tube { points: pts, radius: b_radius });
        } else {
            tubes.push(Tube { points: main, radius });
        }
    }
    tubes
}

fn render(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<(Tensor, SegMask)> {
    spec.validate()?;
    let tubes = tube_paths(spec, rng);
    let mask = rasterize(spec.size, spec.size, &tubes);
    let labels: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    let image = Tensor::from_fn(&[1, spec.size, spec.size], |i| {
        let fg = if labels[i] == 1 { spec.contrast } else { 0.0 };
        let noise = if spec.noise_sigma > 0.0 { spec.noise_sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        fg + noise
    });
    Ok((image, SegMask::new(spec.size, spec.size, labels, 2)?))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One phantom image `[1, N, N]` and its binary mask.
pub fn generate(spec: &PhantomSpec) -> Result<(Tensor, SegMask)> {
    render(spec, &mut stream_rng(spec.seed, 0))
}

/// The `index`-th training (or evaluation) sample of a dataset.
pub fn generate_sample(spec: &PhantomSpec, index: usize, eval: bool) -> Result<(Tensor, SegMask)> {
    let stream = index as u64 + if eval { EVAL_STREAM_OFFSET } else { 0 };
    render(spec, &mut stream_rng(spec.seed, stream))
}

/// Writes `train/` and `eval/` directories of `img_XXXX.mtk` / `mask_XXXX.mtk`
/// pairs, each with a manifest listing one `image mask` pair per line.
pub fn make_dataset(spec: &PhantomSpec, n_train: usize, n_eval: usize, out: &Path) -> Result<()> {
    spec.validate()?;
    for (split, count, eval) in [("train", n_train, false), ("eval", n_eval, true)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir)?;
        let mut manifest = String::new();
        for i in 0..count {
            let (img, mask) = generate_sample(spec, i, eval)?;
            let (iname, mname) = (format!("img_{i:04}.mtk"), format!("mask_{i:04}.mtk"));
            save_tensor(dir.join(&iname), &img)?;
            save_tensor(dir.join(&mname), &mask.to_tensor())?;
            writeln!(manifest, "{iname} {mname}").expect("writing to a String");
        }
        fs::write(dir.join(MANIFEST), manifest)?;
    }
    Ok(())
}

/// Reads the pairs listed in `<dir>/manifest.txt`.
pub fn load_split(dir: &Path, num_classes: usize) -> Result<Vec<(Tensor, SegMask)>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.join(MANIFEST).display()))))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(img), Some(mask), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("manifest line {}: expected 'image mask'", n + 1)));
        };
        let img = load_tensor(dir.join(img))?;
        let mask = SegMask::from_tensor(&load_tensor(dir.join(mask))?, num_classes)?;
        out.push((img, mask));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::count_components;

    #[test]
    fn noiseless_image_equals_mask() {
        let spec = PhantomSpec { noise_sigma: 0.0, contrast: 1.0, seed: 4, ..PhantomSpec::curved() };
        let (img, mask) = generate(&spec).unwrap();
        assert_eq!(img, mask.to_tensor());
    }

    #[test]
    fn same_seed_same_output() {
        let spec = PhantomSpec { seed: 11, ..PhantomSpec::curved() };
        let (a, ma) = generate(&spec).unwrap();
        let (b, mb) = generate(&spec).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ma, mb);
        let (c, _) = generate(&PhantomSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn straight_tube_area() {
        let t = Tube::straight((16.0, 6.0), (16.0, 26.0), 2.0);
        let n = rasterize(32, 32, &[t]).count();
        assert!((80..=120).contains(&n), "{n} pixels");
    }

    #[test]
    fn each_tube_is_connected() {
        for seed in 0..50 {
            let spec = PhantomSpec { seed, ..PhantomSpec::curved() };
            let mut rng = stream_rng(seed, 0);
            for t in tube_paths(&spec, &mut rng) {
                let m = rasterize(spec.size, spec.size, &[t]);
                assert_eq!(count_components(&m), 1, "seed {seed}");
            }
        }
    }

    #[test]
    fn zero_curvature_gives_straight_centrelines() {
        let spec = PhantomSpec { seed: 3, bifurcation_prob: 0.0, ..PhantomSpec::straight() };
        let mut rng = stream_rng(3, 0);
        let on_border = |p: &(f64, f64)| p.0 == 0.0 || p.1 == 0.0 || p.0 == 31.0 || p.1 == 31.0;
        for t in tube_paths(&spec, &mut rng) {
            // clamped points sit on the border; the rest are collinear
            let inner: Vec<_> = t.points.iter().filter(|p| !on_border(p)).collect();
            let (a, b) = (inner[0], inner[inner.len() - 1]);
            for p in inner {
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                assert!(cross.abs() < 1e-9, "{cross}");
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&PhantomSpec { size: 16, ..PhantomSpec::curved() }).is_err());
        assert!(generate(&PhantomSpec { radius_min: 0.5, ..PhantomSpec::curved() }).is_err());
        assert!(PhantomSpec::preset("wiggly").is_err());
    }
}
