//! Synthetic DCE-MRI exams.
//!
//! Each exam is a smooth elliptical "breast" support with band-limited
//! texture, a few ellipsoidal enhancing lesions and a smooth phase map shared
//! by the three timepoints. Generation is a pure function of
//! `(spec, patient_index, seed)`; all randomness comes from [`SplitMix64`].

use std::f64::consts::PI;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexVolume, Domain};
use crate::sampling::{fnv1a64, SplitMix64};

/// Relative signal gain of non-lesion tissue at post-contrast 1 and 2.
const TISSUE_GAIN: [f64; 2] = [1.04, 1.08];
/// Fraction of the lesion enhancement already present at post-contrast 1.
const EARLY_UPTAKE: f64 = 0.5;
const SUPPORT_SEMI_AXES: [f64; 3] = [0.45, 0.42, 0.45];
const LESION_ASPECT: (f64, f64) = (0.85, 1.15);
const PLANE_WAVES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive; the count is drawn uniformly from this range.
    pub lesion_count_range: (usize, usize),
    /// Inclusive range of the nominal lesion radius in voxels.
    pub lesion_radius_range: (f64, f64),
    pub enhancement_factor: f64,
    pub background_texture_scale: f64,
    /// Correlation length of the phase map in voxels.
    pub phase_smoothness: f64,
    /// Std. dev. of the complex noise added to every timepoint.
    pub noise_floor: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomSpec {
    /// 40 x 64 x 64 volumes: two depth windows of 24 at stride 16.
    pub fn desk() -> Self {
        Self {
            depth: 40,
            height: 64,
            width: 64,
            lesion_count_range: (1, 3),
            lesion_radius_range: (3.0, 6.0),
            enhancement_factor: 3.0,
            background_texture_scale: 0.15,
            phase_smoothness: 16.0,
            noise_floor: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = (self.depth, self.height, self.width);
        if d < 8 || h < 8 || w < 8 {
            return Err(Error::validation(format!(
                "depth, height and width must be >= 8 (got {d}x{h}x{w})"
            )));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::validation(format!("height and width must be even (got {h}x{w})")));
        }
        let (lo, hi) = self.lesion_count_range;
        if lo < 1 || lo > hi {
            return Err(Error::validation(format!(
                "lesion_count_range must satisfy 1 <= min <= max (got [{lo}, {hi}])"
            )));
        }
        let (rlo, rhi) = self.lesion_radius_range;
        let limit = h.min(w) as f64 / 4.0;
        if !(rlo >= 1.0 && rlo <= rhi && rhi < limit) {
            return Err(Error::validation(format!(
                "lesion radii must satisfy 1 <= min <= max < min(height, width)/4 = {limit} (got [{rlo}, {rhi}])"
            )));
        }
        if !(self.enhancement_factor > 1.0 && self.enhancement_factor.is_finite()) {
            return Err(Error::validation("enhancement_factor must be > 1"));
        }
        if !(0.0..0.5).contains(&self.background_texture_scale) {
            return Err(Error::validation("background_texture_scale must lie in [0, 0.5)"));
        }
        if self.phase_smoothness.is_nan() || self.phase_smoothness <= 0.0 {
            return Err(Error::validation("phase_smoothness must be positive"));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(Error::validation("noise_floor must be non-negative"));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Lesion {
    /// Normalized ellipsoidal radius; `<= 1` inside.
    pub fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.rho(p) <= 1.0
    }

    /// Soft indicator: 1 inside, 0 outside, cosine ramp one voxel wide
    /// centred on the surface (0.5 exactly on it).
    fn soft(&self, p: [f64; 3]) -> f64 {
        let rho = self.rho(p);
        let r_eff = self.semi_axes.iter().product::<f64>().cbrt();
        cosine_step((1.0 - rho) * r_eff)
    }
}

/// One synthetic patient.
#[derive(Clone, Debug, PartialEq)]
pub struct Exam {
    pub patient_index: usize,
    pub pre: ComplexVolume,
    pub post1: ComplexVolume,
    pub post2: ComplexVolume,
    pub lesion_mask: Vec<u8>,
    pub lesions: Vec<Lesion>,
}

impl Exam {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.pre.shape()
    }

    pub fn lesion_voxels(&self) -> usize {
        self.lesion_mask.iter().filter(|&&m| m != 0).count()
    }
}

/// 0 below -0.5, 1 above 0.5, raised cosine in between.
fn cosine_step(e: f64) -> f64 {
    if e <= -0.5 {
        0.0
    } else if e >= 0.5 {
        1.0
    } else {
        0.5 * (1.0 - (PI * (e + 0.5)).cos())
    }
}

/// Sum of random plane waves with spatial frequency in `[f_lo, f_hi]`
/// cycles/voxel; roughly unit RMS.
struct BandLimitedField {
    waves: Vec<([f64; 3], f64)>,
    norm: f64,
}

impl BandLimitedField {
    fn new(rng: &mut SplitMix64, f_lo: f64, f_hi: f64) -> Self {
        let waves = (0..PLANE_WAVES)
            .map(|_| {
                let (a, b) = rng.next_gaussian_pair();
                let (c, _) = rng.next_gaussian_pair();
                let n = (a * a + b * b + c * c).sqrt().max(1e-12);
                let f = rng.next_uniform(f_lo, f_hi) * 2.0 * PI;
                let phase = rng.next_uniform(0.0, 2.0 * PI);
                ([f * a / n, f * b / n, f * c / n], phase)
            })
            .collect();
        Self {
            waves,
            norm: (2.0 / PLANE_WAVES as f64).sqrt(),
        }
    }

    fn eval(&self, p: [f64; 3]) -> f64 {
        self.norm
            * self
                .waves
                .iter()
                .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
                .sum::<f64>()
    }
}

fn place_lesion(rng: &mut SplitMix64, spec: &PhantomSpec, center: [f64; 3], support: [f64; 3]) -> Lesion {
    let (rlo, rhi) = spec.lesion_radius_range;
    let mut radius = rng.next_uniform(rlo, rhi);
    let a = rng.next_uniform(LESION_ASPECT.0, LESION_ASPECT.1);
    let b = rng.next_uniform(LESION_ASPECT.0, LESION_ASPECT.1);
    let dims = [spec.depth, spec.height, spec.width];
    loop {
        let semi = [radius / (a * b), radius * a, radius * b];
        let reach = (0..3).map(|i| semi[i] / support[i]).fold(0.0, f64::max);
        for _ in 0..64 {
            let c: [f64; 3] = std::array::from_fn(|i| {
                let span = support[i] * (1.0 - reach).max(0.0);
                (center[i] + rng.next_uniform(-span, span)).round().clamp(0.0, dims[i] as f64 - 1.0)
            });
            let r_support = (0..3)
                .map(|i| ((c[i] - center[i]) / support[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            if r_support + reach <= 0.95 {
                return Lesion { center: c, semi_axes: semi };
            }
        }
        radius *= 0.9;
        if radius < 1.0 {
            let c = center.map(f64::round);
            return Lesion {
                center: c,
                semi_axes: [1.0; 3],
            };
        }
    }
}

/// Generate one exam. Identical inputs give bit-identical output.
pub fn generate_exam(spec: &PhantomSpec, patient_index: usize, seed: u64) -> Result<Exam> {
    spec.validate()?;
    let (d, h, w) = spec.shape();
    let mut rng = SplitMix64::new(seed);

    let center = [(d / 2) as f64, (h / 2) as f64, (w / 2) as f64];
    let support = [
        SUPPORT_SEMI_AXES[0] * d as f64,
        SUPPORT_SEMI_AXES[1] * h as f64,
        SUPPORT_SEMI_AXES[2] * w as f64,
    ];
    let min_support = support.iter().cloned().fold(f64::INFINITY, f64::min);

    let (clo, chi) = spec.lesion_count_range;
    let count = rng.next_range(clo as u64, chi as u64) as usize;
    let lesions: Vec<Lesion> = (0..count)
        .map(|_| place_lesion(&mut rng, spec, center, support))
        .collect();

    let texture = BandLimitedField::new(&mut rng, 0.1, 0.33);
    let phase_field = BandLimitedField::new(&mut rng, 0.25 / spec.phase_smoothness, 1.0 / spec.phase_smoothness);
    let phase_offset = rng.next_uniform(0.3, 1.2);

    let n = d * h * w;
    let mut magnitude = vec![0f64; n];
    let mut phase = vec![0f64; n];
    let mut uptake = vec![0f64; n];
    let mut mask = vec![0u8; n];
    let gain = spec.enhancement_factor - 1.0;

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                let t: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / support[a]);
                let rho_s = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                let edge = cosine_step((1.0 - rho_s) * min_support);
                phase[i] = phase_offset + phase_field.eval(p);
                if edge <= 0.0 {
                    continue;
                }
                let profile: f64 = t.iter().map(|&ta| 0.75 + 0.25 * (PI * ta.clamp(-1.0, 1.0)).cos()).product();
                let tex = 1.0 + spec.background_texture_scale * texture.eval(p).tanh();
                magnitude[i] = edge * profile * tex;
                let s = lesions.iter().map(|l| l.soft(p)).fold(0.0, f64::max);
                uptake[i] = gain * s;
                if rho_s <= 1.0 && lesions.iter().any(|l| l.contains(p)) {
                    mask[i] = 1;
                }
            }
        }
    }

    let volume = |tissue: f64, lesion_share: f64, rng: &mut SplitMix64| {
        let data: Vec<Complex32> = (0..n)
            .map(|i| {
                let m = magnitude[i] * (tissue + lesion_share * uptake[i]);
                let (a, b) = rng.next_gaussian_pair();
                let v = num_complex::Complex64::from_polar(m, phase[i])
                    + num_complex::Complex64::new(a, b) * spec.noise_floor;
                Complex32::new(v.re as f32, v.im as f32)
            })
            .collect();
        ComplexVolume::from_vec((d, h, w), Domain::Image, data)
    };
    let pre = volume(1.0, 0.0, &mut rng)?;
    let post1 = volume(TISSUE_GAIN[0], EARLY_UPTAKE, &mut rng)?;
    let post2 = volume(TISSUE_GAIN[1], 1.0, &mut rng)?;

    Ok(Exam {
        patient_index,
        pre,
        post1,
        post2,
        lesion_mask: mask,
        lesions,
    })
}

/// Per-exam seed derived from the cohort seed and patient index.
pub fn exam_seed(cohort_seed: u64, patient_index: usize) -> u64 {
    fnv1a64(format!("cohort={cohort_seed}|p={patient_index}").as_bytes())
}

pub fn generate_cohort(spec: &PhantomSpec, n_patients: usize, seed: u64) -> Result<Vec<Exam>> {
    if n_patients < 1 {
        return Err(Error::validation("n_patients must be >= 1"));
    }
    (0..n_patients)
        .map(|p| generate_exam(spec, p, exam_seed(seed, p)))
        .collect()
}
