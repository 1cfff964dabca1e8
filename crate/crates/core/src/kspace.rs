//! Complex volumes, centered orthonormal 2D FFTs and input preparation.
//!
//! Transforms run slice by slice in the (height, width) plane; the depth axis
//! is never transformed. The DC bin sits at index `n / 2` (floor) on both
//! in-plane axes.

use num_complex::{Complex, Complex32};
use num_traits::Float;
use rustfft::{FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Exam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Image,
    KSpace,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Image => "image",
            Domain::KSpace => "kspace",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(Domain::Image),
            "kspace" => Some(Domain::KSpace),
            _ => None,
        }
    }
}

/// Post-contrast timepoint paired with the pre-contrast volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Timepoint {
    Post1,
    Post2,
}

/// Depth x height x width grid of complex samples tagged with its domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    shape: (usize, usize, usize),
    data: Vec<Complex32>,
    domain: Domain,
}

impl ComplexVolume {
    pub fn zeros(shape: (usize, usize, usize), domain: Domain) -> Self {
        Self {
            shape,
            data: vec![Complex32::new(0.0, 0.0); shape.0 * shape.1 * shape.2],
            domain,
        }
    }

    pub fn from_vec(shape: (usize, usize, usize), domain: Domain, data: Vec<Complex32>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::shape(format!(
                "{} samples do not fill a {shape:?} volume",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::validation("volume contains non-finite samples"));
        }
        Ok(Self { shape, data, domain })
    }

    pub fn from_fn(
        shape: (usize, usize, usize),
        domain: Domain,
        mut f: impl FnMut(usize, usize, usize) -> Complex32,
    ) -> Self {
        let (d, h, w) = shape;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data, domain }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape.1 + y) * self.shape.2 + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> Complex32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: Complex32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::Domain {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }

    /// Sum of `|v|^2`, accumulated in double precision.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr() as f64).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.energy() / self.data.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.mean_power().sqrt()
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f32::max)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(Complex32) -> Complex32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            domain: self.domain,
        }
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        other.expect_domain(self.domain)?;
        if self.shape != other.shape {
            return Err(Error::validation(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            domain: self.domain,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            domain: self.domain,
        })
    }

    /// Slices `z0..z0 + depth`.
    pub fn depth_window(&self, z0: usize, depth: usize) -> Result<Self> {
        let (d, h, w) = self.shape;
        if z0 + depth > d {
            return Err(Error::shape(format!("window {z0}..{} exceeds depth {d}", z0 + depth)));
        }
        let plane = h * w;
        Ok(Self {
            shape: (depth, h, w),
            data: self.data[z0 * plane..(z0 + depth) * plane].to_vec(),
            domain: self.domain,
        })
    }

    pub fn fft2c(&self) -> Result<Self> {
        self.expect_domain(Domain::Image)?;
        let mut out = self.clone();
        centered_fft2(&mut out.data, self.shape.1, self.shape.2, false);
        out.domain = Domain::KSpace;
        Ok(out)
    }

    pub fn ifft2c(&self) -> Result<Self> {
        self.expect_domain(Domain::KSpace)?;
        let mut out = self.clone();
        centered_fft2(&mut out.data, self.shape.1, self.shape.2, true);
        out.domain = Domain::Image;
        Ok(out)
    }
}

/// In-place centered orthonormal 2D FFT of every `h x w` plane in `data`.
///
/// Forward computes `fftshift(fft2(ifftshift(x))) / sqrt(hw)`; `inverse`
/// computes the adjoint, which is also the inverse.
pub fn centered_fft2<T: FftNum + Float>(data: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let plane = h * w;
    if plane == 0 {
        return;
    }
    assert_eq!(data.len() % plane, 0, "buffer is not a whole number of planes");
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
    let mut tbuf = vec![Complex::new(T::zero(), T::zero()); plane];
    let (sh, sw) = (h / 2, w / 2);
    let norm = T::from(1.0 / (plane as f64).sqrt()).unwrap();

    for slice in data.chunks_exact_mut(plane) {
        // ifftshift: buf[i] = x[(i + n/2) % n] on both axes
        for y in 0..h {
            let sy = (y + sh) % h;
            for x in 0..w {
                buf[y * w + x] = slice[sy * w + (x + sw) % w];
            }
        }
        row_fft.process_with_scratch(&mut buf, &mut scratch);
        for y in 0..h {
            for x in 0..w {
                tbuf[x * h + y] = buf[y * w + x];
            }
        }
        col_fft.process_with_scratch(&mut tbuf, &mut scratch);
        // fftshift back: out[i] = y[(i + n - n/2) % n]
        for y in 0..h {
            let sy = (y + h - sh) % h;
            for x in 0..w {
                let sx = (x + w - sw) % w;
                slice[y * w + x] = tbuf[sx * h + sy] * norm;
            }
        }
    }
}

/// Divide every timepoint by the RMS magnitude of the first (pre-contrast)
/// volume. Returns the normalized volumes and the scale.
pub fn rms_normalize(volumes: &[ComplexVolume]) -> Result<(Vec<ComplexVolume>, f64)> {
    let pre = volumes
        .first()
        .ok_or_else(|| Error::validation("no timepoints to normalize"))?;
    let scale = pre.rms();
    if scale <= 0.0 || !scale.is_finite() {
        return Err(Error::Degenerate("pre-contrast k-space has zero energy".into()));
    }
    let inv = (1.0 / scale) as f32;
    Ok((volumes.iter().map(|v| v.scale(inv)).collect(), scale))
}

/// `post - pre` in the requested representation. The k-space path transforms
/// each timepoint before subtracting.
pub fn temporal_subtract(exam: &Exam, representation: Domain, timepoint: Timepoint) -> Result<ComplexVolume> {
    let post = match timepoint {
        Timepoint::Post1 => &exam.post1,
        Timepoint::Post2 => &exam.post2,
    };
    match representation {
        Domain::Image => post.sub(&exam.pre),
        Domain::KSpace => post.fft2c()?.sub(&exam.pre.fft2c()?),
    }
}

/// Network-ready exam: RMS-normalized k-space subtraction plus ground truth.
#[derive(Clone, Debug)]
pub struct PreparedExam {
    pub patient_index: usize,
    pub kspace: ComplexVolume,
    pub lesion_mask: Vec<u8>,
}

impl PreparedExam {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.kspace.shape()
    }

    pub fn is_lesion_positive(&self) -> bool {
        self.lesion_mask.iter().any(|&m| m != 0)
    }
}

/// Transform each timepoint, normalize by the pre-contrast k-space RMS and
/// subtract pre from the chosen post-contrast timepoint in k-space.
pub fn prepare_exam(exam: &Exam, timepoint: Timepoint) -> Result<PreparedExam> {
    let ks = [exam.pre.fft2c()?, exam.post1.fft2c()?, exam.post2.fft2c()?];
    let (norm, _) = rms_normalize(&ks)?;
    let post = match timepoint {
        Timepoint::Post1 => &norm[1],
        Timepoint::Post2 => &norm[2],
    };
    Ok(PreparedExam {
        patient_index: exam.patient_index,
        kspace: post.sub(&norm[0])?,
        lesion_mask: exam.lesion_mask.clone(),
    })
}

/// Default raised-cosine taper width in voxels.
pub const DEFAULT_TAPER: usize = 8;

/// Center-crop or zero-pad each in-plane axis to the target size. On padded
/// edges the outermost `taper_width` voxels of the original content are
/// ramped by a raised cosine.
pub fn pad_crop_taper(v: &ComplexVolume, target_h: usize, target_w: usize, taper_width: usize) -> Result<ComplexVolume> {
    v.expect_domain(Domain::Image)?;
    if target_h < 2 * taper_width || target_w < 2 * taper_width {
        return Err(Error::validation(format!(
            "target {target_h}x{target_w} is smaller than twice the taper width {taper_width}"
        )));
    }
    let (d, h, w) = v.shape();
    let ax_h = AxisPlan::new(h, target_h, taper_width)?;
    let ax_w = AxisPlan::new(w, target_w, taper_width)?;
    let mut out = ComplexVolume::zeros((d, target_h, target_w), Domain::Image);
    for z in 0..d {
        for ty in 0..target_h {
            let Some((sy, wy)) = ax_h.source(ty) else { continue };
            for tx in 0..target_w {
                let Some((sx, wx)) = ax_w.source(tx) else { continue };
                let s = v.get(z, sy, sx);
                let weight = wy * wx;
                out.set(z, ty, tx, if weight == 1.0 { s } else { s * weight });
            }
        }
    }
    Ok(out)
}

/// Index bookkeeping for one axis of [`pad_crop_taper`].
struct AxisPlan {
    n: usize,
    target: usize,
    taper: usize,
}

impl AxisPlan {
    fn new(n: usize, target: usize, taper: usize) -> Result<Self> {
        if target > n {
            let before = (target - n) / 2;
            let after = target - n - before;
            if taper > before.min(after) {
                return Err(Error::validation(format!(
                    "taper width {taper} exceeds pad amount {} on an edge",
                    before.min(after)
                )));
            }
            if taper > n / 2 {
                return Err(Error::validation("taper width exceeds half the padded content"));
            }
        }
        Ok(Self { n, target, taper })
    }

    /// Source index and taper weight for target index `t`, or `None` inside
    /// the zero padding.
    fn source(&self, t: usize) -> Option<(usize, f32)> {
        if self.target <= self.n {
            let off = (self.n - self.target) / 2;
            return Some((t + off, 1.0));
        }
        let off = (self.target - self.n) / 2;
        if t < off || t >= off + self.n {
            return None;
        }
        let s = t - off;
        let edge = s.min(self.n - 1 - s);
        let weight = if edge < self.taper {
            let phase = std::f32::consts::PI * (edge as f32 + 0.5) / self.taper as f32;
            0.5 * (1.0 - phase.cos())
        } else {
            1.0
        };
        Some((s, weight))
    }
}
