//! Frequency-domain views of learned features: phase-aligned coherent sums
//! of bridge channels, gradient-weighted sums and radial k-space energy
//! profiles.

use num_complex::{Complex, Complex32, Complex64};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{ComplexVolume, Domain};
use crate::models::{Model, ModelVariant};
use crate::nn::{Graph, Real, Tensor};

fn check_same_shape(channels: &[ComplexVolume]) -> Result<()> {
    let Some(first) = channels.first() else {
        return Err(Error::validation("coherent sum of an empty channel list"));
    };
    if let Some(c) = channels.iter().find(|c| c.shape() != first.shape()) {
        return Err(Error::shape(format!("channel shapes differ: {:?} vs {:?}", first.shape(), c.shape())));
    }
    Ok(())
}

/// Global phase of `c` relative to `reference`: `arg sum c conj(reference)`.
pub fn relative_phase(c: &ComplexVolume, reference: &ComplexVolume) -> f64 {
    let s: Complex64 = c
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| Complex64::new(a.re as f64, a.im as f64) * Complex64::new(b.re as f64, -b.im as f64))
        .sum();
    if s.norm() == 0.0 {
        0.0
    } else {
        s.arg()
    }
}

/// Rotates every channel onto channel 0 by its relative global phase and
/// sums.
pub fn coherent_sum(channels: &[ComplexVolume]) -> Result<ComplexVolume> {
    check_same_shape(channels)?;
    let first = &channels[0];
    let mut acc = vec![Complex64::new(0.0, 0.0); first.len()];
    for c in channels {
        let rot = Complex64::from_polar(1.0, -relative_phase(c, first));
        for (a, v) in acc.iter_mut().zip(c.data()) {
            *a += Complex64::new(v.re as f64, v.im as f64) * rot;
        }
    }
    let data = acc.into_iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect();
    ComplexVolume::from_vec(first.shape(), first.domain(), data)
}

/// Splits a `[re.., im..]` tensor into complex volumes.
pub fn tensor_to_volumes<T: Real>(t: &Tensor<T>, domain: Domain) -> Result<Vec<ComplexVolume>> {
    let c = t.channels();
    if !c.is_multiple_of(2) {
        return Err(Error::shape(format!("expected [re.., im..] channels, got {c}")));
    }
    let [d, h, w] = t.spatial();
    (0..c / 2)
        .map(|i| {
            let data = t
                .channel(i)
                .iter()
                .zip(t.channel(i + c / 2))
                .map(|(re, im)| Complex32::new(re.to_f32().unwrap(), im.to_f32().unwrap()))
                .collect();
            ComplexVolume::from_vec((d, h, w), domain, data)
        })
        .collect()
}

fn require_hybrid<T: Real>(model: &Model<T>) -> Result<()> {
    if model.variant() != ModelVariant::HybridKspaceToImage {
        return Err(Error::Usage(format!(
            "bridge features exist only for the hybrid model, not {}",
            model.variant()
        )));
    }
    Ok(())
}

/// Image-space channels at the hybrid bridge for one patch.
pub fn bridge_channels<T: Real>(model: &Model<T>, patch: &Tensor<T>) -> Result<Vec<ComplexVolume>> {
    require_hybrid(model)?;
    let mut g = Graph::new(&model.params);
    let nodes = model.forward_graph(&mut g, patch.clone())?;
    let bridge = nodes.bridge.expect("hybrid model records its bridge");
    tensor_to_volumes(g.value(bridge), Domain::Image)
}

/// Sum of the lesion-class logits.
pub const LESION_CLASS: usize = 1;

/// Per bridge channel, the mean over voxels of `|d(sum of lesion logits) /
/// d channel|`, with the complex gradient magnitude taken per voxel.
pub fn bridge_gradient_weights<T: Real>(model: &Model<T>, patch: &Tensor<T>) -> Result<Vec<f64>> {
    require_hybrid(model)?;
    let mut g = Graph::new(&model.params);
    let nodes = model.forward_graph(&mut g, patch.clone())?;
    let bridge = nodes.bridge.expect("hybrid model records its bridge");
    let logits = g.value(nodes.logits);
    let mut seed = Tensor::zeros(logits.shape);
    seed.channel_mut(LESION_CLASS).fill(T::one());
    let bw = g.backward(vec![(nodes.logits, seed)]);
    let grad = bw.node(bridge).cloned().unwrap_or_else(|| Tensor::zeros(g.value(bridge).shape));
    let f = grad.channels() / 2;
    let v = grad.voxels() as f64;
    Ok((0..f)
        .map(|i| {
            grad.channel(i)
                .iter()
                .zip(grad.channel(i + f))
                .map(|(re, im)| Complex::new(re.to_f64().unwrap(), im.to_f64().unwrap()).norm())
                .sum::<f64>()
                / v
        })
        .collect())
}

/// Coherent sum of the bridge channels, each scaled by its gradient weight.
pub fn gradient_modulated_sum<T: Real>(model: &Model<T>, patch: &Tensor<T>) -> Result<(ComplexVolume, Vec<f64>)> {
    let weights = bridge_gradient_weights(model, patch)?;
    let channels: Vec<ComplexVolume> = bridge_channels(model, patch)?
        .into_iter()
        .zip(&weights)
        .map(|(c, &w)| c.scale(w as f32))
        .collect();
    Ok((coherent_sum(&channels)?, weights))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub n_bins: usize,
    /// `n_bins + 1` edges in normalized spatial frequency, 0 to sqrt(2)/2.
    pub bin_edges: Vec<f64>,
    /// Mean `|k|^2` per bin (0 for bins without samples).
    pub energy: Vec<f64>,
    /// Samples per bin over the whole volume.
    pub counts: Vec<usize>,
}

impl RadialProfile {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|e| (e[0] + e[1]) / 2.0).collect()
    }

    /// Energies divided by their maximum.
    pub fn peak_normalized(&self) -> Vec<f64> {
        let max = self.energy.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return self.energy.clone();
        }
        self.energy.iter().map(|e| e / max).collect()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy.iter().zip(&self.counts).map(|(e, &c)| e * c as f64).sum()
    }
}

/// Per-bin mean `|k|^2` over equal-width annuli around the centered DC bin.
pub fn radial_energy_profile(k: &ComplexVolume, n_bins: usize) -> Result<RadialProfile> {
    k.expect_domain(Domain::KSpace)?;
    if n_bins < 2 {
        return Err(Error::validation(format!("need at least 2 bins, got {n_bins}")));
    }
    let (d, h, w) = k.shape();
    let r_max = 0.5 * std::f64::consts::SQRT_2;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for y in 0..h {
        let fy = (y as f64 - (h / 2) as f64) / h as f64;
        for x in 0..w {
            let fx = (x as f64 - (w / 2) as f64) / w as f64;
            let r = (fy * fy + fx * fx).sqrt();
            let b = ((r / r_max * n_bins as f64) as usize).min(n_bins - 1);
            for z in 0..d {
                sums[b] += k.get(z, y, x).norm_sqr() as f64;
                counts[b] += 1;
            }
        }
    }
    let energy = sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    Ok(RadialProfile {
        n_bins,
        bin_edges: (0..=n_bins).map(|i| r_max * i as f64 / n_bins as f64).collect(),
        energy,
        counts,
    })
}

/// Long-format CSV `bin_center,energy,normalized_energy,channel`.
pub fn profiles_to_csv(profiles: &[(String, RadialProfile)]) -> Result<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    wr.write_record(["bin_center", "energy", "normalized_energy", "channel"]).map_err(fmt)?;
    for (name, p) in profiles {
        for ((c, e), n) in p.bin_centers().iter().zip(&p.energy).zip(p.peak_normalized()) {
            wr.write_record([c.to_string(), e.to_string(), n.to_string(), name.clone()]).map_err(fmt)?;
        }
    }
    String::from_utf8(wr.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}
