//! The four segmentation networks built on one residual volumetric U-Net.
//!
//! All variants consume a 2-channel `[re, im]` k-space patch of shape
//! `[2, D, H, W]` and produce per-voxel class probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::ComplexVolume;
use crate::nn::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::sampling::SplitMix64;

fn validation(msg: impl Into<String>) -> Error {
    Error::validation(msg)
}

/// Input size used when reporting multiply-accumulate counts.
pub const REFERENCE_INPUT: [usize; 3] = [24, 320, 320];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    HybridKspaceToImage,
    NativeKspace,
    ImageMagnitude,
    ImageComplex,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::HybridKspaceToImage,
        ModelVariant::NativeKspace,
        ModelVariant::ImageMagnitude,
        ModelVariant::ImageComplex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::HybridKspaceToImage => "hybrid_kspace_to_image",
            ModelVariant::NativeKspace => "native_kspace",
            ModelVariant::ImageMagnitude => "image_magnitude",
            ModelVariant::ImageComplex => "image_complex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.short_name() == s)
            .ok_or_else(|| validation(format!("unknown model variant '{s}'")))
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ModelVariant::HybridKspaceToImage => "hybrid",
            ModelVariant::NativeKspace => "native",
            ModelVariant::ImageMagnitude => "magnitude",
            ModelVariant::ImageComplex => "complex",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One residual U-Net. `channels` has `levels + 1` entries, one per
/// resolution including the bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels: Vec<usize>,
    /// Per-level downsampling stride.
    pub stride: [usize; 3],
    /// Kernel of the transposed (upsampling) convolutions.
    pub up_kernel: [usize; 3],
    pub residual_units_per_level: usize,
    pub norm_groups: usize,
    pub negative_slope: f64,
    pub kernel_size: usize,
}

impl BackboneSpec {
    pub fn levels(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(validation("a backbone needs at least one level"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(validation("kernel_size must be odd"));
        }
        if self.up_kernel.iter().any(|k| k % 2 == 0) {
            return Err(validation("upsampling kernel must be odd"));
        }
        if self.residual_units_per_level == 0 {
            return Err(validation("residual_units_per_level must be at least 1"));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return Err(validation(format!(
                "channel width {c} is not a positive multiple of norm_groups {}",
                self.norm_groups
            )));
        }
        Ok(())
    }

    /// Spatial factor the input must be divisible by.
    pub fn divisor(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.stride[a].pow(self.levels() as u32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub image_levels: usize,
    pub kspace_levels: usize,
    pub image_base_channels: usize,
    /// Base width of the hybrid model's image stage.
    pub hybrid_image_base_channels: usize,
    pub kspace_hidden_factor: usize,
    /// Complex channels at the hybrid bridge.
    pub kspace_feature_channels: usize,
    pub num_classes: usize,
    pub residual_units_per_level: usize,
    pub norm_groups: usize,
    pub negative_slope: f64,
    pub kernel_size: usize,
    /// Divisor applied to every channel width (1 = full size).
    pub desk_scale_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::HybridKspaceToImage,
            image_levels: 3,
            kspace_levels: 2,
            image_base_channels: 24,
            hybrid_image_base_channels: 20,
            kspace_hidden_factor: 20,
            kspace_feature_channels: 4,
            num_classes: 2,
            residual_units_per_level: 2,
            norm_groups: 2,
            negative_slope: 0.1,
            kernel_size: 3,
            desk_scale_factor: 1,
        }
    }
}

impl ModelConfig {
    pub fn full(variant: ModelVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    /// Channel widths divided by 4.
    pub fn desk(variant: ModelVariant) -> Self {
        Self {
            variant,
            desk_scale_factor: 4,
            ..Self::default()
        }
    }

    /// Very small network for gradient checks.
    pub fn tiny(variant: ModelVariant) -> Self {
        Self {
            variant,
            image_base_channels: 2,
            hybrid_image_base_channels: 2,
            kspace_hidden_factor: 2,
            kspace_feature_channels: 2,
            residual_units_per_level: 1,
            ..Self::default()
        }
    }

    fn width(&self, w: usize) -> usize {
        let g = self.norm_groups.max(1);
        w.div_ceil(self.desk_scale_factor.max(1)).div_ceil(g) * g
    }

    fn widths(&self, base: usize, levels: usize) -> Vec<usize> {
        (0..=levels).map(|l| self.width(base << l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(validation("num_classes must be at least 2"));
        }
        if self.desk_scale_factor == 0 {
            return Err(validation("desk_scale_factor must be at least 1"));
        }
        if self.norm_groups == 0 {
            return Err(validation("norm_groups must be at least 1"));
        }
        if self.image_levels == 0 || self.kspace_levels == 0 {
            return Err(validation("image_levels and kspace_levels must be at least 1"));
        }
        if self.kspace_feature_channels == 0 {
            return Err(validation("kspace_feature_channels must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.negative_slope) {
            return Err(validation("negative_slope must lie in [0, 1)"));
        }
        for b in self.backbones() {
            b.validate()?;
        }
        Ok(())
    }

    fn image_backbone(&self, in_channels: usize, out_channels: usize, base: usize) -> BackboneSpec {
        BackboneSpec {
            in_channels,
            out_channels,
            channels: self.widths(base, self.image_levels),
            stride: [2, 2, 2],
            up_kernel: [self.kernel_size; 3],
            residual_units_per_level: self.residual_units_per_level,
            norm_groups: self.norm_groups,
            negative_slope: self.negative_slope,
            kernel_size: self.kernel_size,
        }
    }

    /// Backbones of this variant in forward order.
    pub fn backbones(&self) -> Vec<BackboneSpec> {
        let k = self.num_classes;
        match self.variant {
            ModelVariant::HybridKspaceToImage => {
                let f = self.kspace_feature_channels;
                let kstage = BackboneSpec {
                    in_channels: 2,
                    out_channels: 2 * f,
                    channels: self.widths(self.kspace_hidden_factor, self.kspace_levels),
                    stride: [2, 1, 1],
                    up_kernel: [self.kernel_size, 1, 1],
                    residual_units_per_level: self.residual_units_per_level,
                    norm_groups: self.norm_groups,
                    negative_slope: self.negative_slope,
                    kernel_size: self.kernel_size,
                };
                vec![kstage, self.image_backbone(2 * f, k, self.hybrid_image_base_channels)]
            }
            ModelVariant::NativeKspace => vec![self.image_backbone(2, 2 * k, self.image_base_channels)],
            ModelVariant::ImageMagnitude => vec![self.image_backbone(1, k, self.image_base_channels)],
            ModelVariant::ImageComplex => vec![self.image_backbone(2, k, self.image_base_channels)],
        }
    }

    /// Spatial factor every patch dimension must be divisible by.
    pub fn divisor(&self) -> [usize; 3] {
        self.backbones().iter().fold([1; 3], |acc, b| {
            let d = b.divisor();
            std::array::from_fn(|a| lcm(acc[a], d[a]))
        })
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    stride: [usize; 3],
    pad: [usize; 3],
    transposed: bool,
}

#[derive(Clone, Debug)]
struct Unit {
    conv: ConvLayer,
    /// GroupNorm (gamma, beta) followed by leaky ReLU; absent on a final
    /// conv-only unit.
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    units: Vec<Unit>,
    residual: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
enum Block {
    Level {
        down: ResidualUnit,
        sub: Box<Block>,
        up_conv: Unit,
        up_res: ResidualUnit,
    },
    Bottom(ResidualUnit),
}

#[derive(Clone, Debug)]
struct UNet {
    spec: BackboneSpec,
    root: Block,
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: SplitMix64,
}

impl<T: Real> Builder<'_, T> {
    fn uniform(&mut self, n: usize, bound: f64) -> Vec<T> {
        (0..n).map(|_| T::c((2.0 * self.rng.next_f64() - 1.0) * bound)).collect()
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: [usize; 3], stride: [usize; 3], transposed: bool) -> ConvLayer {
        let kvol: usize = kernel.iter().product();
        // PyTorch default: U(+-1/sqrt(fan_in)); fan_in of a transposed conv
        // weight counts its second axis
        let fan_in = if transposed { cout * kvol } else { cin * kvol };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let shape = if transposed {
            vec![cin, cout, kernel[0], kernel[1], kernel[2]]
        } else {
            vec![cout, cin, kernel[0], kernel[1], kernel[2]]
        };
        let w = self.uniform(cin * cout * kvol, bound);
        let w = self.store.add(format!("{name}.weight"), shape, w);
        let b = self.uniform(cout, bound);
        let b = self.store.add(format!("{name}.bias"), vec![cout], b);
        ConvLayer {
            w,
            b,
            stride,
            pad: kernel.map(|k| (k - 1) / 2),
            transposed,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.store.add(format!("{name}.gamma"), vec![c], vec![T::one(); c]);
        let b = self.store.add(format!("{name}.beta"), vec![c], vec![T::zero(); c]);
        (g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn residual_unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        k: usize,
        subunits: usize,
        last_conv_only: bool,
    ) -> ResidualUnit {
        let mut units = Vec::with_capacity(subunits);
        let mut c = cin;
        for i in 0..subunits {
            let s = if i == 0 { stride } else { [1; 3] };
            let conv = self.conv(&format!("{name}.unit{i}.conv"), c, cout, [k; 3], s, false);
            let conv_only = last_conv_only && i + 1 == subunits;
            let norm = (!conv_only).then(|| self.norm(&format!("{name}.unit{i}.norm"), cout));
            units.push(Unit { conv, norm });
            c = cout;
        }
        let residual = if stride != [1; 3] {
            Some(self.conv(&format!("{name}.residual"), cin, cout, [k; 3], stride, false))
        } else if cin != cout {
            Some(self.conv(&format!("{name}.residual"), cin, cout, [1; 3], [1; 3], false))
        } else {
            None
        };
        ResidualUnit { units, residual }
    }

    fn block(&mut self, spec: &BackboneSpec, name: &str, cin: usize, cout: usize, level: usize) -> Block {
        let ch = &spec.channels;
        let c = ch[level];
        let k = spec.kernel_size;
        let nres = spec.residual_units_per_level;
        let is_top = level == 0;
        let down = self.residual_unit(&format!("{name}.down"), cin, c, spec.stride, k, nres, false);
        let (sub, up_in) = if level + 2 < ch.len() {
            (self.block(spec, &format!("{name}.sub"), c, c, level + 1), 2 * c)
        } else {
            let bottom = self.residual_unit(&format!("{name}.bottom"), c, ch[level + 1], [1; 3], k, nres, false);
            (Block::Bottom(bottom), c + ch[level + 1])
        };
        let up = self.conv(&format!("{name}.up"), up_in, cout, spec.up_kernel, spec.stride, true);
        let up_conv = Unit {
            conv: up,
            norm: Some(self.norm(&format!("{name}.up.norm"), cout)),
        };
        let up_res = self.residual_unit(&format!("{name}.up.res"), cout, cout, [1; 3], k, 1, is_top);
        Block::Level {
            down,
            sub: Box::new(sub),
            up_conv,
            up_res,
        }
    }

    fn unet(&mut self, spec: BackboneSpec, name: &str) -> UNet {
        let root = self.block(&spec, name, spec.in_channels, spec.out_channels, 0);
        UNet { spec, root }
    }
}

impl UNet {
    fn conv<T: Real>(g: &mut Graph<T>, layer: &ConvLayer, x: Var) -> Var {
        if layer.transposed {
            g.conv_transpose(x, layer.w, layer.b, layer.stride, layer.pad)
        } else {
            g.conv(x, layer.w, layer.b, layer.stride, layer.pad)
        }
    }

    fn unit<T: Real>(&self, g: &mut Graph<T>, u: &Unit, x: Var) -> Var {
        let y = Self::conv(g, &u.conv, x);
        match u.norm {
            Some((gamma, beta)) => {
                let n = g.group_norm(y, gamma, beta, self.spec.norm_groups);
                g.leaky_relu(n, self.spec.negative_slope)
            }
            None => y,
        }
    }

    fn residual<T: Real>(&self, g: &mut Graph<T>, r: &ResidualUnit, x: Var) -> Var {
        let mut y = x;
        for u in &r.units {
            y = self.unit(g, u, y);
        }
        let skip = match &r.residual {
            Some(c) => Self::conv(g, c, x),
            None => x,
        };
        g.add(y, skip)
    }

    fn block<T: Real>(&self, g: &mut Graph<T>, b: &Block, x: Var) -> Var {
        match b {
            Block::Bottom(r) => self.residual(g, r, x),
            Block::Level {
                down,
                sub,
                up_conv,
                up_res,
            } => {
                let d = self.residual(g, down, x);
                let s = self.block(g, sub, d);
                let cat = g.concat(d, s);
                let u = self.unit(g, up_conv, cat);
                self.residual(g, up_res, u)
            }
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        self.block(g, &self.root, x)
    }

    /// Multiply-accumulates for an input of the given spatial size.
    fn macs<T: Real>(&self, store: &ParamStore<T>, dims: [usize; 3]) -> u64 {
        fn conv_macs<T: Real>(store: &ParamStore<T>, l: &ConvLayer, dims: [usize; 3]) -> ([usize; 3], u64) {
            let weights = store.params[l.w].value.len() as u64;
            if l.transposed {
                let k = &store.params[l.w].shape[2..];
                let out = std::array::from_fn(|a| (dims[a] - 1) * l.stride[a] + k[a] + l.stride[a] - 1 - 2 * l.pad[a]);
                (out, weights * dims.iter().product::<usize>() as u64)
            } else {
                let k = &store.params[l.w].shape[2..];
                let out: [usize; 3] = std::array::from_fn(|a| (dims[a] + 2 * l.pad[a] - k[a]) / l.stride[a] + 1);
                (out, weights * out.iter().product::<usize>() as u64)
            }
        }
        fn residual<T: Real>(store: &ParamStore<T>, r: &ResidualUnit, dims: [usize; 3]) -> ([usize; 3], u64) {
            let mut d = dims;
            let mut total = 0;
            for u in &r.units {
                let (nd, m) = conv_macs(store, &u.conv, d);
                d = nd;
                total += m;
            }
            if let Some(c) = &r.residual {
                total += conv_macs(store, c, dims).1;
            }
            (d, total)
        }
        fn block<T: Real>(store: &ParamStore<T>, b: &Block, dims: [usize; 3]) -> ([usize; 3], u64) {
            match b {
                Block::Bottom(r) => residual(store, r, dims),
                Block::Level {
                    down,
                    sub,
                    up_conv,
                    up_res,
                } => {
                    let (d, m1) = residual(store, down, dims);
                    let (_, m2) = block(store, sub, d);
                    let (u, m3) = conv_macs(store, &up_conv.conv, d);
                    let (u, m4) = residual(store, up_res, u);
                    (u, m1 + m2 + m3 + m4)
                }
            }
        }
        block(store, &self.root, dims).1
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Arch {
    Hybrid { kstage: UNet, image: UNet },
    Native { unet: UNet, gain: ParamId, bias: ParamId },
    Magnitude { unet: UNet },
    Complex { unet: UNet },
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub input: Var,
    pub logits: Var,
    pub probs: Var,
    /// Native model: predicted k-space per class, `[re.., im..]`.
    pub kspace: Option<Var>,
    /// Hybrid model: image-space output of the fixed iFFT bridge, `[re.., im..]`.
    pub bridge: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub parameter_count: usize,
    pub mac_count: u64,
    pub input_dims: [usize; 3],
}

/// Builds a model with PyTorch-style default initialization.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::default();
    let mut b = Builder {
        store: &mut store,
        rng: SplitMix64::new(seed),
    };
    let mut specs = config.backbones().into_iter();
    let mut next = || specs.next().expect("backbone list matches variant");
    let arch = match config.variant {
        ModelVariant::HybridKspaceToImage => {
            let kstage = b.unet(next(), "kspace");
            let image = b.unet(next(), "image");
            Arch::Hybrid { kstage, image }
        }
        ModelVariant::NativeKspace => {
            let unet = b.unet(next(), "unet");
            let k = config.num_classes;
            let gain = b.store.add("calibration.gain", vec![k], vec![T::one(); k]);
            let bias = b.store.add("calibration.bias", vec![k], vec![T::zero(); k]);
            Arch::Native { unet, gain, bias }
        }
        ModelVariant::ImageMagnitude => Arch::Magnitude { unet: b.unet(next(), "unet") },
        ModelVariant::ImageComplex => Arch::Complex { unet: b.unet(next(), "unet") },
    };
    Ok(Model {
        config: config.clone(),
        params: store,
        arch,
    })
}

impl<T: Real> Model<T> {
    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Replaces the parameters, checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                self.params.len()
            )));
        }
        for (a, b) in self.params.params.iter().zip(&params.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    b.name, b.shape, a.name, a.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[0] != 2 {
            return Err(Error::shape(format!("expected a 2-channel [re, im] patch, got {} channels", shape[0])));
        }
        let div = self.config.divisor();
        let dims = [shape[1], shape[2], shape[3]];
        if dims.iter().zip(&div).any(|(d, m)| *d == 0 || d % m != 0) {
            let need: [usize; 3] = std::array::from_fn(|a| dims[a].max(1).div_ceil(div[a]) * div[a]);
            return Err(Error::shape(format!(
                "patch {}x{}x{} is not divisible by {}x{}x{}; pad to {}x{}x{}",
                dims[0], dims[1], dims[2], div[0], div[1], div[2], need[0], need[1], need[2]
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, patch: Tensor<T>) -> Result<ForwardNodes> {
        self.check_input(patch.shape)?;
        let input = g.input(patch);
        let (logits, kspace, bridge) = match &self.arch {
            Arch::Hybrid { kstage, image } => {
                let k = kstage.forward(g, input);
                let img = g.ifft2c(k);
                (image.forward(g, img), None, Some(img))
            }
            Arch::Native { unet, gain, bias } => {
                let k = unet.forward(g, input);
                let img = g.ifft2c(k);
                let mag = g.magnitude(img);
                (g.channel_affine(mag, *gain, *bias), Some(k), None)
            }
            Arch::Magnitude { unet } => {
                let img = g.ifft2c(input);
                let mag = g.magnitude(img);
                (unet.forward(g, mag), None, None)
            }
            Arch::Complex { unet } => {
                let img = g.ifft2c(input);
                (unet.forward(g, img), None, None)
            }
        };
        let probs = g.softmax(logits);
        Ok(ForwardNodes {
            input,
            logits,
            probs,
            kspace,
            bridge,
        })
    }

    /// Hybrid model only: logits of the image stage fed with `bridge`
    /// (`[re.., im..]` image-space channels) in place of the k-stage output.
    pub fn image_stage_graph(&self, g: &mut Graph<T>, bridge: Tensor<T>) -> Result<(Var, Var)> {
        let Arch::Hybrid { image, .. } = &self.arch else {
            return Err(Error::Usage(format!("{} has no k-space to image bridge", self.variant())));
        };
        let expected = 2 * self.config.kspace_feature_channels;
        if bridge.channels() != expected {
            return Err(Error::shape(format!("bridge has {} channels, expected {expected}", bridge.channels())));
        }
        let input = g.input(bridge);
        Ok((input, image.forward(g, input)))
    }

    /// Class probabilities `[num_classes, D, H, W]`.
    pub fn forward(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.params);
        let nodes = self.forward_graph(&mut g, patch.clone())?;
        Ok(g.value(nodes.probs).clone())
    }

    /// Parameter count and analytic multiply-accumulates at `dims`.
    pub fn complexity(&self, dims: [usize; 3]) -> ComplexityReport {
        let mac_count = match &self.arch {
            Arch::Hybrid { kstage, image } => kstage.macs(&self.params, dims) + image.macs(&self.params, dims),
            Arch::Native { unet, .. } | Arch::Magnitude { unet } | Arch::Complex { unet } => unet.macs(&self.params, dims),
        };
        ComplexityReport {
            parameter_count: self.parameter_count(),
            mac_count,
            input_dims: dims,
        }
    }

    /// Per-backbone parameter counts in forward order (the calibration head
    /// of the native model is excluded).
    pub fn backbone_parameter_counts(&self) -> Vec<usize> {
        let count_prefix = |p: &str| {
            self.params
                .params
                .iter()
                .filter(|q| q.name.starts_with(p))
                .map(|q| q.value.len())
                .sum()
        };
        match &self.arch {
            Arch::Hybrid { .. } => vec![count_prefix("kspace."), count_prefix("image.")],
            _ => vec![count_prefix("unet.")],
        }
    }
}

/// Complexity of a freshly built model at the reference input size.
pub fn complexity_report(config: &ModelConfig) -> Result<ComplexityReport> {
    Ok(build_model::<f32>(config, 0)?.complexity(REFERENCE_INPUT))
}

/// Extracts `depth` slices starting at `z0` as a `[2, depth, H, W]` tensor.
pub fn patch_tensor<T: Real>(volume: &ComplexVolume, z0: usize, depth: usize) -> Result<Tensor<T>> {
    let (d, h, w) = volume.shape();
    if z0 + depth > d {
        return Err(Error::shape(format!("window {z0}..{} exceeds depth {d}", z0 + depth)));
    }
    let plane = h * w;
    let n = depth * plane;
    let mut data = vec![T::zero(); 2 * n];
    for (i, z) in volume.data()[z0 * plane..z0 * plane + n].iter().enumerate() {
        data[i] = T::c(z.re as f64);
        data[n + i] = T::c(z.im as f64);
    }
    Ok(Tensor::from_vec([2, depth, h, w], data))
}
