use num_complex::Complex;

use super::conv::ConvGeom;
use super::{matmul, matmul_ld, ParamId, ParamStore, Real, Tensor};
use crate::kspace::centered_fft2;

/// Handle to a node recorded on a [`Graph`].
pub type Var = usize;

const GN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Conv {
        x: Var,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
        cout: usize,
    },
    /// `geom` maps the (large) output back onto the input grid.
    ConvTranspose {
        x: Var,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
        cin: usize,
    },
    GroupNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        /// (mean, 1/std) per group
        stats: Vec<(T, T)>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Add(Var, Var),
    Concat(Var, Var),
    /// Centered inverse 2D FFT per complex channel; channels are laid out
    /// as `[re_0..re_m, im_0..im_m]`.
    Ifft(Var),
    Magnitude(Var),
    ChannelAffine {
        x: Var,
        gain: ParamId,
        bias: ParamId,
    },
    Softmax(Var),
}

/// Define-by-run tape for a single sample.
pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<(Op<T>, Tensor<T>)>,
}

/// Result of a reverse pass: parameter gradients and per-node gradients.
pub struct Backward<T> {
    pub params: Vec<Vec<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T> Backward<T> {
    pub fn node(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v).and_then(|g| g.as_ref())
    }
}

fn complex_planes<T: Real>(t: &Tensor<T>) -> (Vec<Complex<T>>, usize) {
    let c = t.channels();
    assert!(c.is_multiple_of(2), "complex tensors need an even channel count");
    let m = c / 2;
    let v = t.voxels();
    let mut buf = Vec::with_capacity(m * v);
    for ch in 0..m {
        buf.extend(t.channel(ch).iter().zip(t.channel(ch + m)).map(|(&re, &im)| Complex::new(re, im)));
    }
    (buf, m)
}

fn from_complex_planes<T: Real>(buf: &[Complex<T>], m: usize, spatial: [usize; 3]) -> Tensor<T> {
    let v = spatial.iter().product::<usize>();
    let mut out = Tensor::zeros([2 * m, spatial[0], spatial[1], spatial[2]]);
    for ch in 0..m {
        for (i, z) in buf[ch * v..(ch + 1) * v].iter().enumerate() {
            out.data[ch * v + i] = z.re;
            out.data[(ch + m) * v + i] = z.im;
        }
    }
    out
}

/// Centered 2D FFT (or inverse) of every complex channel of a `[re.., im..]`
/// tensor.
pub fn fft_channels<T: Real>(t: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let (mut buf, m) = complex_planes(t);
    let [_, _, h, w] = t.shape;
    centered_fft2(&mut buf, h, w, inverse);
    from_complex_planes(&buf, m, t.spatial())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push((op, value));
        self.nodes.len() - 1
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v].1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t)
    }

    fn kernel_of(shape: &[usize]) -> [usize; 3] {
        [shape[2], shape[3], shape[4]]
    }

    /// Zero-padded strided correlation. Weight shape `[cout, cin, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: ParamId, b: ParamId, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let wshape = &self.params.params[w].shape;
        let (cout, cin) = (wshape[0], wshape[1]);
        let xt = &self.nodes[x].1;
        assert_eq!(xt.channels(), cin, "conv input channels");
        let geom = ConvGeom::new(cin, xt.spatial(), Self::kernel_of(wshape), stride, pad);
        let ovox = geom.out_voxels();
        let [od, oh, ow] = geom.out_dims;
        let mut out = Tensor::zeros([cout, od, oh, ow]);
        let weights = self.params.get(w);
        if geom.is_pointwise() {
            matmul(cout, cin, ovox, weights, false, &xt.data, false, &mut out.data, T::zero());
        } else {
            let rows = geom.col_rows();
            let tile = geom.tile_rows();
            let mut cols = vec![T::zero(); rows * tile * ow];
            for r0 in (0..od * oh).step_by(tile) {
                let r1 = (r0 + tile).min(od * oh);
                let n = (r1 - r0) * ow;
                let cols = &mut cols[..rows * n];
                geom.im2col_rows(&xt.data, cols, r0, r1);
                matmul_ld(cout, rows, n, (weights, rows, false), (cols, n, false), (&mut out.data[r0 * ow..], ovox), T::zero());
            }
        }
        let bias = self.params.get(b);
        for (c, &bv) in bias.iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v += bv);
        }
        self.push(Op::Conv { x, w, b, geom, cout }, out)
    }

    /// Transposed convolution with output padding `stride - 1`. Weight shape
    /// `[cin, cout, kd, kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: ParamId, b: ParamId, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let wshape = &self.params.params[w].shape;
        let (cin, cout) = (wshape[0], wshape[1]);
        let xt = &self.nodes[x].1;
        assert_eq!(xt.channels(), cin, "transposed conv input channels");
        let geom = ConvGeom::transposed(cout, xt.spatial(), Self::kernel_of(wshape), stride, pad);
        let xvox = xt.voxels();
        let rows = geom.col_rows();
        let [d, h, ww] = geom.in_dims;
        let mut out = Tensor::zeros([cout, d, h, ww]);
        let [xd, xh, xw] = geom.out_dims;
        let tile = geom.tile_rows();
        let mut cols = vec![T::zero(); rows * tile * xw];
        let weights = self.params.get(w);
        for r0 in (0..xd * xh).step_by(tile) {
            let r1 = (r0 + tile).min(xd * xh);
            let n = (r1 - r0) * xw;
            let cols = &mut cols[..rows * n];
            matmul_ld(rows, cin, n, (weights, rows, true), (&xt.data[r0 * xw..], xvox, false), (cols, n), T::zero());
            geom.col2im_rows(cols, &mut out.data, r0, r1);
        }
        for (c, &bv) in self.params.get(b).iter().enumerate() {
            out.channel_mut(c).iter_mut().for_each(|v| *v += bv);
        }
        self.push(Op::ConvTranspose { x, w, b, geom, cin }, out)
    }

    pub fn group_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, groups: usize) -> Var {
        let xt = &self.nodes[x].1;
        let c = xt.channels();
        assert!(c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let cpg = c / groups;
        let v = xt.voxels();
        let n = (cpg * v) as f64;
        let (g_val, b_val) = (self.params.get(gamma), self.params.get(beta));
        let mut out = Tensor::zeros(xt.shape);
        let mut stats = Vec::with_capacity(groups);
        for g in 0..groups {
            let span = g * cpg * v..(g + 1) * cpg * v;
            let xs = &xt.data[span.clone()];
            let mean = xs.iter().map(|a| a.to_f64().unwrap()).sum::<f64>() / n;
            let var = xs.iter().map(|a| (a.to_f64().unwrap() - mean).powi(2)).sum::<f64>() / n;
            let (mean, rstd) = (T::c(mean), T::c(1.0 / (var + GN_EPS).sqrt()));
            stats.push((mean, rstd));
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (gm, bt) = (g_val[ch], b_val[ch]);
                for (o, &a) in out.data[ch * v..(ch + 1) * v].iter_mut().zip(&xt.data[ch * v..(ch + 1) * v]) {
                    *o = gm * (a - mean) * rstd + bt;
                }
            }
        }
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            out,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::c(slope);
        let xt = &self.nodes[x].1;
        let out = Tensor::from_vec(
            xt.shape,
            xt.data.iter().map(|&a| if a > T::zero() { a } else { a * slope }).collect(),
        );
        self.push(Op::LeakyRelu { x, slope }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a].1.clone();
        out.add_assign(&self.nodes[b].1);
        self.push(Op::Add(a, b), out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a].1, &self.nodes[b].1);
        assert_eq!(ta.spatial(), tb.spatial(), "concat spatial mismatch");
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let s = ta.shape;
        let out = Tensor::from_vec([ta.channels() + tb.channels(), s[1], s[2], s[3]], data);
        self.push(Op::Concat(a, b), out)
    }

    /// Fixed (parameter-free) centered inverse FFT over each complex channel.
    pub fn ifft2c(&mut self, x: Var) -> Var {
        let out = fft_channels(&self.nodes[x].1, true);
        self.push(Op::Ifft(x), out)
    }

    /// `[re.., im..]` with `2m` channels to `m` magnitude channels.
    pub fn magnitude(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x].1;
        let m = xt.channels() / 2;
        let s = xt.shape;
        let mut out = Tensor::zeros([m, s[1], s[2], s[3]]);
        for ch in 0..m {
            for ((o, &re), &im) in out.channel_mut(ch).iter_mut().zip(xt.channel(ch)).zip(xt.channel(ch + m)) {
                *o = (re * re + im * im).sqrt();
            }
        }
        self.push(Op::Magnitude(x), out)
    }

    /// Per-channel `gain * x + bias`.
    pub fn channel_affine(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let mut out = self.nodes[x].1.clone();
        let (g, b) = (self.params.get(gain), self.params.get(bias));
        for c in 0..out.channels() {
            out.channel_mut(c).iter_mut().for_each(|v| *v = g[c] * *v + b[c]);
        }
        self.push(Op::ChannelAffine { x, gain, bias }, out)
    }

    /// Softmax over channels at every voxel.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xt = &self.nodes[x].1;
        let (c, v) = (xt.channels(), xt.voxels());
        let mut out = Tensor::zeros(xt.shape);
        for i in 0..v {
            let mx = (0..c).map(|k| xt.data[k * v + i]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (xt.data[k * v + i] - mx).exp();
                out.data[k * v + i] = e;
                sum += e;
            }
            for k in 0..c {
                out.data[k * v + i] = out.data[k * v + i] / sum;
            }
        }
        self.push(Op::Softmax(x), out)
    }

    /// Reverse pass from the given output gradients.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Backward<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zeros_like();
        for (v, g) in seeds {
            assert_eq!(g.shape, self.nodes[v].1.shape, "seed gradient shape");
            accumulate(&mut grads[v], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let (op, y) = &self.nodes[idx];
            match op {
                Op::Input => {}
                Op::Conv { x, w, b, geom, cout } => {
                    let xt = &self.nodes[*x].1;
                    let ovox = geom.out_voxels();
                    let rows = geom.col_rows();
                    for c in 0..*cout {
                        let s: T = gy.channel(c).iter().copied().sum();
                        pgrads[*b][c] += s;
                    }
                    let weights = self.params.get(*w);
                    let mut dx = Tensor::zeros(xt.shape);
                    if geom.is_pointwise() {
                        matmul(*cout, ovox, rows, &gy.data, false, &xt.data, true, &mut pgrads[*w], T::one());
                        matmul(rows, *cout, ovox, weights, true, &gy.data, false, &mut dx.data, T::zero());
                    } else {
                        let [od, oh, ow] = geom.out_dims;
                        let tile = geom.tile_rows();
                        let mut cols = vec![T::zero(); rows * tile * ow];
                        for r0 in (0..od * oh).step_by(tile) {
                            let r1 = (r0 + tile).min(od * oh);
                            let n = (r1 - r0) * ow;
                            let cols = &mut cols[..rows * n];
                            geom.im2col_rows(&xt.data, cols, r0, r1);
                            matmul_ld(*cout, n, rows, (&gy.data[r0 * ow..], ovox, false), (cols, n, true), (&mut pgrads[*w], rows), T::one());
                        }
                        let same = geom.stride == [1; 3] && (0..3).all(|a| 2 * geom.pad[a] + 1 == geom.kernel[a]);
                        if same {
                            // correlation of gy with the flipped, transposed kernel
                            let kvol = geom.kernel_volume();
                            let cin = geom.channels;
                            let mut flipped = vec![T::zero(); weights.len()];
                            for co in 0..*cout {
                                for ci in 0..cin {
                                    for kk in 0..kvol {
                                        flipped[(ci * *cout + co) * kvol + kvol - 1 - kk] = weights[(co * cin + ci) * kvol + kk];
                                    }
                                }
                            }
                            let back = ConvGeom::new(*cout, geom.out_dims, geom.kernel, [1; 3], geom.pad);
                            let brows = back.col_rows();
                            let ivox = geom.in_voxels();
                            let tile = back.tile_rows();
                            let mut cols = vec![T::zero(); brows * tile * ow];
                            for r0 in (0..od * oh).step_by(tile) {
                                let r1 = (r0 + tile).min(od * oh);
                                let n = (r1 - r0) * ow;
                                let cols = &mut cols[..brows * n];
                                back.im2col_rows(&gy.data, cols, r0, r1);
                                matmul_ld(cin, brows, n, (&flipped, brows, false), (cols, n, false), (&mut dx.data[r0 * ow..], ivox), T::zero());
                            }
                        } else {
                            let mut dcols = vec![T::zero(); rows * tile * ow];
                            for r0 in (0..od * oh).step_by(tile) {
                                let r1 = (r0 + tile).min(od * oh);
                                let n = (r1 - r0) * ow;
                                let dcols = &mut dcols[..rows * n];
                                matmul_ld(rows, *cout, n, (weights, rows, true), (&gy.data[r0 * ow..], ovox, false), (dcols, n), T::zero());
                                geom.col2im_rows(dcols, &mut dx.data, r0, r1);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::ConvTranspose { x, w, b, geom, cin } => {
                    let xt = &self.nodes[*x].1;
                    let xvox = xt.voxels();
                    let rows = geom.col_rows();
                    for c in 0..gy.channels() {
                        let s: T = gy.channel(c).iter().copied().sum();
                        pgrads[*b][c] += s;
                    }
                    let weights = self.params.get(*w);
                    let mut dx = Tensor::zeros(xt.shape);
                    let [xd, xh, xw] = geom.out_dims;
                    let tile = geom.tile_rows();
                    let mut dcols = vec![T::zero(); rows * tile * xw];
                    for r0 in (0..xd * xh).step_by(tile) {
                        let r1 = (r0 + tile).min(xd * xh);
                        let n = (r1 - r0) * xw;
                        let dcols = &mut dcols[..rows * n];
                        geom.im2col_rows(&gy.data, dcols, r0, r1);
                        matmul_ld(*cin, rows, n, (weights, rows, false), (dcols, n, false), (&mut dx.data[r0 * xw..], xvox), T::zero());
                        matmul_ld(*cin, n, rows, (&xt.data[r0 * xw..], xvox, false), (dcols, n, true), (&mut pgrads[*w], rows), T::one());
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let xt = &self.nodes[*x].1;
                    let c = xt.channels();
                    let v = xt.voxels();
                    let cpg = c / groups;
                    let n = T::c((cpg * v) as f64);
                    let gvals = self.params.get(*gamma);
                    let mut dx = Tensor::zeros(xt.shape);
                    for (g, &(mean, rstd)) in stats.iter().enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for ch in g * cpg..(g + 1) * cpg {
                            let (mut dg, mut db) = (T::zero(), T::zero());
                            for (&gv, &a) in gy.channel(ch).iter().zip(xt.channel(ch)) {
                                let xhat = (a - mean) * rstd;
                                dg += gv * xhat;
                                db += gv;
                                let d = gv * gvals[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                            }
                            pgrads[*gamma][ch] += dg;
                            pgrads[*beta][ch] += db;
                        }
                        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                        for ch in g * cpg..(g + 1) * cpg {
                            let gm = gvals[ch];
                            let src = xt.channel(ch);
                            let gch = gy.channel(ch);
                            for ((o, &a), &gv) in dx.channel_mut(ch).iter_mut().zip(src).zip(gch) {
                                let xhat = (a - mean) * rstd;
                                *o = rstd * (gv * gm - mean_d - xhat * mean_dx);
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let xt = &self.nodes[*x].1;
                    let dx = Tensor::from_vec(
                        xt.shape,
                        gy.data
                            .iter()
                            .zip(&xt.data)
                            .map(|(&g, &a)| if a > T::zero() { g } else { g * *slope })
                            .collect(),
                    );
                    accumulate(&mut grads[*x], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*b], gy.clone());
                    accumulate(&mut grads[*a], gy.clone());
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].1.channels();
                    let split = ca * gy.voxels();
                    let ga = Tensor::from_vec(self.nodes[*a].1.shape, gy.data[..split].to_vec());
                    let gb = Tensor::from_vec(self.nodes[*b].1.shape, gy.data[split..].to_vec());
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Ifft(x) => {
                    // adjoint of the unitary inverse transform is the forward one
                    accumulate(&mut grads[*x], fft_channels(&gy, false));
                }
                Op::Magnitude(x) => {
                    let xt = &self.nodes[*x].1;
                    let m = y.channels();
                    let mut dx = Tensor::zeros(xt.shape);
                    for ch in 0..m {
                        for i in 0..y.voxels() {
                            let mag = y.channel(ch)[i];
                            if mag > T::zero() {
                                let g = gy.channel(ch)[i] / mag;
                                dx.channel_mut(ch)[i] = g * xt.channel(ch)[i];
                                dx.channel_mut(ch + m)[i] = g * xt.channel(ch + m)[i];
                            }
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::ChannelAffine { x, gain, bias } => {
                    let xt = &self.nodes[*x].1;
                    let gvals = self.params.get(*gain);
                    let mut dx = gy.clone();
                    for c in 0..xt.channels() {
                        let (mut dg, mut db) = (T::zero(), T::zero());
                        for (&g, &a) in gy.channel(c).iter().zip(xt.channel(c)) {
                            dg += g * a;
                            db += g;
                        }
                        pgrads[*gain][c] += dg;
                        pgrads[*bias][c] += db;
                        dx.channel_mut(c).iter_mut().for_each(|v| *v *= gvals[c]);
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::Softmax(x) => {
                    let (c, v) = (y.channels(), y.voxels());
                    let mut dx = Tensor::zeros(y.shape);
                    for i in 0..v {
                        let dot = (0..c).fold(T::zero(), |acc, k| acc + y.data[k * v + i] * gy.data[k * v + i]);
                        for k in 0..c {
                            dx.data[k * v + i] = y.data[k * v + i] * (gy.data[k * v + i] - dot);
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
            }
            grads[idx] = Some(gy);
        }
        Backward { params: pgrads, nodes: grads }
    }
}
