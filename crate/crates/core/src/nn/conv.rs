use super::Real;

/// Geometry of a strided, zero-padded 3D correlation from `in_dims` to
/// `out_dims`. Transposed convolutions reuse it with the roles swapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(channels: usize, in_dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let out_dims = std::array::from_fn(|a| (in_dims[a] + 2 * pad[a] - kernel[a]) / stride[a] + 1);
        Self {
            channels,
            in_dims,
            kernel,
            stride,
            pad,
            out_dims,
        }
    }

    /// Geometry whose input is the output of a transposed convolution
    /// applied to `in_dims` (output padding `stride - 1`).
    pub fn transposed(channels: usize, in_dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let big: [usize; 3] = std::array::from_fn(|a| (in_dims[a] - 1) * stride[a] + kernel[a] + (stride[a] - 1) - 2 * pad[a]);
        let g = Self::new(channels, big, kernel, stride, pad);
        debug_assert_eq!(g.out_dims, in_dims);
        g
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }

    /// 1x1x1, unit stride, no padding: columns are the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    /// Output rows (`z * oh + y`) per tile so that a tile of columns stays
    /// roughly cache-sized.
    pub fn tile_rows(&self) -> usize {
        const TARGET: usize = 1 << 16;
        let per_row = self.col_rows() * self.out_dims[2];
        (TARGET / per_row.max(1)).clamp(1, self.out_dims[0] * self.out_dims[1])
    }

    /// Unfold `x` (`channels x in_voxels`) into `cols`
    /// (`channels * K x out_voxels`).
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        self.im2col_rows(x, cols, 0, self.out_dims[0] * self.out_dims[1]);
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add `cols` into `x`.
    pub fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        self.col2im_rows(cols, x, 0, self.out_dims[0] * self.out_dims[1]);
    }

    /// [`im2col`](Self::im2col) restricted to output rows `r0..r1`; `cols`
    /// is `channels * K x (r1 - r0) * ow`.
    pub fn im2col_rows<T: Real>(&self, x: &[T], cols: &mut [T], r0: usize, r1: usize) {
        let [id, ih, iw] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let ncol = (r1 - r0) * ow;
        let ivox = id * ih * iw;
        debug_assert_eq!(cols.len(), self.col_rows() * ncol);
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &x[c * ivox..(c + 1) * ivox];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * ncol..(row + 1) * ncol];
                        row += 1;
                        let (lo, hi) = if sw == 1 {
                            // valid x range: 0 <= x + e - pw < iw
                            let lo = pw.saturating_sub(e).min(ow);
                            (lo, (iw + pw).saturating_sub(e).min(ow).max(lo))
                        } else {
                            (0, 0)
                        };
                        for (r, out) in (r0..r1).zip(dst.chunks_exact_mut(ow)) {
                            let (z, y) = (r / oh, r % oh);
                            let zi = (z * sd + a) as isize - pd as isize;
                            let yi = (y * sh + b) as isize - ph as isize;
                            if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                            if sw == 1 {
                                out[..lo].fill(T::zero());
                                out[hi..].fill(T::zero());
                                out[lo..hi].copy_from_slice(&src[lo + e - pw..hi + e - pw]);
                            } else {
                                for (xo, v) in out.iter_mut().enumerate() {
                                    let xi = (xo * sw + e) as isize - pw as isize;
                                    *v = if xi < 0 || xi >= iw as isize { T::zero() } else { src[xi as usize] };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col_rows`](Self::im2col_rows).
    pub fn col2im_rows<T: Real>(&self, cols: &[T], x: &mut [T], r0: usize, r1: usize) {
        let [id, ih, iw] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let ncol = (r1 - r0) * ow;
        let ivox = id * ih * iw;
        let mut row = 0;
        for c in 0..self.channels {
            let xc = &mut x[c * ivox..(c + 1) * ivox];
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * ncol..(row + 1) * ncol];
                        row += 1;
                        for (r, s) in (r0..r1).zip(src.chunks_exact(ow)) {
                            let (z, y) = (r / oh, r % oh);
                            let zi = (z * sd + a) as isize - pd as isize;
                            let yi = (y * sh + b) as isize - ph as isize;
                            if zi < 0 || zi >= id as isize || yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(zi as usize * ih + yi as usize) * iw..][..iw];
                            if sw == 1 {
                                let lo = pw.saturating_sub(e).min(ow);
                                let hi = (iw + pw).saturating_sub(e).min(ow).max(lo);
                                for (d, &v) in dst[lo + e - pw..hi + e - pw].iter_mut().zip(&s[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for (xo, &v) in s.iter().enumerate() {
                                    let xi = (xo * sw + e) as isize - pw as isize;
                                    if xi >= 0 && xi < iw as isize {
                                        dst[xi as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
