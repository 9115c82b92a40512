//! 3D cross-correlation via patch unrolling and a single GEMM per call.

use rayon::prelude::*;

use super::{Result, Scalar, TensorError};

/// Output extent along one axis: `floor((in + 2*padding - k) / stride) + 1`.
pub fn conv3d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Resolved shapes of a conv3d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 5 {
            return Err(TensorError::Rank {
                op: "conv3d",
                expected: 5,
                shape: input.to_vec(),
            });
        }
        if kernel.len() != 5 {
            return Err(TensorError::Rank {
                op: "conv3d",
                expected: 5,
                shape: kernel.to_vec(),
            });
        }
        if input[1] != kernel[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        let spatial = [input[2], input[3], input[4]];
        let k = [kernel[2], kernel[3], kernel[4]];
        let padded = spatial.map(|s| s + 2 * padding);
        if (0..3).any(|i| k[i] > padded[i] || k[i] == 0) {
            return Err(TensorError::KernelTooLarge { kernel: k, padded });
        }
        let output = [0, 1, 2].map(|i| conv3d_output_extent(spatial[i], k[i], stride, padding));
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: kernel[0],
            input: spatial,
            kernel: k,
            output,
            stride,
            padding,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_channels,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// Range of output indices along `axis` whose tap `k` lands inside the input.
    #[inline]
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, pad, n) = (self.stride, self.padding, self.input[axis]);
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if n + pad > k { ((n + pad - k - 1) / s + 1).min(self.output[axis]) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Visits every (patch row, output position, input position) triple of one
    /// sample, run by run along the innermost axis: `f(row, out_offset, in_offset, len)`
    /// covers `len` consecutive outputs whose inputs are `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [_, ih, iw] = self.input;
        let in_vol = self.in_volume();
        let (s, pad) = (self.stride, self.padding);
        let mut row = 0;
        for c in 0..self.in_channels {
            for a in 0..kd {
                let (z0, z1) = self.valid_range(0, a);
                for b in 0..kh {
                    let (y0, y1) = self.valid_range(1, b);
                    for e in 0..kw {
                        let (x0, x1) = self.valid_range(2, e);
                        if x1 > x0 {
                            for z in z0..z1 {
                                let sz = z * s + a - pad;
                                for y in y0..y1 {
                                    let sy = y * s + b - pad;
                                    let out = (z * oh + y) * ow + x0;
                                    let inp = c * in_vol + (sz * ih + sy) * iw + x0 * s + e - pad;
                                    f(row, out, inp, x1 - x0);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Unrolls the batch into `[patch_len, batch * out_volume]`.
    fn unroll<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let p = self.out_volume();
        let bp = self.batch * p;
        let sample_in = self.in_channels * self.in_volume();
        let mut cols = vec![T::zero(); self.patch_len() * bp];
        let s = self.stride;
        for (b, sample) in input.chunks(sample_in.max(1)).enumerate() {
            self.for_each_run(|row, out, inp, len| {
                let dst = &mut cols[row * bp + b * p + out..row * bp + b * p + out + len];
                if s == 1 {
                    dst.copy_from_slice(&sample[inp..inp + len]);
                } else {
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = sample[inp + i * s];
                    }
                }
            });
        }
        cols
    }

    pub(crate) fn forward<T: Scalar>(&self, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let p = self.out_volume();
        let bp = self.batch * p;
        let patch = self.patch_len();
        let cols = self.unroll(input);
        // [out_channels, batch * out_volume]
        let mut tmp = vec![T::zero(); self.out_channels * bp];
        T::gemm(self.out_channels, patch, bp, T::one(), kernel, false, &cols, false, T::zero(), &mut tmp);
        let mut out = vec![T::zero(); bp * self.out_channels];
        out.par_chunks_mut((self.out_channels * p).max(1)).enumerate().for_each(|(b, sample)| {
            for (o, dst) in sample.chunks_mut(p.max(1)).enumerate() {
                let bias_v = bias.map_or(T::zero(), |bv| bv[o]);
                let src = &tmp[o * bp + b * p..o * bp + (b + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias_v;
                }
            }
        });
        out
    }

    /// Returns (input grad, kernel grad, bias grad) for the requested parts.
    pub(crate) fn backward<T: Scalar>(
        &self,
        input: &[T],
        kernel: &[T],
        grad_out: &[T],
        need: [bool; 3],
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let p = self.out_volume();
        let bp = self.batch * p;
        let patch = self.patch_len();
        let cout = self.out_channels;

        let mut gt = vec![T::zero(); cout * bp];
        for b in 0..self.batch {
            for o in 0..cout {
                gt[o * bp + b * p..o * bp + (b + 1) * p]
                    .copy_from_slice(&grad_out[(b * cout + o) * p..(b * cout + o + 1) * p]);
            }
        }

        let grad_bias = need[2].then(|| {
            (0..cout)
                .map(|o| gt[o * bp..(o + 1) * bp].iter().fold(T::zero(), |acc, &v| acc + v))
                .collect()
        });

        let grad_kernel = need[1].then(|| {
            let cols = self.unroll(input);
            let mut gk = vec![T::zero(); cout * patch];
            T::gemm(cout, bp, patch, T::one(), &gt, false, &cols, true, T::zero(), &mut gk);
            gk
        });

        let grad_input = need[0].then(|| {
            // [patch, batch * out_volume]
            let mut gcols = vec![T::zero(); patch * bp];
            T::gemm(patch, cout, bp, T::one(), kernel, true, &gt, false, T::zero(), &mut gcols);
            let sample_in = self.in_channels * self.in_volume();
            let mut gi = vec![T::zero(); self.batch * sample_in];
            let s = self.stride;
            gi.par_chunks_mut(sample_in.max(1)).enumerate().for_each(|(b, dst)| {
                self.for_each_run(|row, out, inp, len| {
                    let src = &gcols[row * bp + b * p + out..row * bp + b * p + out + len];
                    for (i, &v) in src.iter().enumerate() {
                        dst[inp + i * s] = dst[inp + i * s] + v;
                    }
                });
            });
            gi
        });

        (grad_input, grad_kernel, grad_bias)
    }
}
