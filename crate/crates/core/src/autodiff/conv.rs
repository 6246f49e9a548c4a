//! Direct stride-1 zero-padded convolution kernels.
//!
//! Two-dimensional convolution is run as the three-dimensional kernel with a
//! unit depth axis, so both share one forward and one backward loop nest.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output positions `o` along `axis` for which `o + k - pad` is a valid
    /// input coordinate.
    fn valid(&self, axis: usize, k: usize) -> std::ops::Range<usize> {
        let lo = self.pad[axis].saturating_sub(k);
        let hi = (self.input[axis] + self.pad[axis])
            .saturating_sub(k)
            .min(self.output[axis]);
        lo..hi.max(lo)
    }

    /// Calls `f(out_offset, in_offset, run_len)` for every contiguous run of
    /// output/input pairs touched by kernel tap `(z, y, x)`.
    #[inline]
    fn for_each_run(&self, z: usize, y: usize, x: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let rw = self.valid(2, x);
        if rw.is_empty() {
            return;
        }
        let run = rw.len();
        for od in self.valid(0, z) {
            let id = od + z - self.pad[0];
            for oy in self.valid(1, y) {
                let iy = oy + y - self.pad[1];
                let ix0 = rw.start + x - self.pad[2];
                f((od * oh + oy) * ow + rw.start, (id * ih + iy) * iw + ix0, run);
            }
        }
    }

    pub fn forward(&self, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (il, ol, kl) = (self.in_len(), self.out_len(), self.k_len());
        let [kd, kh, kw] = self.kernel;
        let mut out = vec![0.0; self.batch * self.c_out * ol];
        for b in 0..self.batch {
            for o in 0..self.c_out {
                let dst = &mut out[(b * self.c_out + o) * ol..][..ol];
                dst.fill(bias[o]);
                for c in 0..self.c_in {
                    let src = &input[(b * self.c_in + c) * il..][..il];
                    let wk = &weight[(o * self.c_in + c) * kl..][..kl];
                    for z in 0..kd {
                        for y in 0..kh {
                            for x in 0..kw {
                                let w = wk[(z * kh + y) * kw + x];
                                self.for_each_run(z, y, x, |oo, io, n| {
                                    for (d, s) in dst[oo..oo + n].iter_mut().zip(&src[io..io + n]) {
                                        *d += w * s;
                                    }
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates gradients for whichever of input/weight/bias are requested.
    pub fn backward(
        &self,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        mut grad_input: Option<&mut [f64]>,
        mut grad_weight: Option<&mut [f64]>,
        grad_bias: Option<&mut [f64]>,
    ) {
        let (il, ol, kl) = (self.in_len(), self.out_len(), self.k_len());
        let [kd, kh, kw] = self.kernel;
        if let Some(gb) = grad_bias {
            for b in 0..self.batch {
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += grad_out[(b * self.c_out + o) * ol..][..ol].iter().sum::<f64>();
                }
            }
        }
        if grad_input.is_none() && grad_weight.is_none() {
            return;
        }
        for b in 0..self.batch {
            for o in 0..self.c_out {
                let g = &grad_out[(b * self.c_out + o) * ol..][..ol];
                for c in 0..self.c_in {
                    let src_off = (b * self.c_in + c) * il;
                    let w_off = (o * self.c_in + c) * kl;
                    for z in 0..kd {
                        for y in 0..kh {
                            for x in 0..kw {
                                let k = w_off + (z * kh + y) * kw + x;
                                if let Some(gw) = grad_weight.as_deref_mut() {
                                    let src = &input[src_off..][..il];
                                    let mut acc = 0.0;
                                    self.for_each_run(z, y, x, |oo, io, n| {
                                        for (gv, s) in g[oo..oo + n].iter().zip(&src[io..io + n]) {
                                            acc += gv * s;
                                        }
                                    });
                                    gw[k] += acc;
                                }
                                if let Some(gi) = grad_input.as_deref_mut() {
                                    let w = weight[k];
                                    let dst = &mut gi[src_off..][..il];
                                    self.for_each_run(z, y, x, |oo, io, n| {
                                        for (d, gv) in dst[io..io + n].iter_mut().zip(&g[oo..oo + n]) {
                                            *d += w * gv;
                                        }
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
