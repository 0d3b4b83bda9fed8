use rand::Rng;

use crate::gemm::gemm;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Real;

/// 2-D convolution over a single `[C, H, W]` sample, lowered to GEMM via im2col.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (He-normal) and `{name}.bias` (zeros).
    /// Padding is `kernel / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he_normal(
            format!("{name}.weight"),
            &[out_channels, fan_in],
            fan_in,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "conv expects {} input channels",
            self.in_channels
        );
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w);
        let p = oh * ow;
        let k = self.in_channels * self.kernel * self.kernel;
        let bias = store.value(self.bias).data();
        let mut out = Tensor::zeros(&[self.out_channels, oh, ow]);
        for (c, &b) in bias.iter().enumerate() {
            out.channel_mut(c).fill(b);
        }
        let cols;
        let cols_ref = if self.is_pointwise() {
            x.data()
        } else {
            cols = self.im2col(x, oh, ow);
            &cols
        };
        gemm(
            self.out_channels,
            k,
            p,
            1.0,
            store.value(self.weight).data(),
            false,
            cols_ref,
            false,
            1.0,
            out.data_mut(),
        );
        out
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and returns
    /// the gradient with respect to `x` when `input_grad` is set.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        dy: &Tensor,
        input_grad: bool,
    ) -> Option<Tensor> {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w);
        assert_eq!(dy.shape(), &[self.out_channels, oh, ow], "conv dy shape");
        let p = oh * ow;
        let k = self.in_channels * self.kernel * self.kernel;

        {
            let db = store.grad_mut(self.bias).data_mut();
            for (c, g) in db.iter_mut().enumerate() {
                *g += dy.channel(c).iter().sum::<Real>();
            }
        }

        let cols;
        let cols_ref = if self.is_pointwise() {
            x.data()
        } else {
            cols = self.im2col(x, oh, ow);
            &cols
        };
        {
            let dw = store.grad_mut(self.weight).data_mut();
            gemm(
                self.out_channels,
                p,
                k,
                1.0,
                dy.data(),
                false,
                cols_ref,
                true,
                1.0,
                dw,
            );
        }
        if !input_grad {
            return None;
        }
        let mut dcols = vec![0.0; k * p];
        gemm(
            k,
            self.out_channels,
            p,
            1.0,
            store.value(self.weight).data(),
            true,
            dy.data(),
            false,
            0.0,
            &mut dcols,
        );
        if self.is_pointwise() {
            return Some(Tensor::from_vec(x.shape(), dcols).expect("pointwise grad shape"));
        }
        Some(self.col2im(&dcols, h, w, oh, ow))
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<Real> {
        let (c_in, h, w) = (x.channels(), x.height(), x.width());
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; c_in * k * k * p];
        let src = x.data();
        for c in 0..c_in {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Tensor::zeros(&[self.in_channels, h, w]);
        for c in 0..self.in_channels {
            let plane = dx.channel_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}
