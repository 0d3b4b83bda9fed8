//! Stateless feature-map operations and their backward passes.

use crate::tensor::Tensor;
use crate::Real;

pub fn sigmoid(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its *output* `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            let sy = oy / factor;
            for ox in 0..ow {
                dst[oy * ow + ox] = src[sy * w + ox / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, factor: usize) -> Tensor {
    let (c, oh, ow) = (dy.channels(), dy.height(), dy.width());
    let (h, w) = (oh / factor, ow / factor);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Keeps every second row and column (stride-2 subsampling).
pub fn subsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(2 * oy) * w + 2 * ox];
            }
        }
    }
    out
}

pub fn subsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = (dy.channels(), dy.height(), dy.width());
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(2 * oy) * w + 2 * ox] += src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Per-axis interpolation taps for half-pixel-centred bilinear resizing.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: Real,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as Real / output as Real;
    (0..output)
        .map(|o| {
            let src = ((o as Real + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                w1: src - i0 as Real,
            }
        })
        .collect()
}

/// Bilinear resize of one `h x w` plane (half-pixel centres, edge clamped).
pub fn resize_bilinear_plane(src: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
    assert_eq!(src.len(), h * w);
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    for (oy, y) in ty.iter().enumerate() {
        let r0 = &src[y.i0 * w..(y.i0 + 1) * w];
        let r1 = &src[y.i1 * w..(y.i1 + 1) * w];
        for (ox, x) in tx.iter().enumerate() {
            let top = r0[x.i0] * (1.0 - x.w1) + r0[x.i1] * x.w1;
            let bot = r1[x.i0] * (1.0 - x.w1) + r1[x.i1] * x.w1;
            out[oy * ow + ox] = top * (1.0 - y.w1) + bot * y.w1;
        }
    }
    out
}

fn resize_bilinear_plane_backward(dy: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut dx = vec![0.0; h * w];
    for (oy, y) in ty.iter().enumerate() {
        for (ox, x) in tx.iter().enumerate() {
            let g = dy[oy * ow + ox];
            dx[y.i0 * w + x.i0] += g * (1.0 - y.w1) * (1.0 - x.w1);
            dx[y.i0 * w + x.i1] += g * (1.0 - y.w1) * x.w1;
            dx[y.i1 * w + x.i0] += g * y.w1 * (1.0 - x.w1);
            dx[y.i1 * w + x.i1] += g * y.w1 * x.w1;
        }
    }
    dx
}

pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        data.extend(resize_bilinear_plane(x.channel(ch), h, w, oh, ow));
    }
    Tensor::from_vec(&[c, oh, ow], data).expect("resize shape")
}

pub fn resize_bilinear_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, oh, ow) = (dy.channels(), dy.height(), dy.width());
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        data.extend(resize_bilinear_plane_backward(dy.channel(ch), h, w, oh, ow));
    }
    Tensor::from_vec(&[c, h, w], data).expect("resize grad shape")
}

/// Nearest-neighbour resize of one plane; identity when sizes match.
pub fn resize_nearest_plane<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = (oy * h / oh).min(h - 1);
        for ox in 0..ow {
            let sx = (ox * w / ow).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (h, w) = (parts[0].height(), parts[0].width());
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for t in parts {
        assert_eq!((t.height(), t.width()), (h, w), "concat spatial mismatch");
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[c, h, w], data).expect("concat shape")
}

/// Returns the gradient slice for the first `channels` channels of `dy`.
pub fn take_channels(dy: &Tensor, start: usize, channels: usize) -> Tensor {
    let plane = dy.height() * dy.width();
    let data = dy.data()[start * plane..(start + channels) * plane].to_vec();
    Tensor::from_vec(&[channels, dy.height(), dy.width()], data).expect("channel slice")
}

/// Two channels holding normalised x and y coordinates in `[-1, 1]`.
pub fn coord_channels(h: usize, w: usize) -> Tensor {
    let lin = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as Real / (n - 1) as Real
        }
    };
    let mut t = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            t.data_mut()[y * w + x] = lin(x, w);
            t.data_mut()[h * w + y * w + x] = lin(y, h);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|v| ((v * 7 % 11) as Real) - 5.0).collect()).unwrap()
    }

    /// <resize(x), d> must equal <x, resize_backward(d)> for a linear operator.
    #[test]
    fn bilinear_backward_is_adjoint() {
        for &(h, w, oh, ow) in &[(4usize, 4usize, 10usize, 10usize), (16, 16, 40, 40), (2, 2, 12, 12), (16, 16, 6, 6)] {
            let x = ramp(&[2, h, w]);
            let d = ramp(&[2, oh, ow]).map(|v| v * 0.3 + 0.1);
            let y = resize_bilinear(&x, oh, ow);
            let lhs: Real = y.data().iter().zip(d.data()).map(|(a, b)| a * b).sum();
            let dx = resize_bilinear_backward(&d, h, w);
            let rhs: Real = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn nearest_and_subsample_backward_are_adjoint() {
        let x = ramp(&[3, 4, 4]);
        let d = ramp(&[3, 8, 8]);
        let y = upsample_nearest(&x, 2);
        let lhs: Real = y.data().iter().zip(d.data()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.data().iter().zip(upsample_nearest_backward(&d, 2).data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);

        let x = ramp(&[2, 5, 4]);
        let y = subsample2(&x);
        assert_eq!(y.shape(), &[2, 3, 2]);
        let d = ramp(y.shape());
        let lhs: Real = y.data().iter().zip(d.data()).map(|(a, b)| a * b).sum();
        let rhs: Real = x.data().iter().zip(subsample2_backward(&d, 5, 4).data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let c = Tensor::full(&[1, 3, 5], 0.25);
        assert!(resize_bilinear(&c, 7, 9).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = ramp(&[1, 4, 4]);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
    }

    #[test]
    fn nearest_plane_identity_when_same_size() {
        let src: Vec<u8> = (0..12).map(|v| (v % 2) as u8).collect();
        assert_eq!(resize_nearest_plane(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
