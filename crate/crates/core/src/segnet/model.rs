use wssis_nn::{ops, Conv2d, ParamStore, Tensor};

use super::config::{NetConfig, NUM_LEVELS};
use crate::error::{Result, WssisError};
use crate::rng::rng_from;

/// Backbone layers whose outputs feed the pyramid (C2..C5).
const TAPS: [usize; 4] = [3, 5, 6, 7];

/// Encoder, top-down pyramid, shared per-level heads and the mask-feature
/// branch. Parameters live in `store`.
#[derive(Clone, Debug)]
pub struct SegNet {
    config: NetConfig,
    pub store: ParamStore,
    backbone: Vec<Conv2d>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    mask_hidden: Conv2d,
    mask_out: Conv2d,
    cat_hidden: Conv2d,
    cat_out: Conv2d,
    kernel_hidden: Conv2d,
    kernel_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct HeadActivations {
    resized: Tensor,
    cat_hidden: Tensor,
    pub cat_logits: Tensor,
    kernel_input: Tensor,
    kernel_hidden: Tensor,
    pub kernels: Tensor,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    input: Tensor,
    backbone: Vec<Tensor>,
    merged: Vec<Tensor>,
    pub pyramid: Vec<Tensor>,
    mask_input: Tensor,
    mask_hidden: Tensor,
    pub mask_feature: Tensor,
    pub heads: Vec<HeadActivations>,
}

/// Upstream gradients with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub cat_logits: Vec<Tensor>,
    pub kernels: Vec<Tensor>,
    pub mask_feature: Tensor,
}

impl OutputGrads {
    pub fn zeros_like(acts: &Activations) -> Self {
        Self {
            cat_logits: acts.heads.iter().map(|h| Tensor::zeros(h.cat_logits.shape())).collect(),
            kernels: acts.heads.iter().map(|h| Tensor::zeros(h.kernels.shape())).collect(),
            mask_feature: Tensor::zeros(acts.mask_feature.shape()),
        }
    }
}

impl SegNet {
    /// Fresh network with He-initialized weights drawn from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let w = config.backbone_widths;
        let plan = [
            (3, w[0], 2),
            (w[0], w[0], 1),
            (w[0], w[1], 2),
            (w[1], w[1], 1),
            (w[1], w[2], 2),
            (w[2], w[2], 1),
            (w[2], w[3], 2),
            (w[3], w[4], 2),
        ];
        let backbone = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| {
                Conv2d::new(&mut store, &format!("backbone.{i}"), cin, cout, 3, s, &mut rng)
            })
            .collect();
        let f = config.fpn_channels;
        let tap_widths = [w[1], w[2], w[3], w[4]];
        let lateral = tap_widths
            .iter()
            .enumerate()
            .map(|(j, &c)| Conv2d::new(&mut store, &format!("fpn.lateral.{j}"), c, f, 1, 1, &mut rng))
            .collect();
        let smooth = (0..4)
            .map(|j| Conv2d::new(&mut store, &format!("fpn.output.{j}"), f, f, 3, 1, &mut rng))
            .collect();
        let e = config.kernel_dim;
        let hc = config.head_channels;
        let mask_hidden = Conv2d::new(&mut store, "mask.hidden", f + 2, f, 3, 1, &mut rng);
        let mask_out = Conv2d::new(&mut store, "mask.output", f, e, 1, 1, &mut rng);
        let cat_hidden = Conv2d::new(&mut store, "head.category.hidden", f, hc, 3, 1, &mut rng);
        let cat_out = Conv2d::new(&mut store, "head.category.output", hc, config.num_classes, 3, 1, &mut rng);
        let kernel_hidden = Conv2d::new(&mut store, "head.kernel.hidden", f + 2, hc, 3, 1, &mut rng);
        let kernel_out = Conv2d::new(&mut store, "head.kernel.output", hc, e, 3, 1, &mut rng);
        // Small initial weights keep the first dynamic-convolution masks soft.
        for p in [kernel_out.weight, mask_out.weight] {
            store.get_mut(p).value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        let prior = -((1.0 - config.prior_prob) / config.prior_prob).ln();
        store.get_mut(cat_out.bias).value.fill(prior);
        Ok(Self {
            config,
            store,
            backbone,
            lateral,
            smooth,
            mask_hidden,
            mask_out,
            cat_hidden,
            cat_out,
            kernel_hidden,
            kernel_out,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn forward(&self, input: &Tensor) -> Result<Activations> {
        let (c, h, w) = (input.channels(), input.height(), input.width());
        if c != 3 || h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(WssisError::InvalidShape(format!(
                "network input must be 3 x H x W with H, W divisible by 32, got {c} x {h} x {w}"
            )));
        }
        let store = &self.store;
        let mut backbone = Vec::with_capacity(self.backbone.len());
        for (i, conv) in self.backbone.iter().enumerate() {
            let x = if i == 0 { input } else { &backbone[i - 1] };
            let y = ops::relu(&conv.forward(store, x));
            backbone.push(y);
        }
        let lat: Vec<Tensor> = TAPS
            .iter()
            .zip(&self.lateral)
            .map(|(&t, conv)| conv.forward(store, &backbone[t]))
            .collect();
        let mut merged = lat.clone();
        for j in (0..3).rev() {
            let up = ops::upsample_nearest(&merged[j + 1], 2);
            merged[j].add_assign(&up);
        }
        let mut pyramid: Vec<Tensor> = merged
            .iter()
            .zip(&self.smooth)
            .map(|(m, conv)| conv.forward(store, m))
            .collect();
        pyramid.push(ops::subsample2(&pyramid[3]));

        let mut fused = pyramid[0].clone();
        for (j, p) in pyramid.iter().enumerate().take(4).skip(1) {
            fused.add_assign(&ops::upsample_nearest(p, 1 << j));
        }
        let (mh, mw) = (fused.height(), fused.width());
        let mask_input = ops::concat_channels(&[&fused, &ops::coord_channels(mh, mw)]);
        let mask_hidden = ops::relu(&self.mask_hidden.forward(store, &mask_input));
        let mask_feature = self.mask_out.forward(store, &mask_hidden);

        let heads = (0..NUM_LEVELS)
            .map(|l| {
                let s = self.config.grid_sizes[l];
                let resized = ops::resize_bilinear(&pyramid[l], s, s);
                let cat_hidden = ops::relu(&self.cat_hidden.forward(store, &resized));
                let cat_logits = self.cat_out.forward(store, &cat_hidden);
                let kernel_input = ops::concat_channels(&[&resized, &ops::coord_channels(s, s)]);
                let kernel_hidden = ops::relu(&self.kernel_hidden.forward(store, &kernel_input));
                let kernels = self.kernel_out.forward(store, &kernel_hidden);
                HeadActivations {
                    resized,
                    cat_hidden,
                    cat_logits,
                    kernel_input,
                    kernel_hidden,
                    kernels,
                }
            })
            .collect();
        Ok(Activations {
            input: input.clone(),
            backbone,
            merged,
            pyramid,
            mask_input,
            mask_hidden,
            mask_feature,
            heads,
        })
    }

    /// Accumulates parameter gradients for the given output gradients.
    pub fn backward(&mut self, acts: &Activations, grads: &OutputGrads) {
        let store = &mut self.store;
        let f = self.config.fpn_channels;
        let mut d_pyramid: Vec<Tensor> = acts.pyramid.iter().map(|p| Tensor::zeros(p.shape())).collect();

        for (l, h) in acts.heads.iter().enumerate() {
            let g = self
                .kernel_out
                .backward(store, &h.kernel_hidden, &grads.kernels[l], true)
                .expect("input grad");
            let g = ops::relu_backward(&h.kernel_hidden, &g);
            let g = self
                .kernel_hidden
                .backward(store, &h.kernel_input, &g, true)
                .expect("input grad");
            let mut d_resized = ops::take_channels(&g, 0, f);

            let g = self
                .cat_out
                .backward(store, &h.cat_hidden, &grads.cat_logits[l], true)
                .expect("input grad");
            let g = ops::relu_backward(&h.cat_hidden, &g);
            let g = self.cat_hidden.backward(store, &h.resized, &g, true).expect("input grad");
            d_resized.add_assign(&g);

            let p = &acts.pyramid[l];
            d_pyramid[l].add_assign(&ops::resize_bilinear_backward(&d_resized, p.height(), p.width()));
        }

        let g = self
            .mask_out
            .backward(store, &acts.mask_hidden, &grads.mask_feature, true)
            .expect("input grad");
        let g = ops::relu_backward(&acts.mask_hidden, &g);
        let g = self
            .mask_hidden
            .backward(store, &acts.mask_input, &g, true)
            .expect("input grad");
        let d_fused = ops::take_channels(&g, 0, f);
        d_pyramid[0].add_assign(&d_fused);
        for (j, d) in d_pyramid.iter_mut().enumerate().take(4).skip(1) {
            d.add_assign(&ops::upsample_nearest_backward(&d_fused, 1 << j));
        }
        let p5 = &acts.pyramid[3];
        let d6 = ops::subsample2_backward(&d_pyramid[4], p5.height(), p5.width());
        d_pyramid[3].add_assign(&d6);

        let mut d_merged: Vec<Tensor> = (0..4)
            .map(|j| {
                self.smooth[j]
                    .backward(store, &acts.merged[j], &d_pyramid[j], true)
                    .expect("input grad")
            })
            .collect();
        for j in 0..3 {
            let up = ops::upsample_nearest_backward(&d_merged[j], 2);
            d_merged[j + 1].add_assign(&up);
        }

        let mut d_backbone: Vec<Option<Tensor>> = vec![None; self.backbone.len()];
        for (j, &t) in TAPS.iter().enumerate() {
            let g = self.lateral[j]
                .backward(store, &acts.backbone[t], &d_merged[j], true)
                .expect("input grad");
            d_backbone[t] = Some(g);
        }
        let mut carried: Option<Tensor> = None;
        for l in (0..self.backbone.len()).rev() {
            let mut g = d_backbone[l].take().unwrap_or_else(|| Tensor::zeros(acts.backbone[l].shape()));
            if let Some(c) = carried.take() {
                g.add_assign(&c);
            }
            let g = ops::relu_backward(&acts.backbone[l], &g);
            let x = if l == 0 { &acts.input } else { &acts.backbone[l - 1] };
            carried = self.backbone[l].backward(store, x, &g, l > 0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            backbone_widths: [4, 4, 6, 6, 8],
            fpn_channels: 6,
            head_channels: 6,
            kernel_dim: 4,
            grid_sizes: vec![10, 8, 6, 4, 2],
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes_follow_config() {
        let net = SegNet::new(NetConfig::default(), 0).unwrap();
        let acts = net.forward(&Tensor::zeros(&[3, 64, 64])).unwrap();
        assert_eq!(acts.mask_feature.shape(), &[16, 16, 16]);
        let sizes: Vec<usize> = acts.pyramid.iter().map(|p| p.height()).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2, 1]);
        for (h, &s) in acts.heads.iter().zip(&[40, 36, 24, 16, 12]) {
            assert_eq!(h.cat_logits.shape(), &[3, s, s]);
            assert_eq!(h.kernels.shape(), &[16, s, s]);
        }
    }

    #[test]
    fn rejects_non_divisible_input() {
        let net = SegNet::new(tiny(), 0).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[3, 48, 64])),
            Err(WssisError::InvalidShape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences_of_linear_probe() {
        // Loss = sum of output * fixed random weights; checks every path.
        use rand::Rng;
        let mut net = SegNet::new(tiny(), 1).unwrap();
        let mut rng = rng_from(2);
        let input = Tensor::from_vec(&[3, 32, 32], (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect()).unwrap();
        let acts = net.forward(&input).unwrap();
        let mut probe = OutputGrads::zeros_like(&acts);
        for t in probe.cat_logits.iter_mut().chain(probe.kernels.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        probe.mask_feature.data_mut().iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        let objective = |net: &SegNet| {
            let a = net.forward(&input).unwrap();
            let mut s = 0.0;
            for (l, h) in a.heads.iter().enumerate() {
                s += h.cat_logits.data().iter().zip(probe.cat_logits[l].data()).map(|(a, b)| a * b).sum::<f64>();
                s += h.kernels.data().iter().zip(probe.kernels[l].data()).map(|(a, b)| a * b).sum::<f64>();
            }
            s + a.mask_feature.data().iter().zip(probe.mask_feature.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        net.store.zero_grad();
        net.backward(&acts, &probe);
        let analytic = net.clone();
        let n_params = net.store.len();
        let mut checked = 0;
        for pi in 0..n_params {
            let id = wssis_nn::ParamId(pi);
            let len = net.store.value(id).len();
            let idx = rng.random_range(0..len);
            let h = 1e-5;
            let orig = net.store.value(id).data()[idx];
            net.store.get_mut(id).value.data_mut()[idx] = orig + h;
            let up = objective(&net);
            net.store.get_mut(id).value.data_mut()[idx] = orig - h;
            let down = objective(&net);
            net.store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.store.get(id).grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{}[{idx}]: analytic {a} numeric {numeric}", net.store.get(id).name);
            checked += 1;
        }
        assert_eq!(checked, n_params);
    }
}
