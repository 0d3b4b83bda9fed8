use std::path::Path;

use serde::{Deserialize, Serialize};
use wssis_nn::{archive, ops, Conv2d, ParamStore, Tensor};

use super::RefineConfig;
use crate::error::{Result, WssisError};
use crate::rng::rng_from;

/// Encoder with three tapped stages (S/4, S/8, S/16), top-down lateral
/// fusion, a single output at S/4 upsampled to S, and a learned 1x1 skip
/// from the rough-mask channel added to the output logits.
#[derive(Clone, Debug)]
pub struct RefineNet {
    config: RefineConfig,
    num_classes: usize,
    pub store: ParamStore,
    encoder: Vec<Conv2d>,
    lateral: Vec<Conv2d>,
    smooth: Conv2d,
    head: Conv2d,
    skip: Conv2d,
}

#[derive(Clone, Debug)]
pub struct RefineActivations {
    input: Tensor,
    rough: Tensor,
    encoder: Vec<Tensor>,
    merged: Vec<Tensor>,
    hidden: Tensor,
    coarse: Tensor,
    /// `[1, S, S]` logits.
    pub logits: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    num_classes: usize,
    refiner: RefineConfig,
}

impl RefineNet {
    pub fn new(config: RefineConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(WssisError::Config("refiner needs at least one class".into()));
        }
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let w = config.widths;
        let plan = [(4 + num_classes, w[0]), (w[0], w[1]), (w[1], w[2]), (w[2], w[3])];
        let encoder = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Conv2d::new(&mut store, &format!("encoder.{i}"), cin, cout, 3, 2, &mut rng))
            .collect();
        let d = config.decoder_channels;
        let lateral = [w[1], w[2], w[3]]
            .iter()
            .enumerate()
            .map(|(j, &c)| Conv2d::new(&mut store, &format!("lateral.{j}"), c, d, 1, 1, &mut rng))
            .collect();
        let smooth = Conv2d::new(&mut store, "decoder.smooth", d, d, 3, 1, &mut rng);
        let head = Conv2d::new(&mut store, "decoder.output", d, 1, 1, 1, &mut rng);
        let skip = Conv2d::new(&mut store, "skip", 1, 1, 1, 1, &mut rng);
        // Start close to a copy of the rough mask.
        store.get_mut(head.weight).value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        store.get_mut(skip.weight).value.fill(6.0);
        store.get_mut(skip.bias).value.fill(-3.0);
        Ok(Self {
            config,
            num_classes,
            store,
            encoder,
            lateral,
            smooth,
            head,
            skip,
        })
    }

    pub fn config(&self) -> &RefineConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Weights that reproduce the rough-mask channel: only the skip path is
    /// active, with a steep sigmoid around 0.5.
    pub fn identity(config: RefineConfig, num_classes: usize) -> Result<Self> {
        let mut net = Self::new(config, num_classes, 0)?;
        for p in net.store.iter_mut() {
            p.value.fill(0.0);
        }
        net.store.get_mut(net.skip.weight).value.fill(20.0);
        net.store.get_mut(net.skip.bias).value.fill(-10.0);
        Ok(net)
    }

    pub fn forward(&self, input: &Tensor) -> Result<RefineActivations> {
        let s = self.config.input_size;
        let expected = [4 + self.num_classes, s, s];
        if input.shape() != expected {
            return Err(WssisError::InvalidShape(format!(
                "refiner input must be {expected:?}, got {:?}",
                input.shape()
            )));
        }
        let store = &self.store;
        let mut encoder: Vec<Tensor> = Vec::with_capacity(4);
        for (i, conv) in self.encoder.iter().enumerate() {
            let x = if i == 0 { input } else { &encoder[i - 1] };
            encoder.push(ops::relu(&conv.forward(store, x)));
        }
        let mut merged: Vec<Tensor> = self
            .lateral
            .iter()
            .enumerate()
            .map(|(j, conv)| conv.forward(store, &encoder[j + 1]))
            .collect();
        for j in (0..2).rev() {
            let up = ops::upsample_nearest(&merged[j + 1], 2);
            merged[j].add_assign(&up);
        }
        let hidden = ops::relu(&self.smooth.forward(store, &merged[0]));
        let coarse = self.head.forward(store, &hidden);
        let rough = Tensor::from_vec(&[1, s, s], input.channel(3).to_vec())?;
        let mut logits = ops::resize_bilinear(&coarse, s, s);
        logits.add_assign(&self.skip.forward(store, &rough));
        Ok(RefineActivations {
            input: input.clone(),
            rough,
            encoder,
            merged,
            hidden,
            coarse,
            logits,
        })
    }

    /// Accumulates parameter gradients for `d_logits` (`[1, S, S]`).
    pub fn backward(&mut self, acts: &RefineActivations, d_logits: &Tensor) {
        let store = &mut self.store;
        self.skip.backward(store, &acts.rough, d_logits, false);
        let (ch, cw) = (acts.coarse.height(), acts.coarse.width());
        let d_coarse = ops::resize_bilinear_backward(d_logits, ch, cw);
        let g = self.head.backward(store, &acts.hidden, &d_coarse, true).expect("input grad");
        let g = ops::relu_backward(&acts.hidden, &g);
        let d0 = self.smooth.backward(store, &acts.merged[0], &g, true).expect("input grad");
        let mut d_merged = vec![d0];
        for j in 1..3 {
            let up = ops::upsample_nearest_backward(&d_merged[j - 1], 2);
            d_merged.push(up);
        }
        let mut d_encoder: Vec<Option<Tensor>> = vec![None; 4];
        for (j, conv) in self.lateral.iter().enumerate() {
            d_encoder[j + 1] = conv.backward(store, &acts.encoder[j + 1], &d_merged[j], true);
        }
        let mut carried: Option<Tensor> = None;
        for l in (0..4).rev() {
            let mut g = d_encoder[l].take().unwrap_or_else(|| Tensor::zeros(acts.encoder[l].shape()));
            if let Some(c) = carried.take() {
                g.add_assign(&c);
            }
            let g = ops::relu_backward(&acts.encoder[l], &g);
            let x = if l == 0 { &acts.input } else { &acts.encoder[l - 1] };
            carried = self.encoder[l].backward(store, x, &g, l > 0);
        }
    }

    /// Foreground probabilities, row-major `S x S`.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<f64>> {
        let acts = self.forward(input)?;
        Ok(acts.logits.data().iter().map(|&v| ops::sigmoid(v)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Metadata {
            num_classes: self.num_classes,
            refiner: self.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| WssisError::Config(e.to_string()))?;
        Ok(archive::to_bytes(&self.store, Some(&text))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = archive::read_metadata(bytes)?
            .ok_or_else(|| WssisError::Config("refiner archive carries no configuration".into()))?;
        let meta: Metadata = toml::from_str(&text).map_err(|e| WssisError::Parse {
            context: "refiner metadata".into(),
            message: e.to_string(),
        })?;
        let mut net = Self::new(meta.refiner, meta.num_classes, 0)?;
        archive::load_into(&mut net.store, bytes)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| WssisError::Io {
            context: format!("writing {}", path.display()),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| WssisError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RefineConfig {
        RefineConfig {
            input_size: 32,
            widths: [4, 4, 6, 6],
            decoder_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn output_is_input_sized() {
        let net = RefineNet::new(tiny(), 3, 0).unwrap();
        let acts = net.forward(&Tensor::zeros(&[7, 32, 32])).unwrap();
        assert_eq!(acts.logits.shape(), &[1, 32, 32]);
        assert!(matches!(net.forward(&Tensor::zeros(&[6, 32, 32])), Err(WssisError::InvalidShape(_))));
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut net = RefineNet::new(tiny(), 2, 1).unwrap();
        let mut rng = rng_from(5);
        let mut input = Tensor::from_vec(&[6, 32, 32], (0..6 * 32 * 32).map(|_| rng.random::<f64>()).collect()).unwrap();
        for (i, v) in input.channel_mut(3).iter_mut().enumerate() {
            *v = if (i / 32) % 7 < 4 { 1.0 } else { 0.0 };
        }
        let target: Vec<f64> = (0..32 * 32).map(|i| if (i % 32) < 18 { 1.0 } else { 0.0 }).collect();
        let objective = |net: &RefineNet| {
            let a = net.forward(&input).unwrap();
            wssis_nn::loss::dice_loss(a.logits.data(), &target).0
        };
        let acts = net.forward(&input).unwrap();
        let (_, grad) = wssis_nn::loss::dice_loss(acts.logits.data(), &target);
        net.store.zero_grad();
        net.backward(&acts, &Tensor::from_vec(&[1, 32, 32], grad).unwrap());
        let analytic = net.clone();
        let n = net.store.len();
        for _ in 0..20 {
            let id = wssis_nn::ParamId(rng.random_range(0..n));
            let idx = rng.random_range(0..net.store.value(id).len());
            let h = 1e-6;
            let orig = net.store.value(id).data()[idx];
            net.store.get_mut(id).value.data_mut()[idx] = orig + h;
            let up = objective(&net);
            net.store.get_mut(id).value.data_mut()[idx] = orig - h;
            let down = objective(&net);
            net.store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.store.get(id).grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-3, "{}[{idx}]: analytic {a} numeric {numeric}", net.store.get(id).name);
        }
    }

    #[test]
    fn identity_copies_rough_channel() {
        let net = RefineNet::identity(tiny(), 3).unwrap();
        let mut input = Tensor::zeros(&[7, 32, 32]);
        for (i, v) in input.channel_mut(3).iter_mut().enumerate() {
            *v = if (i * 7919) % 5 < 2 { 1.0 } else { 0.0 };
        }
        let probs = net.predict(&input).unwrap();
        let copied: Vec<f64> = probs.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(&copied[..], input.channel(3));
    }

    #[test]
    fn archive_round_trip() {
        let net = RefineNet::new(tiny(), 3, 9).unwrap();
        let back = RefineNet::from_bytes(&net.to_bytes().unwrap()).unwrap();
        assert!(back.store.values_equal(&net.store));
        assert_eq!(back.config(), net.config());
        assert_eq!(back.num_classes(), 3);
    }
}
