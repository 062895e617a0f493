//! The three small trainable pieces wrapped around the learner.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::instances::rng;
use crate::tensor::{conv2d, conv2d_input_adjoint, conv2d_transpose, ltt, FilterWeights, Tensor};

/// One `k×k` convolution from a single mask channel to `D` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConv {
    /// `k×k×1×D`.
    pub weight: Tensor,
    /// `D`.
    pub bias: Tensor,
}

impl MaskConv {
    fn zeros_like(&self) -> Self {
        MaskConv {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Pre-activation `mask ⊛ weight + bias`.
    pub fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let filter = FilterWeights::from_tensor(self.weight.clone())?;
        let mut out = conv2d(mask, &filter)?;
        let d = self.bias.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.bias.data()[i % d];
        }
        Ok(out)
    }

    /// Accumulate parameter gradients given the gradient of the
    /// pre-activation; returns the gradient with respect to the mask.
    fn accumulate(&self, grad: &mut MaskConv, mask: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        let filter = FilterWeights::from_tensor(self.weight.clone())?;
        let gw = conv2d_transpose(upstream, mask, self.kernel())?;
        grad.weight.axpy(1.0, gw.as_tensor())?;
        let d = self.bias.len();
        for (i, v) in upstream.data().iter().enumerate() {
            grad.bias.data_mut()[i % d] += v;
        }
        conv2d_input_adjoint(upstream, &filter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModules {
    /// Rectified label generator; `None` uses the mask itself as the label.
    pub label_generator: Option<MaskConv>,
    /// Unrectified importance predictor; `None` weights every element by one.
    pub weight_predictor: Option<MaskConv>,
    /// `D + C` weights of the 1×1 decoder.
    pub decoder_weight: Tensor,
    /// Scalar decoder bias.
    pub decoder_bias: Tensor,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

impl ToyModules {
    /// Trainable label generator and weight predictor with `d` channels.
    pub fn learned(d: usize, c: usize, kernel: usize, seed: u64) -> Result<Self> {
        if d == 0 || c == 0 {
            return Err(Error::InvalidArgument("D and C must be positive".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("kernel size must be odd, got {kernel}")));
        }
        let mut rng = rng(seed);
        let b = 1.0 / (kernel as f64);
        let label_generator = MaskConv {
            weight: uniform(&mut rng, &[kernel, kernel, 1, d], 0.0, b),
            bias: Tensor::zeros(&[d]),
        };
        let weight_predictor = MaskConv {
            weight: uniform(&mut rng, &[kernel, kernel, 1, d], -b, b),
            bias: Tensor::filled(&[d], 1.0),
        };
        let bd = 1.0 / ((d + c) as f64).sqrt();
        Ok(ToyModules {
            label_generator: Some(label_generator),
            weight_predictor: Some(weight_predictor),
            decoder_weight: uniform(&mut rng, &[d + c], -bd, bd),
            decoder_bias: Tensor::zeros(&[1]),
        })
    }

    /// Single-channel labels equal to the mask and uniform weights; only the
    /// decoder is trainable.
    pub fn fixed(c: usize, seed: u64) -> Result<Self> {
        if c == 0 {
            return Err(Error::InvalidArgument("C must be positive".into()));
        }
        let mut rng = rng(seed);
        let bd = 1.0 / ((1 + c) as f64).sqrt();
        Ok(ToyModules {
            label_generator: None,
            weight_predictor: None,
            decoder_weight: uniform(&mut rng, &[1 + c], -bd, bd),
            decoder_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn label_channels(&self) -> usize {
        self.label_generator.as_ref().map_or(1, |m| m.bias.len())
    }

    pub fn feature_channels(&self) -> usize {
        self.decoder_weight.len() - self.label_channels()
    }

    pub fn zeros_like(&self) -> Self {
        ToyModules {
            label_generator: self.label_generator.as_ref().map(MaskConv::zeros_like),
            weight_predictor: self.weight_predictor.as_ref().map(MaskConv::zeros_like),
            decoder_weight: Tensor::zeros(self.decoder_weight.shape()),
            decoder_bias: Tensor::zeros(&[1]),
        }
    }

    /// Labels and the pre-activation they were rectified from.
    pub fn labels(&self, mask: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        match &self.label_generator {
            None => Ok((mask.clone(), None)),
            Some(e) => {
                let pre = e.forward(mask)?;
                Ok((pre.map(|v| v.max(0.0)), Some(pre)))
            }
        }
    }

    pub fn importance(&self, mask: &Tensor) -> Result<Tensor> {
        match &self.weight_predictor {
            None => {
                let (h, w, _) = mask.dims3()?;
                Ok(Tensor::filled(&[h, w, self.label_channels()], 1.0))
            }
            Some(wp) => wp.forward(mask),
        }
    }

    /// Logits of the 1×1 decoder applied to `[scores, features]`.
    pub fn decode(&self, scores: &Tensor, features: &Tensor) -> Result<Tensor> {
        let (h, w, d) = scores.dims3()?;
        let (_, _, c) = features.dims3()?;
        if d + c != self.decoder_weight.len() {
            return Err(Error::dim("decoder inputs (D+C)", self.decoder_weight.len(), d + c));
        }
        let a = self.decoder_weight.data();
        let b = self.decoder_bias.data()[0];
        Ok(Tensor::from_fn(&[h, w, 1], |p| {
            let s = &scores.data()[p * d..(p + 1) * d];
            let x = &features.data()[p * c..(p + 1) * c];
            b + s.iter().zip(&a[..d]).map(|(s, a)| s * a).sum::<f64>()
                + x.iter().zip(&a[d..]).map(|(x, a)| x * a).sum::<f64>()
        }))
    }

    /// Accumulate decoder parameter gradients; returns the score gradient.
    pub(crate) fn decode_backward(
        &self,
        grad: &mut ToyModules,
        scores: &Tensor,
        features: &Tensor,
        logit_grad: &Tensor,
    ) -> Tensor {
        let d = scores.shape()[2];
        let c = features.shape()[2];
        let a = self.decoder_weight.data();
        let ga = grad.decoder_weight.data_mut();
        let mut gs = Tensor::zeros(scores.shape());
        let mut gb = 0.0;
        for (p, &z) in logit_grad.data().iter().enumerate() {
            gb += z;
            for j in 0..d {
                ga[j] += z * scores.data()[p * d + j];
                gs.data_mut()[p * d + j] = z * a[j];
            }
            for j in 0..c {
                ga[d + j] += z * features.data()[p * c + j];
            }
        }
        grad.decoder_bias.data_mut()[0] += gb;
        gs
    }

    /// Accumulate label generator gradients given `∂L/∂labels`; returns
    /// `∂L/∂mask` along this path.
    pub(crate) fn labels_backward(
        &self,
        grad: &mut ToyModules,
        mask: &Tensor,
        pre: Option<&Tensor>,
        upstream: &Tensor,
    ) -> Result<Tensor> {
        match (&self.label_generator, grad.label_generator.as_mut(), pre) {
            (Some(e), Some(g), Some(pre)) => {
                let masked = upstream.zip_map(pre, |u, z| if z > 0.0 { u } else { 0.0 })?;
                e.accumulate(g, mask, &masked)
            }
            _ => Ok(upstream.clone()),
        }
    }

    /// As [`ToyModules::labels_backward`] for the importance weights.
    pub(crate) fn importance_backward(&self, grad: &mut ToyModules, mask: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        match (&self.weight_predictor, grad.weight_predictor.as_mut()) {
            (Some(wp), Some(g)) => wp.accumulate(g, mask, upstream),
            _ => Ok(Tensor::zeros(mask.shape())),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(6);
        if let Some(e) = &self.label_generator {
            out.push(("label_generator_weight", &e.weight));
            out.push(("label_generator_bias", &e.bias));
        }
        if let Some(w) = &self.weight_predictor {
            out.push(("weight_predictor_weight", &w.weight));
            out.push(("weight_predictor_bias", &w.bias));
        }
        out.push(("decoder_weight", &self.decoder_weight));
        out.push(("decoder_bias", &self.decoder_bias));
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(6);
        if let Some(e) = self.label_generator.as_mut() {
            out.push(&mut e.weight);
            out.push(&mut e.bias);
        }
        if let Some(w) = self.weight_predictor.as_mut() {
            out.push(&mut w.weight);
            out.push(&mut w.bias);
        }
        out.push(&mut self.decoder_weight);
        out.push(&mut self.decoder_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn label_generator_norm(&self) -> f64 {
        self.label_generator
            .as_ref()
            .map_or(0.0, |m| (m.weight.norm_sq() + m.bias.norm_sq()).sqrt())
    }

    pub fn weight_predictor_norm(&self) -> f64 {
        self.weight_predictor
            .as_ref()
            .map_or(0.0, |m| (m.weight.norm_sq() + m.bias.norm_sq()).sqrt())
    }

    pub fn norm(&self) -> f64 {
        self.named_tensors().iter().map(|(_, t)| t.norm_sq()).sum::<f64>().sqrt()
    }

    pub(crate) fn scale_add(&mut self, a: f64, other: &ToyModules) -> Result<()> {
        let src = other.named_tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Shape {
                shape: vec![dst.len(), src.len()],
                reason: "module structures differ".into(),
            });
        }
        for (d, (_, s)) in dst.into_iter().zip(src) {
            d.axpy(a, s)?;
        }
        Ok(())
    }

    pub(crate) fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Write each parameter tensor to `<dir>/<name>.ltt`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| {
                let path = dir.join(format!("{name}.ltt"));
                ltt::save(&path, t)?;
                Ok(path)
            })
            .collect()
    }

    /// Inverse of [`ToyModules::save_dir`].
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let opt = |name: &str| -> Result<Option<Tensor>> {
            let path = dir.join(format!("{name}.ltt"));
            if path.exists() {
                ltt::load(path).map(Some)
            } else {
                Ok(None)
            }
        };
        let pair = |w: Option<Tensor>, b: Option<Tensor>| match (w, b) {
            (Some(weight), Some(bias)) => Ok(Some(MaskConv { weight, bias })),
            (None, None) => Ok(None),
            _ => Err(Error::Format("weight and bias files must come in pairs".into())),
        };
        let label_generator = pair(opt("label_generator_weight")?, opt("label_generator_bias")?)?;
        let weight_predictor = pair(opt("weight_predictor_weight")?, opt("weight_predictor_bias")?)?;
        let need = |name: &str| opt(name)?.ok_or_else(|| Error::Format(format!("missing {name}.ltt")));
        let out = ToyModules {
            label_generator,
            weight_predictor,
            decoder_weight: need("decoder_weight")?,
            decoder_bias: need("decoder_bias")?,
        };
        if !out.is_finite() {
            return Err(Error::Format("module parameters are not finite".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let m = ToyModules::learned(4, 8, 3, 0).unwrap();
        assert_eq!(m.label_channels(), 4);
        assert_eq!(m.feature_channels(), 8);
        let mask = Tensor::from_fn(&[6, 6, 1], |i| f64::from(i % 3 == 0));
        let (e, pre) = m.labels(&mask).unwrap();
        assert_eq!(e.shape(), &[6, 6, 4]);
        assert!(e.data().iter().all(|&v| v >= 0.0));
        assert!(pre.is_some());
        assert_eq!(m.importance(&mask).unwrap().shape(), &[6, 6, 4]);
        let f = ToyModules::fixed(8, 0).unwrap();
        assert_eq!(f.labels(&mask).unwrap().0, mask);
        assert!(f.importance(&mask).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn importance_can_be_negative() {
        let mut m = ToyModules::learned(1, 2, 3, 0).unwrap();
        m.weight_predictor.as_mut().unwrap().bias = Tensor::new(vec![1], vec![-2.0]).unwrap();
        let w = m.importance(&Tensor::zeros(&[4, 4, 1])).unwrap();
        assert!(w.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn decode_backward_matches_difference() {
        let m = ToyModules::learned(2, 3, 3, 5).unwrap();
        let s = Tensor::from_fn(&[3, 3, 2], |i| (i as f64 * 0.37).sin());
        let x = Tensor::from_fn(&[3, 3, 3], |i| (i as f64 * 0.11).cos());
        let u = Tensor::from_fn(&[3, 3, 1], |i| 0.5 - i as f64 * 0.1);
        let f = |s: &Tensor| m.decode(s, &x).unwrap().dot(&u).unwrap();
        let mut g = m.zeros_like();
        let gs = m.decode_backward(&mut g, &s, &x, &u);
        let h = 1e-6;
        for i in 0..s.len() {
            let mut sp = s.clone();
            sp.data_mut()[i] += h;
            let mut sm = s.clone();
            sm.data_mut()[i] -= h;
            let fd = (f(&sp) - f(&sm)) / (2.0 * h);
            assert!((fd - gs.data()[i]).abs() < 1e-8);
        }
        assert!((g.decoder_bias.data()[0] - u.data().iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn ltt_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModules::learned(3, 4, 3, 2).unwrap();
        let paths = m.save_dir(dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        assert_eq!(ToyModules::load_dir(dir.path()).unwrap(), m);
        let f = ToyModules::fixed(4, 2).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        f.save_dir(dir2.path()).unwrap();
        assert_eq!(ToyModules::load_dir(dir2.path()).unwrap(), f);
    }
}
