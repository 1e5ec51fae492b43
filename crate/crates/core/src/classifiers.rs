//! Video-level classifier heads: per-class logistic regression and a mixture
//! of logistic experts with a null expert in the gate.

use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::layers::{binary_cross_entropy, binary_cross_entropy_prob, join, Linear, Param, Parameters};
use crate::tensor::{sigmoid, softmax_in_place, Tensor};

pub const DEFAULT_EXPERTS: usize = 2;

#[derive(Clone, Debug)]
pub struct Logistic {
    pub linear: Linear,
}

impl Logistic {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, classes: usize) -> Self {
        Self { linear: Linear::new(rng, inputs, classes) }
    }

    pub fn zeroed(inputs: usize, classes: usize) -> Self {
        Self { linear: Linear::zeroed(inputs, classes) }
    }

    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        self.linear.forward(f)
    }

    pub fn predict(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.logits(f)?.sigmoid())
    }
}

pub fn logistic_predict(f: &Tensor, head: &Logistic) -> Result<Tensor> {
    head.predict(f)
}

/// Mixture of experts. For class `c`, gate column `c·(E+1)+e` scores expert
/// `e` and column `c·(E+1)+E` is the null expert; expert column `c·E+e` holds
/// the logit of expert `e`.
#[derive(Clone, Debug)]
pub struct Moe {
    pub gate: Linear,
    pub experts: Linear,
    classes: usize,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct MoeCache {
    input: Tensor,
    /// Gate distribution `[B × V(E+1)]`.
    gates: Tensor,
    /// Expert sigmoids `[B × V·E]`.
    experts: Tensor,
}

impl Moe {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, classes: usize, experts: usize) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        Ok(Self {
            gate: Linear::new(rng, inputs, classes * (experts + 1)),
            experts: Linear::new(rng, inputs, classes * experts),
            classes,
            count: experts,
        })
    }

    pub fn zeroed(inputs: usize, classes: usize, experts: usize) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("mixture needs at least one expert".into()));
        }
        Ok(Self {
            gate: Linear::zeroed(inputs, classes * (experts + 1)),
            experts: Linear::zeroed(inputs, classes * experts),
            classes,
            count: experts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn expert_count(&self) -> usize {
        self.count
    }

    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, MoeCache)> {
        let (v, e) = (self.classes, self.count);
        let mut gates = self.gate.forward(f)?;
        let experts = self.experts.forward(f)?.map(sigmoid);
        let batch = f.rows();
        let mut scores = Tensor::zeros(&[batch, v]);
        for b in 0..batch {
            let g = gates.row_mut(b);
            for c in 0..v {
                softmax_in_place(&mut g[c * (e + 1)..(c + 1) * (e + 1)]);
            }
            let x = experts.row(b);
            let out = scores.row_mut(b);
            for c in 0..v {
                out[c] = (0..e).map(|k| g[c * (e + 1) + k] * x[c * e + k]).sum();
            }
        }
        Ok((scores, MoeCache { input: f.clone(), gates, experts }))
    }

    pub fn predict(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.forward(f)?.0)
    }

    /// Accumulates parameter gradients for `dscores` and returns `∂/∂f`.
    pub fn backward(&mut self, cache: &MoeCache, dscores: &Tensor) -> Result<Tensor> {
        let (v, e) = (self.classes, self.count);
        let batch = cache.input.rows();
        if dscores.shape() != [batch, v] {
            return Err(dim_err("moe_backward", format!("gradient {:?}, expected [{batch}, {v}]", dscores.shape())));
        }
        let mut dgate = Tensor::zeros(cache.gates.shape());
        let mut dexpert = Tensor::zeros(cache.experts.shape());
        let mut dpi = vec![0.0; e + 1];
        for b in 0..batch {
            let (g, x, ds) = (cache.gates.row(b), cache.experts.row(b), dscores.row(b));
            for c in 0..v {
                let pi = &g[c * (e + 1)..(c + 1) * (e + 1)];
                for k in 0..e {
                    let s = x[c * e + k];
                    dpi[k] = ds[c] * s;
                    dexpert.row_mut(b)[c * e + k] = ds[c] * pi[k] * s * (1.0 - s);
                }
                dpi[e] = 0.0;
                let inner: f64 = pi.iter().zip(&dpi).map(|(p, d)| p * d).sum();
                let dg = &mut dgate.row_mut(b)[c * (e + 1)..(c + 1) * (e + 1)];
                for k in 0..=e {
                    dg[k] = pi[k] * (dpi[k] - inner);
                }
            }
        }
        let mut df = self.gate.backward(&cache.input, &dgate)?;
        df.add_assign(&self.experts.backward(&cache.input, &dexpert)?)?;
        Ok(df)
    }
}

pub fn moe_predict(f: &Tensor, head: &Moe) -> Result<Tensor> {
    head.predict(f)
}

#[derive(Clone, Debug)]
pub enum Head {
    Logistic(Logistic),
    Moe(Moe),
}

/// Forward intermediates of a head together with the gradient of its loss
/// with respect to the head output.
#[derive(Clone, Debug)]
pub enum HeadCache {
    Logistic { input: Tensor, dlogits: Tensor },
    Moe { cache: MoeCache, dscores: Tensor },
}

impl Head {
    pub fn predict(&self, f: &Tensor) -> Result<Tensor> {
        match self {
            Head::Logistic(h) => h.predict(f),
            Head::Moe(h) => h.predict(f),
        }
    }

    /// Binary cross entropy against multi-hot `targets: [B × V]`, averaged
    /// over all entries.
    pub fn loss(&self, f: &Tensor, targets: &Tensor) -> Result<(f64, HeadCache)> {
        match self {
            Head::Logistic(h) => {
                let loss = binary_cross_entropy(&h.logits(f)?, targets)?;
                Ok((loss.value, HeadCache::Logistic { input: f.clone(), dlogits: loss.grad }))
            }
            Head::Moe(h) => {
                let (scores, cache) = h.forward(f)?;
                let loss = binary_cross_entropy_prob(&scores, targets)?;
                Ok((loss.value, HeadCache::Moe { cache, dscores: loss.grad }))
            }
        }
    }

    /// Accumulates `weight ·` the loss gradient and returns `∂/∂f`.
    pub fn backward(&mut self, cache: &HeadCache, weight: f64) -> Result<Tensor> {
        match (self, cache) {
            (Head::Logistic(h), HeadCache::Logistic { input, dlogits }) => {
                h.linear.backward(input, &dlogits.scale(weight))
            }
            (Head::Moe(h), HeadCache::Moe { cache, dscores }) => h.backward(cache, &dscores.scale(weight)),
            _ => Err(Error::Config("head cache does not match head kind".into())),
        }
    }
}

impl Parameters for Logistic {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.linear.visit_params(prefix, f);
    }
}

impl Parameters for Moe {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.gate.visit_params(&join(prefix, "gate"), f);
        self.experts.visit_params(&join(prefix, "experts"), f);
    }
}

impl Parameters for Head {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Head::Logistic(h) => h.visit_params(&join(prefix, "logistic"), f),
            Head::Moe(h) => h.visit_params(&join(prefix, "moe"), f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_differences, relative_error, STEP};
    use crate::init;
    use alloc::string::String;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn multi_hot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[rows, cols], data).unwrap()
    }

    fn perturb(head: &mut Head, rng: &mut ChaCha8Rng) {
        head.visit_params("", &mut |_, p| {
            let noise = init::gaussian(rng, p.value.shape(), 0.5);
            p.value.add_assign(&noise).unwrap();
        });
    }

    /// Finite-difference check of every parameter and the input.
    fn check_head(mut head: Head, f: &Tensor, targets: &Tensor) -> f64 {
        let (_, cache) = head.loss(f, targets).unwrap();
        head.visit_params("", &mut |_, p| p.zero_grad());
        let df = head.backward(&cache, 1.0).unwrap();
        let mut worst: f64 = 0.0;
        let mut names = Vec::new();
        head.visit_params("", &mut |n, _| names.push(String::from(n)));
        for name in &names {
            let mut value = None;
            let mut grad = None;
            head.visit_params("", &mut |n, p| {
                if n == name {
                    value = Some(p.value.clone());
                    grad = Some(p.grad.clone());
                }
            });
            let (value, grad) = (value.unwrap(), grad.unwrap());
            let numeric = central_differences(value.data(), STEP, |w| {
                let mut h = head.clone();
                h.visit_params("", &mut |n, p| {
                    if n == name {
                        p.value.data_mut().copy_from_slice(w);
                    }
                });
                h.loss(f, targets).unwrap().0
            });
            worst = worst.max(relative_error(grad.data(), &numeric));
        }
        let numeric = central_differences(f.data(), STEP, |x| {
            let x = Tensor::new(f.shape(), x.to_vec()).unwrap();
            head.loss(&x, targets).unwrap().0
        });
        worst.max(relative_error(df.data(), &numeric))
    }

    #[test]
    fn zero_logistic_scores_half() {
        let head = Logistic::zeroed(4, 3);
        let s = logistic_predict(&Tensor::filled(&[2, 4], 0.7), &head).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn logistic_saturates_along_weight_direction() {
        let mut head = Logistic::zeroed(1, 1);
        head.linear.weight.value.data_mut()[0] = 1e4;
        let s = head.predict(&Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert!(1.0 - s.data()[0] < 1e-12);
    }

    #[test]
    fn zero_moe_scores_one_third() {
        let head = Moe::zeroed(4, 3, 2).unwrap();
        let s = moe_predict(&Tensor::filled(&[2, 4], -0.2), &head).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_forced_expert_reduces_to_logistic() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut moe = Moe::new(&mut r, 5, 4, 1).unwrap();
        moe.gate.weight.value.data_mut().fill(0.0);
        for c in 0..4 {
            moe.gate.bias.value.data_mut()[c * 2] = 800.0;
            moe.gate.bias.value.data_mut()[c * 2 + 1] = 0.0;
        }
        let logistic = Logistic { linear: moe.experts.clone() };
        let f = init::gaussian(&mut r, &[3, 5], 1.0);
        let a = moe.predict(&f).unwrap();
        let b = logistic.predict(&f).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn moe_scores_bounded_by_best_expert() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let moe = Moe::new(&mut r, 6, 5, 3).unwrap();
            let f = init::gaussian(&mut r, &[4, 6], 2.0);
            let (s, cache) = moe.forward(&f).unwrap();
            for b in 0..4 {
                for c in 0..5 {
                    let best = (0..3).map(|k| cache.experts.row(b)[c * 3 + k]).fold(0.0, f64::max);
                    let v = s.row(b)[c];
                    assert!((0.0..=best + 1e-15).contains(&v));
                }
            }
        }
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let head = Logistic::zeroed(4, 3);
        assert!(matches!(head.predict(&Tensor::zeros(&[1, 5])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn logistic_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut head = Head::Logistic(Logistic::new(&mut r, 4, 3));
            perturb(&mut head, &mut r);
            let f = init::gaussian(&mut r, &[3, 4], 1.0);
            let t = multi_hot(&mut r, 3, 3);
            let err = check_head(head, &f, &t);
            assert!(err < 1e-6, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn moe_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut r = ChaCha8Rng::seed_from_u64(200 + seed);
            let mut head = Head::Moe(Moe::new(&mut r, 4, 3, 2).unwrap());
            perturb(&mut head, &mut r);
            let f = init::gaussian(&mut r, &[3, 4], 1.0);
            let t = multi_hot(&mut r, 3, 3);
            let err = check_head(head, &f, &t);
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }
}
