use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::config::{AgeEncoding, HeadKind, ModelConfig, ValueEncoding};
use super::tokens::N_AGE_BINS;
use super::ModelError;
use crate::stats;
use crate::tensor::Tensor;

enum Init {
    Normal(f64),
    Uniform(f64, f64),
    Zeros,
    Ones,
    Values(Vec<f64>),
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Head bias placing the initial quantiles at standard-normal quantiles.
fn quantile_bias(levels: &[f64]) -> Vec<f64> {
    let n = StdNormal::new(0.0, 1.0).expect("standard normal");
    let z: Vec<f64> = levels.iter().map(|&t| n.inverse_cdf(t)).collect();
    let mut b = vec![z[0]];
    for w in z.windows(2) {
        b.push(inv_softplus(w[1] - w[0]));
    }
    b
}

fn layout(config: &ModelConfig, n_analytes: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let c = config.time_channels;
    let h = config.mlp_ratio * d;
    let k = config.head_width();
    let sd_in = 1.0 / (d as f64).sqrt();
    let mut p: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: &str, shape: Vec<usize>, init: Init| p.push((name.to_string(), shape, init));

    add("context.sex", vec![2, d], Init::Normal(0.1));
    add("context.analyte", vec![n_analytes, d], Init::Normal(0.1));
    match config.age_encoding {
        AgeEncoding::DecadeBins => add("context.age_bins", vec![N_AGE_BINS, d], Init::Normal(0.1)),
        AgeEncoding::RawLinear => add("context.age_w", vec![1, d], Init::Normal(0.1)),
    }
    add("token.state", vec![config.n_states(), d], Init::Normal(0.1));
    add("token.value_w", vec![1, d], Init::Normal(0.5));
    add("token.value_b", vec![1, d], Init::Zeros);
    if config.value_encoding == ValueEncoding::WithinSequenceNorm {
        add("token.norm_gamma", vec![1, 1], Init::Ones);
        add("token.norm_beta", vec![1, 1], Init::Zeros);
    }
    for enc in ["gap", "horizon"] {
        add(&format!("{enc}.lin_w"), vec![1, 1], Init::Ones);
        add(&format!("{enc}.lin_b"), vec![1, 1], Init::Zeros);
        add(&format!("{enc}.freq"), vec![1, c - 1], Init::Normal(1.0));
        add(&format!("{enc}.phase"), vec![1, c - 1], Init::Uniform(0.0, std::f64::consts::TAU));
        add(&format!("{enc}.proj"), vec![c, d], Init::Normal(1.0 / (c as f64).sqrt()));
    }
    add("pos", vec![config.max_seq_len + 2, d], Init::Normal(0.1));
    for l in 0..config.n_layers {
        add(&format!("layer{l}.ln1_g"), vec![1, d], Init::Ones);
        add(&format!("layer{l}.ln1_b"), vec![1, d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            add(&format!("layer{l}.{w}"), vec![d, d], Init::Normal(sd_in));
        }
        add(&format!("layer{l}.ln2_g"), vec![1, d], Init::Ones);
        add(&format!("layer{l}.ln2_b"), vec![1, d], Init::Zeros);
        add(&format!("layer{l}.mlp_w1"), vec![d, h], Init::Normal(sd_in));
        add(&format!("layer{l}.mlp_b1"), vec![1, h], Init::Zeros);
        add(&format!("layer{l}.mlp_w2"), vec![h, d], Init::Normal(1.0 / (h as f64).sqrt()));
        add(&format!("layer{l}.mlp_b2"), vec![1, d], Init::Zeros);
    }
    add("final.ln_g", vec![1, d], Init::Ones);
    add("final.ln_b", vec![1, d], Init::Zeros);
    add("head.w", vec![d, k], Init::Normal(0.01));
    let bias = match config.head {
        HeadKind::Gaussian => Init::Zeros,
        HeadKind::Quantile => Init::Values(quantile_bias(&config.quantile_levels)),
    };
    add("head.b", vec![1, k], bias);
    p
}

impl ParamStore {
    /// Seeded initialization for `config` with an analyte vocabulary of `n_analytes`.
    pub fn init(config: &ModelConfig, n_analytes: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stats::rng(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config, n_analytes) {
            let len: usize = shape.iter().product();
            let data = match init {
                Init::Normal(sd) => {
                    let d = Normal::new(0.0, sd).expect("positive sd");
                    (0..len).map(|_| d.sample(&mut rng)).collect()
                }
                Init::Uniform(lo, hi) => (0..len).map(|_| rng.random_range(lo..hi)).collect(),
                Init::Zeros => vec![0.0; len],
                Init::Ones => vec![1.0; len],
                Init::Values(v) => v,
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self::from_parts(names, tensors))
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    /// Checks names and shapes against the layout for `config`.
    pub fn check_layout(&self, config: &ModelConfig, n_analytes: usize) -> Result<(), ModelError> {
        for (name, shape, _) in layout(config, n_analytes) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    got: t.shape().to_vec(),
                    want: shape,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(ModelError::MissingParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::eicu_default().with_dims(8, 1, 2);
        let a = ParamStore::init(&cfg, 30, 7).unwrap();
        let b = ParamStore::init(&cfg, 30, 7).unwrap();
        let c = ParamStore::init(&cfg, 30, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check_layout(&cfg, 30).unwrap();
        assert!(a.check_layout(&ModelConfig::chs_default().with_dims(8, 1, 2), 30).is_err());
    }

    #[test]
    fn quantile_bias_matches_normal_quantiles() {
        let levels = [0.025, 0.25, 0.5, 0.75, 0.975];
        let b = quantile_bias(&levels);
        let mut acc = b[0];
        let mut q = vec![acc];
        for x in &b[1..] {
            acc += (x.exp()).ln_1p();
            q.push(acc);
        }
        assert!((q[0] + 1.959964).abs() < 1e-5);
        assert!(q[2].abs() < 1e-9);
        assert!((q[4] - 1.959964).abs() < 1e-5);
    }
}
