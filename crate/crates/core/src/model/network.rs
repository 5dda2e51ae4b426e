use super::config::{AgeEncoding, ContextToken, HeadKind, ModelConfig, ValueEncoding};
use super::params::ParamStore;
use super::predict::PredictiveDistribution;
use super::tokens::TokenSequence;
use super::ModelError;
use crate::tensor::{Mask, Tape, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

/// Parameters registered on one tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Registers every parameter; `trainable` controls whether gradients flow to them.
    pub fn new(tape: &mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        let vars = store.tensors().iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Self { store, vars }
    }

    /// Uses vars already on the tape, one per parameter in store order.
    pub fn from_vars(store: &'a ParamStore, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != store.len() {
            return Err(ModelError::Config(format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Self { store, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn column(values: &[f64]) -> Result<Tensor, TensorError> {
    Tensor::matrix(values.len(), 1, values.to_vec())
}

/// Linear channel plus learned sinusoids of a scalar input, projected to `d_model`.
fn time_encoder(tape: &mut Tape, b: &Bound, prefix: &str, input: &[f64]) -> Result<Var, ModelError> {
    let tau = tape.constant(column(input)?);
    let lin = tape.matmul(tau, b.get(&format!("{prefix}.lin_w"))?)?;
    let lin = tape.add_row(lin, b.get(&format!("{prefix}.lin_b"))?)?;
    let per = tape.matmul(tau, b.get(&format!("{prefix}.freq"))?)?;
    let per = tape.add_row(per, b.get(&format!("{prefix}.phase"))?)?;
    let per = tape.sin(per)?;
    let feat = tape.concat_cols(&[lin, per])?;
    Ok(tape.matmul(feat, b.get(&format!("{prefix}.proj"))?)?)
}

fn affine_norm(tape: &mut Tape, x: Var, g: Var, b: Var) -> Result<Var, TensorError> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let n = tape.mul_row(n, g)?;
    tape.add_row(n, b)
}

fn embed(tape: &mut Tape, b: &Bound, tokens: &TokenSequence, config: &ModelConfig) -> Result<Var, ModelError> {
    // context: sex + age + analyte
    let sex = tape.embedding(b.get("context.sex")?, &[tokens.sex])?;
    let analyte = tape.embedding(b.get("context.analyte")?, &[tokens.analyte_id])?;
    let age = match config.age_encoding {
        AgeEncoding::DecadeBins => tape.embedding(b.get("context.age_bins")?, &[tokens.age_bin])?,
        AgeEncoding::RawLinear => {
            let a = tape.constant(Tensor::scalar(tokens.age));
            tape.matmul(a, b.get("context.age_w")?)?
        }
    };
    let zc = tape.add(sex, age)?;
    let zc = tape.add(zc, analyte)?;

    // history: value + state + elapsed time
    let values: Vec<f64> = tokens.history.iter().map(|h| h.value).collect();
    let mut x = tape.constant(column(&values)?);
    if config.value_encoding == ValueEncoding::WithinSequenceNorm {
        x = tape.matmul(x, b.get("token.norm_gamma")?)?;
        x = tape.add_row(x, b.get("token.norm_beta")?)?;
    }
    let fv = tape.matmul(x, b.get("token.value_w")?)?;
    let fv = tape.add_row(fv, b.get("token.value_b")?)?;
    let states: Vec<usize> = tokens.history.iter().map(|h| h.state).collect();
    let es = tape.embedding(b.get("token.state")?, &states)?;
    let times: Vec<f64> = tokens.history.iter().map(|h| h.time).collect();
    let ft = time_encoder(tape, b, "gap", &times)?;
    let hist = tape.add(fv, es)?;
    let mut hist = tape.add(hist, ft)?;

    // query: requested state + horizon
    let qs = tape.embedding(b.get("token.state")?, &[tokens.query_state_index])?;
    let fh = time_encoder(tape, b, "horizon", &[tokens.horizon])?;
    let query = tape.add(qs, fh)?;

    let seq = match config.context_token {
        ContextToken::Dedicated => tape.concat_rows(&[zc, hist, query])?,
        ContextToken::MergedIntoFirst => {
            hist = tape.add_row(hist, zc)?;
            tape.concat_rows(&[hist, query])?
        }
    };
    // recency positions: the query is 0, the latest measurement 1, ...
    let len = tape.value(seq).rows();
    let pos: Vec<usize> = (0..len).rev().collect();
    let pe = tape.embedding(b.get("pos")?, &pos)?;
    Ok(tape.add(seq, pe)?)
}

fn block(tape: &mut Tape, b: &Bound, l: usize, x: Var, config: &ModelConfig) -> Result<Var, ModelError> {
    let p = |n: &str| b.get(&format!("layer{l}.{n}"));
    let d = config.d_model;
    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let h = affine_norm(tape, x, p("ln1_g")?, p("ln1_b")?)?;
    let q = tape.matmul(h, p("wq")?)?;
    let k = tape.matmul(h, p("wk")?)?;
    let v = tape.matmul(h, p("wv")?)?;
    let mut heads = Vec::with_capacity(config.n_heads);
    for i in 0..config.n_heads {
        let (a, z) = (i * dh, (i + 1) * dh);
        let qh = tape.slice_cols(q, a, z)?;
        let kh = tape.slice_cols(k, a, z)?;
        let vh = tape.slice_cols(v, a, z)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let w = tape.softmax_masked(s, Mask::Causal)?;
        heads.push(tape.matmul(w, vh)?);
    }
    let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let att = tape.matmul(att, p("wo")?)?;
    let x = tape.add(x, att)?;

    let h = affine_norm(tape, x, p("ln2_g")?, p("ln2_b")?)?;
    let m = tape.matmul(h, p("mlp_w1")?)?;
    let m = tape.add_row(m, p("mlp_b1")?)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, p("mlp_w2")?)?;
    let m = tape.add_row(m, p("mlp_b2")?)?;
    Ok(tape.add(x, m)?)
}

fn tag_layer(layer: usize) -> impl Fn(ModelError) -> ModelError {
    move |e| match e {
        ModelError::Tensor(source @ TensorError::NonFinite { .. }) => ModelError::NonFiniteLayer { layer, source },
        other => other,
    }
}

fn encode(tape: &mut Tape, b: &Bound, config: &ModelConfig, tokens: &TokenSequence) -> Result<Var, ModelError> {
    if tokens.history.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    let mut x = embed(tape, b, tokens, config).map_err(tag_layer(0))?;
    for l in 0..config.n_layers {
        x = block(tape, b, l, x, config).map_err(tag_layer(l + 1))?;
    }
    Ok(x)
}

/// Records the model on `tape` and returns the head output at the query
/// position in model space: `[mu, log_var]` for the Gaussian head, or the
/// non-decreasing quantile values (base plus cumulative softplus
/// increments) for the quantile head.
pub fn forward_tape(tape: &mut Tape, b: &Bound, config: &ModelConfig, tokens: &TokenSequence) -> Result<Var, ModelError> {
    let x = encode(tape, b, config, tokens)?;
    let layer = config.n_layers + 1;
    let head = (|| -> Result<Var, ModelError> {
        let len = tape.value(x).rows();
        let last = tape.slice_rows(x, len - 1, len)?;
        let h = affine_norm(tape, last, b.get("final.ln_g")?, b.get("final.ln_b")?)?;
        let out = tape.matmul(h, b.get("head.w")?)?;
        let out = tape.add_row(out, b.get("head.b")?)?;
        match config.head {
            HeadKind::Gaussian => Ok(out),
            HeadKind::Quantile => {
                let k = config.quantile_levels.len();
                let base = tape.slice_cols(out, 0, 1)?;
                let inc = tape.slice_cols(out, 1, k)?;
                let inc = tape.softplus(inc)?;
                let steps = tape.concat_cols(&[base, inc])?;
                let mut tri = Tensor::zeros(k, k);
                for i in 0..k {
                    for j in i..k {
                        tri.data_mut()[i * k + j] = 1.0;
                    }
                }
                let tri = tape.constant(tri);
                Ok(tape.matmul(steps, tri)?)
            }
        }
    })();
    head.map_err(tag_layer(layer))
}

/// Hidden states after the last decoder block, one row per token.
pub fn forward_hidden(params: &ParamStore, config: &ModelConfig, tokens: &TokenSequence) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, false);
    let x = encode(&mut tape, &b, config, tokens)?;
    Ok(tape.value(x).clone())
}

/// Inference: predictive distribution in the analyte's canonical unit.
pub fn forward(params: &ParamStore, config: &ModelConfig, tokens: &TokenSequence) -> Result<PredictiveDistribution, ModelError> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, false);
    let out = forward_tape(&mut tape, &b, config, tokens)?;
    Ok(PredictiveDistribution::from_head(config, tokens, tape.value(out).data()))
}
