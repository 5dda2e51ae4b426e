use crate::tensor::{Tape, TensorError, Var};

/// `0.5 * (log_var + (x - mu)^2 / exp(log_var))`, without the `0.5 ln 2pi` constant.
pub fn gaussian_nll(mu: f64, log_var: f64, x: f64) -> f64 {
    let r = x - mu;
    0.5 * (log_var + r * r / log_var.exp())
}

/// Unweighted sum over levels of `tau * max(0, x - q) + (1 - tau) * max(0, q - x)`.
pub fn pinball_loss(levels: &[f64], quantiles: &[f64], x: f64) -> f64 {
    levels
        .iter()
        .zip(quantiles)
        .map(|(&tau, &q)| tau * (x - q).max(0.0) + (1.0 - tau) * (q - x).max(0.0))
        .sum()
}

/// Tape form of [`gaussian_nll`] for a `[1, 2]` head output `[mu, log_var]`.
pub fn gaussian_nll_tape(tape: &mut Tape, head: Var, x: f64) -> Result<Var, TensorError> {
    let mu = tape.slice_cols(head, 0, 1)?;
    let lv = tape.slice_cols(head, 1, 2)?;
    let r = tape.scale(mu, -1.0)?;
    let r = tape.offset(r, x)?;
    let r2 = tape.mul(r, r)?;
    let neg = tape.scale(lv, -1.0)?;
    let prec = tape.exp(neg)?;
    let t = tape.mul(r2, prec)?;
    let s = tape.add(lv, t)?;
    tape.scale(s, 0.5)
}

/// Tape form of [`pinball_loss`].
pub fn pinball_loss_tape(tape: &mut Tape, quantiles: Var, x: f64, levels: &[f64]) -> Result<Var, TensorError> {
    tape.pinball(quantiles, x, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn tape_forms_agree() {
        let mut t = Tape::new();
        let h = t.param(Tensor::row(vec![0.3, -0.4]));
        let l = gaussian_nll_tape(&mut t, h, 1.7).unwrap();
        assert!((t.value(l).item() - gaussian_nll(0.3, -0.4, 1.7)).abs() < 1e-14);
        let g = t.backward(l).unwrap().get(h);
        // d/dmu = -(x - mu) / var, d/dlv = 0.5 (1 - r^2 / var)
        let var = (-0.4f64).exp();
        assert!((g.data()[0] + 1.4 / var).abs() < 1e-12);
        assert!((g.data()[1] - 0.5 * (1.0 - 1.96 / var)).abs() < 1e-12);
    }
}
