use super::{Tape, Tensor, TensorError, Var};

/// One compared coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    /// Coordinates skipped by the caller's exclusion predicate.
    pub excluded: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares reverse-mode gradients against central differences with step `h`.
///
/// `f` records a scalar loss from the given inputs, all registered as
/// parameters. `exclude(input, index, value)` lets the caller skip
/// coordinates sitting on a kink. The relative error uses a
/// `max(1, |g|)` denominator.
pub fn gradient_check<F, X>(f: F, inputs: &[Tensor], h: f64, exclude: X) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
    X: Fn(usize, usize, f64) -> bool,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    let mut excluded = 0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            if exclude(i, j, x0) {
                excluded += 1;
                continue;
            }
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[j];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            entries.push(GradEntry {
                input: i,
                index: j,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(GradCheckReport { entries, excluded })
}
