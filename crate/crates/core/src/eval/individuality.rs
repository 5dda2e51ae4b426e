use serde::{Deserialize, Serialize};

use super::{bootstrap_ci, EvalError};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individuality {
    pub cv_intra: f64,
    pub cv_inter: f64,
    /// Infinite when patient means do not vary.
    pub ii: f64,
    pub cv_intra_ci: Option<(f64, f64)>,
    pub cv_inter_ci: Option<(f64, f64)>,
    pub ii_ci: Option<(f64, f64)>,
    pub n_patients: usize,
    /// Patients dropped for a non-positive mean.
    pub excluded: usize,
}

struct PatientStats {
    cv: f64,
    mean: f64,
}

fn summarize(ps: &[&PatientStats]) -> Option<(f64, f64, f64)> {
    if ps.len() < 2 {
        return None;
    }
    let cvs: Vec<f64> = ps.iter().map(|p| p.cv).collect();
    let means: Vec<f64> = ps.iter().map(|p| p.mean).collect();
    let cv_intra = stats::median(&cvs)?;
    let cv_inter = stats::sample_sd(&means)? / stats::mean(&means)?;
    let ii = if cv_inter > 0.0 {
        cv_intra / cv_inter
    } else if cv_intra == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Some((cv_intra, cv_inter, ii))
}

/// Within- over between-person coefficient of variation for one analyte.
/// `series` holds each patient's values; patients with fewer than two values
/// are ignored. CIs come from a patient-level bootstrap.
pub fn individuality_index<S: AsRef<[f64]>>(series: &[S], resamples: usize, seed: u64) -> Result<Individuality, EvalError> {
    let mut excluded = 0;
    let mut ps = Vec::new();
    for s in series {
        let v = s.as_ref();
        if v.len() < 2 {
            continue;
        }
        let (Some(m), Some(sd)) = (stats::mean(v), stats::sample_sd(v)) else {
            continue;
        };
        if !(m > 0.0) {
            excluded += 1;
            continue;
        }
        ps.push(PatientStats { cv: sd / m, mean: m });
    }
    if excluded > 0 {
        log::warn!("individuality index: {excluded} patients with non-positive mean excluded");
    }
    let all: Vec<&PatientStats> = ps.iter().collect();
    let (cv_intra, cv_inter, ii) =
        summarize(&all).ok_or_else(|| EvalError::TooFew("need two patients with two measurements each".into()))?;
    let boot = |pick: fn((f64, f64, f64)) -> f64| {
        bootstrap_ci(ps.len(), resamples, seed, |idx| {
            let sample: Vec<&PatientStats> = idx.iter().map(|&i| &ps[i]).collect();
            summarize(&sample).map(pick)
        })
    };
    Ok(Individuality {
        cv_intra,
        cv_inter,
        ii,
        cv_intra_ci: boot(|t| t.0),
        cv_inter_ci: boot(|t| t.1),
        ii_ci: boot(|t| t.2),
        n_patients: ps.len(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_patients_at_distinct_levels() {
        let s = vec![vec![10.0; 4], vec![20.0; 4], vec![30.0; 4]];
        let r = individuality_index(&s, 50, 1).unwrap();
        assert_eq!(r.cv_intra, 0.0);
        assert_eq!(r.ii, 0.0);
    }

    #[test]
    fn shared_mean_gives_infinite_marker() {
        let s = vec![vec![9.0, 11.0], vec![11.0, 9.0]];
        let r = individuality_index(&s, 50, 1).unwrap();
        assert_eq!(r.cv_inter, 0.0);
        assert!(r.ii.is_infinite());
    }

    #[test]
    fn plug_in_ratio_recovered() {
        let mut rng = stats::rng(21);
        let between = Normal::new(100.0, 10.0).unwrap();
        let noise = Normal::new(0.0, 2.0).unwrap();
        let s: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let sp = between.sample(&mut rng);
                (0..50).map(|_| sp + noise.sample(&mut rng)).collect()
            })
            .collect();
        let r = individuality_index(&s, 200, 2).unwrap();
        assert!((r.ii - 0.2).abs() < 0.05, "{}", r.ii);
        let (lo, hi) = r.ii_ci.unwrap();
        assert!(lo <= r.ii && r.ii <= hi);
    }

    #[test]
    fn non_positive_means_excluded() {
        let s = vec![vec![-1.0, -2.0], vec![10.0, 12.0], vec![20.0, 21.0]];
        let r = individuality_index(&s, 10, 1).unwrap();
        assert_eq!((r.n_patients, r.excluded), (2, 1));
        assert!(individuality_index(&[vec![1.0, 2.0]], 10, 1).is_err());
    }
}
