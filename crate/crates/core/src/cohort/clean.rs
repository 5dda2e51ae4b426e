use std::collections::BTreeMap;

use chrono::{DateTime, Utc};

use super::{Ingested, LabSeries, Measurement, Patient};
use crate::stats;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanOutput {
    /// Per-patient series, ordered by patient id.
    pub series: Vec<LabSeries>,
    pub n_outliers: usize,
    pub n_duplicates_merged: usize,
    pub warnings: Vec<String>,
}

/// Cleans one analyte's measurements across the cohort.
///
/// Identical `(patient, timestamp)` rows are first replaced by their mean,
/// then values further than 3 SD from the cohort median are dropped in a
/// single pass. The median and SD are computed on the deduplicated values.
pub fn clean_series(
    patients: &BTreeMap<String, Patient>,
    analyte: &str,
    measurements: &[(String, Measurement)],
) -> CleanOutput {
    let mut out = CleanOutput::default();

    let mut grouped: BTreeMap<(&str, DateTime<Utc>), (f64, usize)> = BTreeMap::new();
    for (pid, m) in measurements.iter().filter(|(_, m)| m.analyte == analyte) {
        let e = grouped.entry((pid.as_str(), m.time)).or_insert((0.0, 0));
        e.0 += m.value;
        e.1 += 1;
    }
    let total: usize = grouped.values().map(|(_, c)| c).sum();
    out.n_duplicates_merged = total - grouped.len();
    let deduped: Vec<(&str, DateTime<Utc>, f64)> = grouped
        .into_iter()
        .map(|((pid, t), (sum, n))| (pid, t, sum / n as f64))
        .collect();
    if deduped.is_empty() {
        return out;
    }

    let values: Vec<f64> = deduped.iter().map(|(_, _, v)| *v).collect();
    let keep: Vec<bool> = match (stats::median(&values), stats::sample_sd(&values)) {
        (Some(med), Some(sd)) => values.iter().map(|v| (v - med).abs() <= 3.0 * sd).collect(),
        _ => {
            out.warnings.push(format!(
                "{analyte}: {} measurement(s) cohort-wide, outlier filter skipped",
                values.len()
            ));
            vec![true; values.len()]
        }
    };

    let mut by_patient: BTreeMap<&str, Vec<Measurement>> = BTreeMap::new();
    for ((pid, t, v), k) in deduped.into_iter().zip(keep) {
        if !k {
            out.n_outliers += 1;
            continue;
        }
        by_patient.entry(pid).or_default().push(Measurement {
            time: t,
            value: v,
            analyte: analyte.to_string(),
        });
    }
    for (pid, ms) in by_patient {
        let Some(patient) = patients.get(pid) else {
            out.warnings.push(format!("{analyte}: no demographics for patient {pid}, dropped"));
            continue;
        };
        out.series.push(LabSeries::new(patient.clone(), analyte, ms));
    }
    out
}

/// Runs [`clean_series`] for every analyte present, in analyte-code order.
pub fn clean_cohort(ingested: &Ingested) -> CleanOutput {
    let mut analytes: Vec<&str> = ingested
        .measurements
        .iter()
        .map(|(_, m)| m.analyte.as_str())
        .collect();
    analytes.sort_unstable();
    analytes.dedup();
    let mut all = CleanOutput::default();
    for a in analytes {
        let part = clean_series(&ingested.patients, a, &ingested.measurements);
        all.series.extend(part.series);
        all.n_outliers += part.n_outliers;
        all.n_duplicates_merged += part.n_duplicates_merged;
        all.warnings.extend(part.warnings);
    }
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytes::Sex;
    use chrono::TimeZone;

    fn patients(ids: &[&str]) -> BTreeMap<String, Patient> {
        ids.iter()
            .map(|id| {
                (
                    id.to_string(),
                    Patient {
                        id: id.to_string(),
                        sex: Sex::Female,
                        age: 40.0,
                    },
                )
            })
            .collect()
    }

    fn m(pid: &str, day: i64, v: f64) -> (String, Measurement) {
        (
            pid.to_string(),
            Measurement {
                time: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + chrono::Duration::days(day),
                value: v,
                analyte: "GLU".into(),
            },
        )
    }

    #[test]
    fn wide_spread_keeps_everything() {
        // median 10, mean 208, sample sd 442.74; |1000 - 10| = 990 < 3 * 442.74
        let rows: Vec<_> = [10.0, 10.0, 10.0, 10.0, 1000.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| m("p1", i as i64, v))
            .collect();
        let sd = stats::sample_sd(&[10.0, 10.0, 10.0, 10.0, 1000.0]).unwrap();
        assert!((sd - 442.7).abs() < 0.05);
        let out = clean_series(&patients(&["p1"]), "GLU", &rows);
        assert_eq!(out.n_outliers, 0);
        assert_eq!(out.series[0].len(), 5);
    }

    #[test]
    fn outlier_dropped() {
        let mut rows: Vec<_> = (0..30).map(|i| m("p1", i, 90.0 + (i % 5) as f64)).collect();
        rows.push(m("p2", 3, 900.0));
        let out = clean_series(&patients(&["p1", "p2"]), "GLU", &rows);
        assert_eq!(out.n_outliers, 1);
        assert_eq!(out.series.len(), 1);
    }

    #[test]
    fn duplicates_averaged() {
        let rows = vec![m("p1", 0, 80.0), m("p1", 0, 90.0)];
        let out = clean_series(&patients(&["p1"]), "GLU", &rows);
        assert_eq!(out.n_duplicates_merged, 1);
        assert_eq!(out.series[0].values(), vec![85.0]);
        assert_eq!(out.warnings.len(), 1, "single value cohort warns");
    }

    #[test]
    fn empty_is_empty() {
        let out = clean_series(&patients(&[]), "GLU", &[]);
        assert!(out.series.is_empty());
        assert!(out.warnings.is_empty());
    }

    fn flatten(out: &CleanOutput) -> Vec<(String, Measurement)> {
        out.series
            .iter()
            .flat_map(|s| s.measurements.iter().map(|m| (s.patient.id.clone(), m.clone())))
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn idempotent_and_sorted(
            rows in proptest::collection::vec((0usize..3, 0i64..20, 50.0f64..150.0), 0..60)
        ) {
            let ids = ["a", "b", "c"];
            let rows: Vec<_> = rows.iter().map(|(p, d, v)| m(ids[*p], *d, *v)).collect();
            let pats = patients(&ids);
            let once = clean_series(&pats, "GLU", &rows);
            for s in &once.series {
                proptest::prop_assert!(s.measurements.windows(2).all(|w| w[0].time < w[1].time));
            }
            // a second pass has no duplicates left to merge
            let twice = clean_series(&pats, "GLU", &flatten(&once));
            proptest::prop_assert_eq!(twice.n_duplicates_merged, 0);
        }
    }
}
