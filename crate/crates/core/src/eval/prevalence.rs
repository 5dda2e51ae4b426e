use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cohort::days_between;
use crate::ri::{ThreeWayFlags, Framework};
use crate::stats;

/// One classified index test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagRecord {
    pub patient_id: String,
    pub analyte: String,
    pub time: DateTime<Utc>,
    pub value: f64,
    pub flags: ThreeWayFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    /// Tests carrying every framework that occurs in the input.
    pub n_tests: usize,
    pub n_pop_normal: usize,
    /// Abnormal fraction per framework.
    pub prevalence: BTreeMap<Framework, f64>,
    /// Among population-normal tests, fraction flagged abnormal (per and norma only).
    pub reclassification: BTreeMap<Framework, Option<f64>>,
}

/// Prevalence is computed on the tests that carry every framework present
/// anywhere in `records`, so the frameworks are compared on the same tests.
pub fn prevalence_reclassification(records: &[FlagRecord]) -> Result<Prevalence, EvalError> {
    let has_per = records.iter().any(|r| r.flags.per.is_some());
    let has_norma = records.iter().any(|r| r.flags.norma.is_some());
    let used: Vec<&ThreeWayFlags> = records
        .iter()
        .map(|r| &r.flags)
        .filter(|f| (!has_per || f.per.is_some()) && (!has_norma || f.norma.is_some()))
        .collect();
    if used.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = used.len();
    let pop_normal: Vec<&&ThreeWayFlags> = used.iter().filter(|f| !f.pop.is_abnormal()).collect();
    let mut prevalence = BTreeMap::new();
    let mut reclassification = BTreeMap::new();
    let frac = |k: usize, d: usize| k as f64 / d as f64;
    prevalence.insert(Framework::Pop, frac(used.iter().filter(|f| f.pop.is_abnormal()).count(), n));
    let mut other = |fw: Framework, get: fn(&ThreeWayFlags) -> bool| {
        prevalence.insert(fw, frac(used.iter().filter(|f| get(f)).count(), n));
        let r = (!pop_normal.is_empty()).then(|| frac(pop_normal.iter().filter(|f| get(f)).count(), pop_normal.len()));
        reclassification.insert(fw, r);
    };
    if has_per {
        other(Framework::Per, |f| f.per.is_some_and(|x| x.is_abnormal()));
    }
    if has_norma {
        other(Framework::Norma, |f| f.norma.is_some_and(|x| x.is_abnormal()));
    }
    Ok(Prevalence {
        n_tests: n,
        n_pop_normal: pop_normal.len(),
        prevalence,
        reclassification,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTime {
    /// Tests abnormal under the model interval while population-normal.
    pub n_flags: usize,
    pub n_confirmed: usize,
    /// Days; `None` without confirmed flags.
    pub median_days: Option<f64>,
    pub q1_days: Option<f64>,
    pub q3_days: Option<f64>,
    pub leads_days: Vec<f64>,
}

/// For every model-only flag, the time to the first strictly later
/// population-abnormal test of the same patient and analyte.
pub fn lead_time(records: &[FlagRecord]) -> LeadTime {
    let mut groups: BTreeMap<(&str, &str), Vec<&FlagRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.patient_id, &r.analyte)).or_default().push(r);
    }
    let mut n_flags = 0;
    let mut leads = Vec::new();
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.time);
        for (i, r) in g.iter().enumerate() {
            let model_only = !r.flags.pop.is_abnormal() && r.flags.norma.is_some_and(|f| f.is_abnormal());
            if !model_only {
                continue;
            }
            n_flags += 1;
            if let Some(c) = g[i + 1..].iter().find(|c| c.time > r.time && c.flags.pop.is_abnormal()) {
                leads.push(days_between(r.time, c.time));
            }
        }
    }
    let q = |p| stats::quantile(&leads, p);
    LeadTime {
        n_flags,
        n_confirmed: leads.len(),
        median_days: q(0.5),
        q1_days: q(0.25),
        q3_days: q(0.75),
        leads_days: leads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ri::Flag;
    use chrono::{Duration, TimeZone};

    fn rec(pid: &str, day: i64, pop: bool, per: Option<bool>, norma: Option<bool>) -> FlagRecord {
        let f = |a: bool| if a { Flag::Abnormal } else { Flag::Normal };
        FlagRecord {
            patient_id: pid.into(),
            analyte: "GLU".into(),
            time: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap() + Duration::days(day),
            value: 1.0,
            flags: ThreeWayFlags {
                pop: f(pop),
                per: per.map(f),
                norma: norma.map(f),
            },
        }
    }

    #[test]
    fn hand_counted() {
        let mut rs = Vec::new();
        for i in 0..100 {
            let pop = i < 30;
            let per = pop || i < 30 + 17;
            rs.push(rec(&format!("p{i}"), 0, pop, Some(per), None));
        }
        let p = prevalence_reclassification(&rs).unwrap();
        assert!((p.prevalence[&Framework::Per] - 0.47).abs() < 1e-12);
        assert!((p.reclassification[&Framework::Per].unwrap() - 17.0 / 70.0).abs() < 1e-12);
        assert!((p.prevalence[&Framework::Pop] - 0.30).abs() < 1e-12);
    }

    #[test]
    fn identical_intervals_do_not_reclassify() {
        let rs: Vec<_> = (0..10).map(|i| rec("a", i, i % 3 == 0, Some(i % 3 == 0), None)).collect();
        let p = prevalence_reclassification(&rs).unwrap();
        assert_eq!(p.reclassification[&Framework::Per], Some(0.0));
        assert!(prevalence_reclassification(&[]).is_err());
    }

    #[test]
    fn lead_examples() {
        let lt = lead_time(&[rec("a", 0, false, None, Some(true)), rec("a", 300, true, None, Some(true))]);
        assert_eq!((lt.n_flags, lt.n_confirmed), (1, 1));
        assert_eq!(lt.median_days, Some(300.0));

        let lt = lead_time(&[rec("a", 0, false, None, Some(true)), rec("a", 30, false, None, Some(false))]);
        assert_eq!((lt.n_flags, lt.n_confirmed, lt.median_days), (1, 0, None));
    }

    #[test]
    fn lead_quartiles() {
        let mut rs = Vec::new();
        for (p, lead) in [("a", 2), ("b", 10), ("c", 30)] {
            rs.push(rec(p, 0, false, None, Some(true)));
            rs.push(rec(p, lead, true, None, Some(true)));
        }
        let lt = lead_time(&rs);
        assert_eq!(lt.median_days, Some(10.0));
        assert_eq!((lt.q1_days, lt.q3_days), (Some(2.0), Some(30.0)));
    }

    #[test]
    fn inserting_pop_normal_tests_keeps_leads() {
        let base = vec![rec("a", 0, false, None, Some(true)), rec("a", 200, true, None, Some(true))];
        let mut more = base.clone();
        more.push(rec("a", 50, false, None, Some(false)));
        more.push(rec("a", 120, false, None, Some(false)));
        assert_eq!(lead_time(&base), lead_time(&more));
    }
}
