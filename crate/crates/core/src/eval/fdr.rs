/// Benjamini-Hochberg step-up adjusted p-values, in input order.
pub fn bh_fdr(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        // the largest p is its own adjustment; p * m / m can round below p
        let v = if rank + 1 == m { p[i] } else { p[i] * m as f64 / (rank + 1) as f64 };
        running = running.min(v);
        adj[i] = running.min(1.0);
    }
    adj
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(bh_fdr(&[0.04]), vec![0.04]);
        let a = bh_fdr(&[0.01, 0.02, 0.03]);
        assert!(a.iter().all(|v| (v - 0.03).abs() < 1e-15));
        assert_eq!(bh_fdr(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
        assert!(bh_fdr(&[]).is_empty());
    }

    #[test]
    fn closed_form_unordered() {
        // sorted p: 0.001, 0.01, 0.04, 0.2 -> raw 0.004, 0.02, 0.05333, 0.2
        let a = bh_fdr(&[0.2, 0.01, 0.04, 0.001]);
        let want = [0.2, 0.02, 0.04 * 4.0 / 3.0, 0.004];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn monotone_and_bounded(p in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let a = bh_fdr(&p);
            for i in 0..p.len() {
                proptest::prop_assert!(a[i] >= p[i] && a[i] <= 1.0);
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        proptest::prop_assert!(a[i] <= a[j]);
                    }
                }
            }
        }
    }
}
