mod common;

use std::collections::BTreeSet;

use anchor_moe::dataset::{load_csv, make_split_plan, Matrix, MissingPolicy, Schema, SplitFractions, TargetColumn};
use anchor_moe::gbdt::{best_split, fit_gbdt, predict_anchor, GbdtConfig};
use anchor_moe::Error;
use proptest::prelude::*;

#[test]
fn boston_file_shape() {
    let t = load_csv(common::data_dir().join("boston.csv"), &Schema::default()).unwrap();
    assert_eq!((t.n_rows(), t.n_features()), (506, 13));
    assert_eq!(t.target[0], 24.0);
    assert_eq!(t.features.get(0, 12), 4.98);
    assert_eq!(t.column_names[0], "crim");
}

#[test]
fn concrete_target_by_name_matches_last() {
    let path = common::data_dir().join("concrete.csv");
    let last = load_csv(&path, &Schema::default()).unwrap();
    let named = load_csv(
        &path,
        &Schema {
            target: TargetColumn::Name("compressive_strength".into()),
            ..Schema::default()
        },
    )
    .unwrap();
    assert_eq!(last.target, named.target);
    assert_eq!(last.n_rows(), 1030);
}

/// Writes `text` followed by clean filler rows so the file clears the
/// loader's minimum row count.
fn write(text: &str, filler: &str) -> tempfile::NamedTempFile {
    let f = tempfile::NamedTempFile::new().unwrap();
    let mut body = text.to_string();
    for _ in 0..10 {
        body.push_str(filler);
    }
    std::fs::write(f.path(), body).unwrap();
    f
}

#[test]
fn malformed_files_are_rejected() {
    let ragged = write("a,b,y\n1,2,3\n4,5\n", "7,8,9\n");
    assert!(matches!(load_csv(ragged.path(), &Schema::default()), Err(Error::InvalidData(m)) if m.contains("cells")));

    let gap = write("a,b,y\n1,?,3\n4,5,6\n", "7,8,9\n");
    assert!(matches!(load_csv(gap.path(), &Schema::default()), Err(Error::MissingValue { row: 0, .. })));
    let filled = load_csv(
        gap.path(),
        &Schema {
            missing: MissingPolicy::Constant(-1.0),
            ..Schema::default()
        },
    )
    .unwrap();
    assert_eq!(filled.features.get(0, 1), -1.0);

    let words = write("a,b,y\n1,red,3\n4,blue,6\n", "7,red,9\n");
    assert!(matches!(load_csv(words.path(), &Schema::default()), Err(Error::NonNumeric { .. })));

    let no_target = Schema {
        target: TargetColumn::Name("price".into()),
        ..Schema::default()
    };
    assert!(matches!(load_csv(gap.path(), &no_target), Err(Error::MissingTarget(_))));
    assert!(matches!(load_csv("/nonexistent/x.csv", &Schema::default()), Err(Error::Io { .. })));
}

#[test]
fn categorical_columns_expand() {
    let f = write("a,colour,y\n1,red,3\n4,blue,6\n", "5,green,7\n");
    let t = load_csv(
        f.path(),
        &Schema {
            categorical: vec!["colour".into()],
            ..Schema::default()
        },
    )
    .unwrap();
    assert_eq!(t.n_features(), 4);
    for i in 0..t.n_rows() {
        let one_hot: f64 = (1..4).map(|j| t.features.get(i, j)).sum();
        assert_eq!(one_hot, 1.0);
    }
}

proptest! {
    #[test]
    fn split_plan_partitions_rows(n in 10usize..3000, seed in any::<u64>()) {
        let f = SplitFractions::default();
        let plan = make_split_plan(n, seed, &f).unwrap();
        let all: Vec<usize> = plan.test_idx.iter().chain(&plan.cal_idx).chain(&plan.tv_idx).copied().collect();
        let set: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(set.len(), n);
        prop_assert_eq!(*set.iter().next_back().unwrap(), n - 1);
        let tv: BTreeSet<usize> = plan.tr_idx.iter().chain(&plan.va_idx).copied().collect();
        prop_assert_eq!(tv.len(), plan.tr_idx.len() + plan.va_idx.len());
        prop_assert_eq!(tv, plan.tv_idx.iter().copied().collect::<BTreeSet<_>>());
        let n_test = (0.1 * n as f64).floor() as usize;
        prop_assert_eq!(plan.test_idx.len(), n_test);
        prop_assert_eq!(plan.cal_idx.len(), (0.1 * (n - n_test) as f64).floor() as usize);
        prop_assert_eq!(make_split_plan(n, seed, &f).unwrap(), plan);
    }
}

fn sse(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Largest SSE reduction over every feature and every threshold, by
/// partitioning the rows directly.
fn brute_force_gain(x: &Matrix, y: &[f64], min_leaf: usize) -> Option<f64> {
    let parent = sse(y);
    let mut best: Option<f64> = None;
    for f in 0..x.cols() {
        let mut vals: Vec<f64> = (0..x.rows()).map(|i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = (0..x.rows()).partition(|&i| x.get(i, f) <= thr);
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let yl: Vec<f64> = l.iter().map(|&i| y[i]).collect();
            let yr: Vec<f64> = r.iter().map(|&i| y[i]).collect();
            let g = parent - sse(&yl) - sse(&yr);
            best = Some(best.map_or(g, |b: f64| b.max(g)));
        }
    }
    best
}

fn small_problem() -> impl Strategy<Value = (Matrix, Vec<f64>)> {
    (4usize..30, 1usize..4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(-3i32..4, n * d),
            prop::collection::vec(-10.0f64..10.0, n),
        )
            .prop_map(move |(xs, y)| (Matrix::from_vec(n, d, xs.into_iter().map(f64::from).collect()).unwrap(), y))
    })
}

proptest! {
    #[test]
    fn best_split_matches_brute_force((x, y) in small_problem(), min_leaf in 1usize..4) {
        let rows: Vec<usize> = (0..x.rows()).collect();
        let fast = best_split(&x, &y, &rows, min_leaf);
        let slow = brute_force_gain(&x, &y, min_leaf);
        prop_assert_eq!(fast.is_some(), slow.is_some());
        if let (Some(s), Some(g)) = (fast, slow) {
            prop_assert!((s.gain - g).abs() <= 1e-9 * (1.0 + g.abs()), "{} vs {}", s.gain, g);
            // The reported threshold realizes the reported gain.
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, s.feature) <= s.threshold);
            let yl: Vec<f64> = l.iter().map(|&i| y[i]).collect();
            let yr: Vec<f64> = r.iter().map(|&i| y[i]).collect();
            prop_assert!((sse(&y) - sse(&yl) - sse(&yr) - g).abs() <= 1e-9 * (1.0 + g.abs()));
        }
    }

    #[test]
    fn boosting_never_raises_training_error((x, y) in small_problem(), shrinkage in 0.05f64..1.0) {
        let cfg = GbdtConfig { max_stages: 15, min_leaf: 1, shrinkage, ..GbdtConfig::default() };
        let m = fit_gbdt(&x, &y, &cfg).unwrap();
        let staged = m.staged_predict(&x).unwrap();
        let mse = |p: &[f64]| p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        for w in staged.windows(2) {
            prop_assert!(mse(&w[1]) <= mse(&w[0]) + 1e-9);
        }
        for t in [0, m.n_stages / 2, m.n_stages] {
            prop_assert_eq!(&predict_anchor(&m.truncated(t), &x).unwrap(), &staged[t]);
        }
    }
}

#[test]
fn one_full_stage_recovers_a_step() {
    let x = Matrix::from_vec(20, 1, (0..20).map(f64::from).collect()).unwrap();
    let y: Vec<f64> = (0..20).map(|i| if i < 7 { -2.0 } else { 5.0 }).collect();
    let cfg = GbdtConfig {
        max_stages: 1,
        max_depth: 1,
        shrinkage: 1.0,
        min_leaf: 1,
        ..GbdtConfig::default()
    };
    let m = fit_gbdt(&x, &y, &cfg).unwrap();
    let p = predict_anchor(&m, &x).unwrap();
    for (a, b) in p.iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
    let probe = Matrix::from_vec(2, 1, vec![6.4, 6.6]).unwrap();
    let q = predict_anchor(&m, &probe).unwrap();
    assert!((q[0] + 2.0).abs() < 1e-12 && (q[1] - 5.0).abs() < 1e-12);
}
