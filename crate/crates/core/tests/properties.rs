use proptest::collection::vec;
use proptest::prelude::*;

use roadsig::cnn::{loss, softmax, CnnArch, CnnModel, Mode, TrainConfig};
use roadsig::drive::Drive;
use roadsig::eval::{metrics, MetricsReport};
use roadsig::features::{self, extract};
use roadsig::forest::{fit_forest, ForestConfig};
use roadsig::par::Parallelism;
use roadsig::positioning::run_labels;
use roadsig::preprocess::{rotation_to_vertical, FilterSpec};
use roadsig::route::RouteModel;
use roadsig::types::{ImuSample, Position, ProcessedWindow, SegmentId};

fn window() -> impl Strategy<Value = ProcessedWindow> {
    (vec(-1.0f64..1.0, 240), -3.0f64..2.0).prop_map(|(v, log_scale)| {
        let s = 10f64.powf(log_scale);
        let mut w = ProcessedWindow::zeros();
        w.0.iter_mut().flatten().zip(v).for_each(|(x, y)| *x = s * y);
        w
    })
}

fn polyline() -> impl Strategy<Value = Vec<Position>> {
    vec((5.0f64..200.0, -1.2f64..1.2), 1..8).prop_map(|legs| {
        let mut p = Position::new(0.0, 0.0);
        let mut heading = 0.0;
        let mut out = vec![p];
        for (len, turn) in legs {
            heading += turn;
            p = Position::new(p.x + len * f64::cos(heading), p.y + len * f64::sin(heading));
            out.push(p);
        }
        out
    })
}

fn straight(n: usize) -> RouteModel {
    RouteModel::build(vec![Position::new(0.0, 0.0), Position::new(100.0 * n as f64, 0.0)], n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn midpoints_label_to_their_segment(poly in polyline(), n in 1usize..30) {
        let length: f64 = poly.windows(2).map(|w| w[0].distance(&w[1])).sum();
        let Ok(route) = RouteModel::build(poly, n) else {
            // Segments under 1 m are rejected by design.
            prop_assert!(length / (n as f64) < 1.0 + 1e-9);
            return Ok(());
        };
        for k in 0..n {
            let s = SegmentId::from_index(k);
            prop_assert_eq!(route.label(&route.midpoint(s)).unwrap(), s);
        }
        let b = route.boundaries();
        let total: f64 = b.windows(2).map(|w| w[1] - w[0]).sum();
        prop_assert!((total - route.length()).abs() <= 1e-9 * route.length());
    }

    #[test]
    fn windows_tile_the_drive(n in 0usize..2000, rate in prop::sample::select(vec![40.0, 50.0, 100.0, 200.0])) {
        let samples = (0..n).map(|k| ImuSample { t: k as f64 / rate, accel: [0.0, 0.0, 9.8], gyro: [0.0; 3] }).collect();
        let d = Drive::new(samples, rate, None).unwrap();
        let w = d.windows();
        prop_assert_eq!(w.len(), (n as f64 / rate / 2.0).floor() as usize);
        for (i, tw) in w.iter().enumerate() {
            prop_assert!((tw.t_start - 2.0 * i as f64).abs() < 1e-9);
            prop_assert_eq!(tw.window.rows().len(), (2.0 * rate) as usize);
        }
    }

    #[test]
    fn leveling_rotation_preserves_norms(u in (-1.0f64..1.0, -1.0f64..1.0, 0.05f64..1.0), g in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0)) {
        let r = rotation_to_vertical(&nalgebra::Vector3::new(u.0, u.1, u.2).normalize());
        let v = nalgebra::Vector3::new(g.0, g.1, g.2);
        prop_assert!(((r * v).norm() - v.norm()).abs() <= 1e-9 * (1.0 + v.norm()));
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filter_is_linear(x in vec(-10.0f64..10.0, 400), y in vec(-10.0f64..10.0, 400), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let spec = FilterSpec::for_rate(200.0).unwrap();
        let mut combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (mut fx, mut fy) = (x.clone(), y.clone());
        spec.apply(&mut combo);
        spec.apply(&mut fx);
        spec.apply(&mut fy);
        for i in 0..combo.len() {
            prop_assert!((combo[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9 * (1.0 + combo[i].abs()));
        }
    }

    #[test]
    fn feature_order_statistics_are_consistent(w in window()) {
        let f = extract(&w);
        let v = f.values();
        prop_assert_eq!(v.len(), features::FEATURE_COUNT);
        let layout = features::layout();
        let at = |name: String| layout.iter().position(|n| *n == name).map(|i| v[i]);
        for (i, name) in layout.iter().enumerate() {
            prop_assert!(v[i].is_finite(), "{} not finite", name);
            if name.starts_with("corr(") {
                prop_assert!((-1.0..=1.0).contains(&v[i]));
            }
            if let Some(ch) = name.strip_suffix(".median") {
                let min = at(format!("{ch}.min")).unwrap();
                let max = at(format!("{ch}.max")).unwrap();
                prop_assert!(min <= v[i] && v[i] <= max, "{}: {} {} {}", ch, min, v[i], max);
                let (iqr, mad) = (at(format!("{ch}.iqr")).unwrap(), at(format!("{ch}.mad")).unwrap());
                prop_assert!(iqr >= 0.0 && mad >= 0.0);
            }
        }
    }

    #[test]
    fn softmax_normalises_and_loss_is_nonnegative(z in vec(-500.0f64..500.0, 2..60), k in any::<prop::sample::Index>()) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(loss(&z, SegmentId::from_index(k.index(z.len()))) >= 0.0);
    }

    #[test]
    fn step_decay_is_exact(epoch in 0usize..400, lr0 in 1e-5f64..1.0) {
        let cfg = TrainConfig { lr0, ..TrainConfig::default() };
        prop_assert_eq!(cfg.lr_at(epoch), lr0 * 0.1f64.powi((epoch / 50) as i32));
    }

    #[test]
    fn corrected_sequence_moves_by_at_most_one(raw in vec(prop::option::weighted(0.9, 0usize..12), 0..80)) {
        let route = straight(12);
        let raw: Vec<Option<SegmentId>> = raw.into_iter().map(|s| s.map(SegmentId::from_index)).collect();
        let times: Vec<f64> = (0..raw.len()).map(|i| 1.0 + 2.0 * i as f64).collect();
        let pts = run_labels(&times, &raw, &route);
        let mut prev = 1;
        for p in &pts {
            let c = p.seg_corrected.get();
            prop_assert!(c == prev || c == prev + 1);
            prop_assert!((1..=12).contains(&c));
            prop_assert_eq!(p.position, route.midpoint(p.seg_corrected));
            prev = c;
        }
    }

    #[test]
    fn perfect_segmentor_is_never_corrected(steps in vec(prop::bool::weighted(0.3), 1..80)) {
        let route = straight(40);
        let mut s = 0usize;
        let truth: Vec<Option<SegmentId>> = steps
            .iter()
            .map(|&up| {
                if up && s + 1 < 40 {
                    s += 1;
                }
                Some(SegmentId::from_index(s))
            })
            .collect();
        let pts = run_labels(&vec![0.0; truth.len()], &truth, &route);
        for (p, t) in pts.iter().zip(&truth) {
            prop_assert_eq!(Some(p.seg_corrected), *t);
        }
    }

    /// Ground truth starts in segment 1 and advances by at most one per window; the classifier is
    /// right whenever the truth advances, and every error is an outlier at least two segments away.
    #[test]
    fn outlier_clipping_never_hurts(
        steps in vec((prop::bool::weighted(0.3), prop::bool::weighted(0.25), any::<prop::sample::Index>(), 0.0f64..1.0), 1..60)
    ) {
        let n = 15;
        let route = straight(n);
        let mut s = 0usize;
        let mut raw = Vec::new();
        let mut truth = Vec::new();
        let mut any_outlier = false;
        for (i, &(up, wrong, pick, frac)) in steps.iter().enumerate() {
            let advanced = i > 0 && up && s + 1 < n;
            if advanced {
                s += 1;
            }
            truth.push(Position::new(100.0 * (s as f64 + frac), 0.0));
            let far: Vec<usize> = (0..n).filter(|&k| k.abs_diff(s) >= 2).collect();
            if wrong && !advanced {
                any_outlier = true;
                raw.push(Some(SegmentId::from_index(far[pick.index(far.len())])));
            } else {
                raw.push(Some(SegmentId::from_index(s)));
            }
        }
        let pts = run_labels(&vec![0.0; raw.len()], &raw, &route);
        let corrected: Vec<SegmentId> = pts.iter().map(|p| p.seg_corrected).collect();
        let positions: Vec<Position> = pts.iter().map(|p| p.position).collect();
        let r: MetricsReport = metrics(&raw, &corrected, &positions, &truth, &route).unwrap();
        prop_assert!(r.two_acc >= r.two_acc_raw);
        prop_assert!(r.acc >= r.acc_raw);
        prop_assert!(r.max_dist <= r.max_dist_raw);
        if any_outlier {
            prop_assert!(r.max_dist < r.max_dist_raw);
        }
        prop_assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn metrics_are_well_formed(
        rows in vec((0usize..10, 0usize..10, 0.0f64..1000.0, -30.0f64..30.0), 1..50)
    ) {
        let route = straight(10);
        let raw: Vec<Option<SegmentId>> = rows.iter().map(|r| Some(SegmentId::from_index(r.0))).collect();
        let corrected: Vec<SegmentId> = rows.iter().map(|r| SegmentId::from_index(r.1)).collect();
        let positions: Vec<Position> = corrected.iter().map(|&s| route.midpoint(s)).collect();
        let truth: Vec<Position> = rows.iter().map(|r| Position::new(r.2, r.3)).collect();
        let a = metrics(&raw, &corrected, &positions, &truth, &route).unwrap();
        let b = metrics(&raw, &corrected, &positions, &truth, &route).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.acc <= a.two_acc && a.acc_raw <= a.two_acc_raw);
        for d in [a.max_dist, a.max_dist_raw, a.mean_dist, a.mean_dist_raw] {
            prop_assert!(d >= 0.0);
        }
        prop_assert!(a.mean_dist <= a.max_dist && a.mean_dist_raw <= a.max_dist_raw);
    }

    #[test]
    fn parallel_map_matches_sequential(xs in vec(-1e6f64..1e6, 0..500)) {
        let f = |x: &f64| (x.sin() * 1e3).round() + x / 7.0;
        prop_assert_eq!(Parallelism::Sequential.map(&xs, f), Parallelism::Parallel.map(&xs, f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Splits depend only on the order of feature values, so a strictly monotone transform of one
    /// feature leaves predictions unchanged on every row a tree was grown from. Bootstrap is off so
    /// that holds for all rows: an out-of-bag row can fall on either side of a midpoint threshold.
    #[test]
    fn forest_is_invariant_to_monotone_feature_maps(
        rows in vec((vec(-5.0f64..5.0, 4), 0usize..3), 6..40),
        j in 0usize..4,
        seed in any::<u64>(),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let y: Vec<SegmentId> = rows.iter().map(|r| SegmentId::from_index(r.1)).collect();
        let g = |v: f64| v.powi(3) + 0.5 * v + v.exp();
        let xt: Vec<Vec<f64>> = x.iter().map(|r| { let mut r = r.clone(); r[j] = g(r[j]); r }).collect();
        let cfg = ForestConfig { n_trees: 7, seed, bootstrap: false, ..ForestConfig::default() };
        let a = fit_forest(&x, &y, 3, &cfg, Parallelism::Sequential).unwrap();
        let b = fit_forest(&xt, &y, 3, &cfg, Parallelism::Sequential).unwrap();
        for (r, rt) in x.iter().zip(&xt) {
            let (pa, va) = a.predict(r).unwrap();
            let (pb, vb) = b.predict(rt).unwrap();
            prop_assert_eq!(pa, pb);
            prop_assert_eq!(&va, &vb);
            prop_assert_eq!(va.iter().sum::<u32>(), 7);
        }
        let again = fit_forest(&x, &y, 3, &cfg, Parallelism::Parallel).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn inference_is_bit_repeatable(w in window(), seed in any::<u64>()) {
        let m = CnnModel::init(&CnnArch { widths: vec![4, 6], kernels: vec![3, 5] }, 5, seed).unwrap();
        let batch = [w, w.scaled(0.5)];
        let a = m.forward(&batch, Mode::Inference, Parallelism::Sequential);
        let b = m.forward(&batch, Mode::Inference, Parallelism::Parallel);
        prop_assert_eq!(a, b);
    }
}

/// The transition rule trusts the classifier's first step into a segment. If the classifier
/// misses that step, the corrected state lags and a later, correct raw output two segments
/// ahead is rejected, so corrected 2-acc can fall below raw 2-acc.
#[test]
fn missed_advance_makes_the_state_lag() {
    let route = straight(5);
    let id = SegmentId::from_index;
    let raw = [Some(id(0)), Some(id(2)), Some(id(2)), Some(id(3))];
    let truth: Vec<Position> = [0.5, 1.5, 2.5, 3.5].iter().map(|s| Position::new(100.0 * s, 0.0)).collect();
    let pts = run_labels(&[0.0; 4], &raw, &route);
    let corrected: Vec<SegmentId> = pts.iter().map(|p| p.seg_corrected).collect();
    assert_eq!(corrected, vec![id(0); 4]);
    let positions: Vec<Position> = pts.iter().map(|p| p.position).collect();
    let r = metrics(&raw, &corrected, &positions, &truth, &route).unwrap();
    assert!(r.two_acc < r.two_acc_raw);
}
