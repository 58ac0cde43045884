//! Physical and statistical checks on the drive simulator.

use std::f64::consts::PI;

use roadsig::drive::{Drive, Split};
use roadsig::par::Parallelism;
use roadsig::preprocess::preprocess;
use roadsig::route::DEFAULT_CORRIDOR_M;
use roadsig::sim::{synth_dataset, synth_drive, synth_route, MountConfig, NoiseConfig, SignatureConfig, SimConfig, SpeedConfig};
use roadsig::types::{ProcessedWindow, AZ, GX, GY, PROCESSED_LEN};

const PAR: Parallelism = Parallelism::Parallel;

#[test]
fn ground_truth_speed_matches_the_inertial_record() {
    // Level mount, no noise and no road input: the x accelerometer reads the longitudinal
    // acceleration alone, so integrating it gives the speed the vehicle actually drove.
    let cfg = SimConfig {
        signature: SignatureConfig::silent(),
        noise: NoiseConfig::none(),
        mount: MountConfig { roll_deg: 0.0, pitch_deg: 0.0 },
        rate_hz: 100.0,
        seed: 3,
        ..SimConfig::car()
    };
    let sim = synth_route(&cfg).unwrap();
    let drive = synth_drive(&sim, &cfg, 11).unwrap();
    let dt = 1.0 / drive.rate_hz();
    let mut v = 0.0;
    let speed: Vec<f64> = drive
        .samples()
        .iter()
        .map(|s| {
            v += s.accel[0] * dt;
            v
        })
        .collect();
    let fixes = drive.ground_truth().unwrap();
    let mut checked = 0;
    let mut stopped = 0;
    for w in fixes.windows(2) {
        let (i0, i1) = ((w[0].t / dt).round() as usize, (w[1].t / dt).round() as usize);
        // Trapezoid of the integrated speed over the interval.
        let dist: f64 = (i0..i1).map(|i| 0.5 * (speed[i] + speed[i + 1]) * dt).sum();
        let mean_v = dist / (w[1].t - w[0].t);
        let chord = w[0].position().distance(&w[1].position()) / (w[1].t - w[0].t);
        if mean_v > 2.0 {
            assert!((chord - mean_v).abs() <= 0.02 * mean_v, "t = {}: {chord} vs {mean_v}", w[0].t);
            checked += 1;
        } else {
            assert!((chord - mean_v).abs() <= 0.04, "t = {}: {chord} vs {mean_v}", w[0].t);
            stopped += 1;
        }
    }
    assert!(checked > 300, "{checked} moving intervals");
    assert!(stopped >= 2, "initial rest should show up as slow intervals");
}

/// Hann-windowed band amplitudes, mean removed, of the vertical and rotational channels, from a direct DFT.
fn fingerprint(w: &ProcessedWindow) -> Vec<f64> {
    let mut out = Vec::new();
    for c in [AZ, GX, GY] {
        let mut x = w.column(c);
        let mean = x.iter().sum::<f64>() / PROCESSED_LEN as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        for k in 1..=PROCESSED_LEN / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let v = v * (1.0 - (2.0 * PI * n as f64 / PROCESSED_LEN as f64).cos()) / 2.0;
                let a = 2.0 * PI * (k * n) as f64 / PROCESSED_LEN as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    out
}

fn labeled(drives: &[Drive], sim_cfg: &SimConfig) -> Vec<(Vec<f64>, usize)> {
    let route = synth_route(sim_cfg).unwrap().route;
    drives
        .iter()
        .flat_map(|d| {
            let route = &route;
            // Only windows driven entirely within one segment belong to that segment.
            d.windows().into_iter().filter_map(move |w| {
                let seg = |t: f64| route.label_within(&d.position_at(t).unwrap(), DEFAULT_CORRIDOR_M).unwrap();
                let s = seg(w.t_start);
                (s == seg(w.t_start + 2.0)).then_some(())?;
                preprocess(&w.window).ok().map(|p| (fingerprint(&p), s.index()))
            })
        })
        .collect()
}

/// Nearest-centroid accuracy on test drives with centroids from training drives.
fn probe(cfg: &SimConfig) -> f64 {
    let data = synth_dataset(cfg, 6, 1, 2, PAR).unwrap();
    let train = labeled(&data.dataset.train, cfg);
    let test = labeled(&data.dataset.test, cfg);
    let dim = train[0].0.len();
    let mut sums = vec![vec![0.0; dim]; cfg.n_segments];
    let mut counts = vec![0usize; cfg.n_segments];
    for (f, s) in &train {
        counts[*s] += 1;
        sums[*s].iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    let centroids: Vec<Vec<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c.max(1) as f64).collect()).collect();
    let hits = test
        .iter()
        .filter(|(f, s)| {
            let d2 = |c: &Vec<f64>| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..centroids.len()).filter(|&k| counts[k] > 0).min_by(|&a, &b| d2(&centroids[a]).total_cmp(&d2(&centroids[b])));
            best == Some(*s)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn strong_textures_give_separable_band_powers() {
    // Two peaks per segment: with more, peaks closer than the 0.5 Hz bin spacing beat within a
    // window and blur each segment's fingerprint.
    for seed in 1..=4 {
        let cfg = SimConfig {
            signature: SignatureConfig {
                texture_peaks: 2,
                texture_amp: (2.0, 4.0),
                roughness_gd: (0.0, 0.0),
                ..SimConfig::separable().signature
            },
            speed: SpeedConfig::constant(10.0),
            seed,
            ..SimConfig::separable()
        };
        let acc = probe(&cfg);
        assert!(acc >= 0.9, "seed {seed}: probe accuracy {acc}");
    }
}

#[test]
fn silent_roads_leave_the_probe_at_chance() {
    for seed in 1..=4 {
        let cfg = SimConfig { signature: SignatureConfig::silent(), seed, ..SimConfig::separable() };
        let acc = probe(&cfg);
        let chance = 1.0 / cfg.n_segments as f64;
        assert!(acc < 3.0 * chance, "seed {seed}: probe accuracy {acc} vs chance {chance}");
    }
}

#[test]
fn minimal_dataset_is_valid_and_tiles_into_windows() {
    let cfg = SimConfig { seed: 9, ..SimConfig::separable() };
    let data = synth_dataset(&cfg, 1, 1, 1, PAR).unwrap();
    data.dataset.validate(DEFAULT_CORRIDOR_M).unwrap();
    for split in Split::ALL {
        let drives = data.dataset.split(split);
        assert_eq!(drives.len(), 1);
        let d = &drives[0];
        let n = d.window_labels(&data.dataset.route, DEFAULT_CORRIDOR_M).unwrap().len();
        assert_eq!(n, (d.duration() / 2.0).floor() as usize);
        assert!(n > 50);
    }
}

#[test]
fn full_split_counts_and_disjoint_seeds() {
    let cfg = SimConfig { rate_hz: 40.0, seed: 1, ..SimConfig::separable() };
    let data = synth_dataset(&cfg, 29, 10, 10, PAR).unwrap();
    let d = &data.dataset;
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (29, 10, 10));
    let s = &data.manifest.seeds;
    let mut all: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 49);
    // Different seeds give different vehicles and phones.
    assert_ne!(d.train[0].samples()[0].accel, d.train[1].samples()[0].accel);
}

#[test]
fn generation_is_schedule_independent() {
    let cfg = SimConfig { rate_hz: 50.0, seed: 4, ..SimConfig::separable() };
    let a = synth_dataset(&cfg, 2, 1, 1, Parallelism::Sequential).unwrap();
    let b = synth_dataset(&cfg, 2, 1, 1, Parallelism::Parallel).unwrap();
    for split in Split::ALL {
        for (x, y) in a.dataset.split(split).iter().zip(b.dataset.split(split)) {
            assert_eq!(x.samples(), y.samples());
            assert_eq!(x.ground_truth(), y.ground_truth());
        }
    }
}
