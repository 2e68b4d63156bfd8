use proptest::prelude::*;
use std::f64::consts::PI;
use tamperlab_core::dsp::*;

const FS: f64 = 512.0;

fn sine(hz: f64, n: usize, amp: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * hz * i as f64 / FS).sin()).collect()
}

/// Amplitude of the `hz` component by direct correlation over whole cycles.
fn dft_amplitude(x: &[f64], hz: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let ph = 2.0 * PI * hz * i as f64 / FS;
        re += v * ph.cos();
        im += v * ph.sin();
    }
    2.0 * (re * re + im * im).sqrt() / x.len() as f64
}

/// Butterworth band-pass magnitude of prototype order `n` at analog
/// frequency `w`, with the band edges and `w` all prewarped.
fn analog_gain(hz: f64, n: i32) -> f64 {
    let warp = |f: f64| 2.0 * FS * (PI * f / FS).tan();
    let (lo, hi, w) = (warp(LOW_HZ), warp(HIGH_HZ), warp(hz));
    let x = (w * w - lo * hi) / ((hi - lo) * w);
    1.0 / (1.0 + x.powi(2 * n)).sqrt()
}

#[test]
fn cascade_matches_analog_prototype() {
    let f = BiquadCascade::standard();
    assert_eq!((f.order, f.low_hz, f.high_hz, f.fs), (2, 0.5, 100.0, 512.0));
    assert_eq!(f.sections.len(), 2);
    assert!(f.is_stable());
    for hz in [0.05, 0.2, 0.5, 1.0, 3.0, 10.0, 30.0, 50.0, 100.0, 150.0, 220.0] {
        let (d, a) = (f.gain(hz), analog_gain(hz, 2));
        assert!((d - a).abs() < 1e-9, "{hz} Hz: digital {d} vs analog {a}");
    }
}

#[test]
fn band_edges_and_stopbands() {
    let f = BiquadCascade::standard();
    assert!(f.gain(0.0) < 1e-12);
    assert!(f.gain(FS / 2.0) < 1e-12);
    assert!(f.gain_db(10.0).abs() < 1.0);
    assert!(f.gain_db(50.0).abs() < 1.0);
    assert!(f.gain_db(0.05) < -6.0);
    // -3 dB points within 5% of the requested cutoffs.
    let half_power = |lo: f64, hi: f64, rising: bool| {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (f.gain(m) < std::f64::consts::FRAC_1_SQRT_2) == rising {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let lo = half_power(0.01, 10.0, true);
    let hi = half_power(20.0, 255.0, false);
    assert!((lo / 0.5 - 1.0).abs() < 0.05, "low -3 dB at {lo}");
    assert!((hi / 100.0 - 1.0).abs() < 0.05, "high -3 dB at {hi}");
}

#[test]
fn bad_designs_are_rejected() {
    assert!(design_bandpass(2, 0.0, 100.0, FS).is_err());
    assert!(design_bandpass(2, 100.0, 50.0, FS).is_err());
    assert!(design_bandpass(2, 0.5, 300.0, FS).is_err());
    assert!(design_bandpass(3, 0.5, 100.0, FS).is_err());
    let f4 = design_bandpass(4, 1.0, 40.0, FS).unwrap();
    assert!(f4.is_stable());
    assert_eq!(f4.sections.len(), 4);
}

#[test]
fn coefficients_export_as_json() {
    let json = BiquadCascade::standard().to_json().unwrap();
    let back: BiquadCascade = serde_json::from_str(&json).unwrap();
    assert_eq!(back, BiquadCascade::standard());
}

#[test]
fn ten_hz_keeps_amplitude_and_phase() {
    let f = BiquadCascade::standard();
    let x = sine(10.0, 4096, 1.0);
    let y = filter_zero_phase(&x, &f).unwrap();
    assert_eq!(y.len(), x.len());
    let edge = 256;
    let peak = y[edge..y.len() - edge].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - 1.0).abs() < 0.02, "peak {peak}");
    let xcorr = |lag: i64| -> f64 {
        (edge as i64..(x.len() - edge) as i64)
            .map(|i| x[i as usize] * y[(i + lag) as usize])
            .sum()
    };
    let best = (-20..=20).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn band_limited_noise_has_zero_lag() {
    let f = BiquadCascade::standard();
    // Sum of in-band tones with fixed pseudo-random phases.
    let x: Vec<f64> = (0..4096)
        .map(|i| {
            (1..=12)
                .map(|k| {
                    let hz = 2.0 + 6.5 * k as f64;
                    let ph = (k * k * 37 % 101) as f64;
                    (2.0 * PI * hz * i as f64 / FS + ph).sin()
                })
                .sum::<f64>()
        })
        .collect();
    let y = filter_zero_phase(&x, &f).unwrap();
    let xcorr = |lag: i64| -> f64 { (300..3796).map(|i: i64| x[i as usize] * y[(i + lag) as usize]).sum() };
    let best = (-30..=30).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn fft_amplitude_oracle() {
    let f = BiquadCascade::standard();
    // 50 Hz: 200 whole cycles in 2048 samples.
    let x = sine(50.0, 2048, 1.0);
    let y = filter_zero_phase(&x, &f).unwrap();
    let a = dft_amplitude(&y[512..1536], 50.0);
    let expect = f.gain(50.0).powi(2);
    assert!((a - expect).abs() < 0.01, "50 Hz amplitude {a}, expected {expect}");
    // 0.05 Hz: one cycle over 20 s.
    let x = sine(0.05, 10240, 1.0);
    let y = filter_zero_phase(&x, &f).unwrap();
    let a = dft_amplitude(&y, 0.05);
    assert!(a < 0.5, "0.05 Hz amplitude {a}");
}

#[test]
fn constant_input_decays_to_zero() {
    let y = filter_zero_phase(&[3.0; 8192], &BiquadCascade::standard()).unwrap();
    assert!(y[2048..6144].iter().all(|v| v.abs() < 1e-3));
}

#[test]
fn filter_input_checks() {
    let f = BiquadCascade::standard();
    assert!(filter_zero_phase(&[1.0, 2.0, 3.0, 4.0, 5.0], &f).is_err());
    let mut x = sine(10.0, 1024, 1.0);
    x[7] = f64::INFINITY;
    assert!(filter_zero_phase(&x, &f).is_err());
    let single = apply_filter(&sine(10.0, 1024, 1.0), &f, FilterMode::SinglePass).unwrap();
    assert_eq!(single, f.filter(&sine(10.0, 1024, 1.0)));
}

#[test]
fn normalization_examples() {
    let ramp: Vec<f64> = (0..2048).map(|i| 2.0 * i as f64).collect();
    let n = min_max_normalize(&ramp).unwrap();
    assert_eq!(n[0], 0.0);
    assert_eq!(n[2047], 1.0);
    assert!((n[1] - 1.0 / 2047.0).abs() < 1e-15);
    let three = min_max_normalize(&[0.0, 2.0, 4.0]).unwrap();
    assert_eq!(three, vec![0.0, 0.5, 1.0]);
    assert_eq!(min_max_normalize(&[5.0; 2048]).unwrap(), vec![0.0; 2048]);
    assert_eq!(min_max_normalize(&three).unwrap(), three);
    assert!(min_max_normalize(&[0.0, f64::NAN]).is_err());
}

#[test]
fn scalogram_shape_and_frequency_map() {
    let x: Vec<f64> = (0..2048).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let s = cwt(&x, N_SCALES).unwrap();
    assert_eq!(s.shape(), (2048, 96));
    assert_eq!(s.values.len(), 2048 * 96);
    assert!(s.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(s.freqs.windows(2).all(|w| w[1] > w[0]));
    assert!((s.freqs[0] - 0.5).abs() < 1e-12 && (s.freqs[95] - 100.0).abs() < 1e-9);
    assert!(cwt(&[0.0; 2048], 96).unwrap().values.iter().all(|v| *v == 0.0));
    let mut bad = x.clone();
    bad[3] = f64::NAN;
    assert!(cwt(&bad, 96).is_err());
}

#[test]
fn eight_hz_ridge() {
    let s = cwt(&sine(8.0, 2048, 1.0), 96).unwrap();
    let target = s.freqs.iter().enumerate().min_by(|a, b| (a.1 - 8.0).abs().total_cmp(&(b.1 - 8.0).abs())).unwrap().0;
    let mut checked = 0;
    for t in 0..2048 {
        if s.is_edge(t, target) {
            continue;
        }
        let r = s.ridge(t);
        assert!(r.abs_diff(target) <= 1, "t {t}: ridge at {} Hz", s.freqs[r]);
        checked += 1;
    }
    assert!(checked > 1500);
}

#[test]
fn ridge_follows_a_time_shift() {
    // A 12 Hz burst under a Gaussian envelope, moved by 100 samples.
    let burst = |c: f64| -> Vec<f64> {
        (0..2048)
            .map(|i| {
                let t = (i as f64 - c) / FS;
                (-(t * t) / (2.0 * 0.08f64.powi(2))).exp() * (2.0 * PI * 12.0 * t).sin()
            })
            .collect()
    };
    let (a, b) = (cwt(&burst(900.0), 96).unwrap(), cwt(&burst(1000.0), 96).unwrap());
    let bin = a.ridge(900);
    let peak = |s: &Scalogram| (0..2048).max_by(|x, y| s.at(*x, bin).total_cmp(&s.at(*y, bin))).unwrap();
    assert_eq!(peak(&b), peak(&a) + 100);
    for t in 700..1100 {
        assert_eq!(a.ridge(t), b.ridge(t + 100));
    }
}

#[test]
fn scalogram_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = cwt(&sine(20.0, 2048, 0.5), 96).unwrap();
    let path = dir.path().join("s.tlsg");
    save_scalogram(&path, &s).unwrap();
    let back = load_scalogram(&path).unwrap();
    assert_eq!(back.shape(), s.shape());
    assert_eq!(back.freqs, s.freqs);
    for (a, b) in back.values.iter().zip(&s.values) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6));
    }
}

#[test]
fn box_resample_averages_blocks() {
    let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let r = box_resample(&v, 4, 4, 2, 2).unwrap();
    assert_eq!(r, vec![2.5, 4.5, 10.5, 12.5]);
    assert_eq!(box_resample(&v, 4, 4, 4, 4).unwrap(), v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 600),
        y in prop::collection::vec(-10.0f64..10.0, 600),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let f = BiquadCascade::standard();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = filter_zero_phase(&mix, &f).unwrap();
        let (fx, fy) = (filter_zero_phase(&x, &f).unwrap(), filter_zero_phase(&y, &f).unwrap());
        let scale = lhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..600 {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn normalized_range(x in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let n = min_max_normalize(&x).unwrap();
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        if hi > lo {
            prop_assert!(n.contains(&0.0) && n.contains(&1.0));
        }
    }

    #[test]
    fn cwt_ignores_sign(x in prop::collection::vec(-1.0f64..1.0, 2048)) {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert_eq!(cwt(&x, 96).unwrap().values, cwt(&neg, 96).unwrap().values);
    }
}
