use proptest::prelude::*;
use tamperlab_core::data::*;
use tamperlab_core::dsp;
use tamperlab_core::CoreError;

/// Local maxima above 70% of the signal maximum, at least 0.25 s apart.
fn count_peaks(x: &[f64]) -> Vec<usize> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thr = 0.7 * max;
    let half = (0.12 * SAMPLE_RATE as f64) as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..x.len() - 1 {
        if x[i] < thr {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(x.len());
        if x[lo..hi].iter().all(|v| *v <= x[i]) && peaks.last().is_none_or(|p| i - p > half) {
            peaks.push(i);
        }
    }
    peaks
}

#[test]
fn same_seed_same_profile() {
    assert_eq!(synth_subject(7), synth_subject(7));
    assert!(synth_subject(7).distance(&synth_subject(8)) > 0.0);
}

#[test]
fn cohort_of_54_is_pairwise_distinct() {
    let cohort = synth_cohort(3, 54).unwrap();
    assert_eq!(cohort.len(), 54);
    let vecs: Vec<Vec<f64>> = cohort.iter().map(|(_, p)| p.normalized_vector()).collect();
    let min = MIN_PROFILE_DISTANCE * (vecs[0].len() as f64).sqrt();
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let mut d2 = 0.0;
            for k in 0..vecs[i].len() {
                d2 += (vecs[i][k] - vecs[j][k]).powi(2);
            }
            assert!(d2.sqrt() >= min, "subjects {i} and {j} are {} apart", d2.sqrt());
        }
    }
}

#[test]
fn four_seconds_is_one_window() {
    let r = synth_record(&synth_subject(1), "S01", Activity::Sitting, 4.0, 9).unwrap();
    assert_eq!(r.len(), 2048);
    assert!(synth_record(&synth_subject(1), "S01", Activity::Sitting, 3.9, 9).is_err());
}

#[test]
fn records_are_bit_reproducible() {
    let p = synth_subject(11);
    let a = synth_record(&p, "S", Activity::Walking, 10.0, 5).unwrap();
    let b = synth_record(&p, "S", Activity::Walking, 10.0, 5).unwrap();
    assert_eq!(a, b);
    let c = synth_record(&p, "S", Activity::Walking, 10.0, 6).unwrap();
    assert_ne!(a, c);
}

#[test]
fn running_beats_faster_than_sitting_and_rates_match_profile() {
    for seed in 0..5 {
        let p = synth_subject(seed);
        let sit = synth_record(&p, "S", Activity::Sitting, 60.0, 1).unwrap();
        let run = synth_record(&p, "S", Activity::Running, 60.0, 1).unwrap();
        let (ns, nr) = (count_peaks(&sit.samples).len(), count_peaks(&run.samples).len());
        assert!(nr > ns, "seed {seed}: running {nr} beats vs sitting {ns}");
        for (count, a) in [(ns, Activity::Sitting), (nr, Activity::Running)] {
            let hr = p.heart_rate[a.index()];
            assert!(
                (count as f64 - hr).abs() <= 0.1 * hr,
                "seed {seed} {a}: {count} beats in 60 s vs {hr:.1} bpm"
            );
        }
    }
}

#[test]
fn noiseless_rhythm_is_periodic() {
    let mut p = synth_subject(4);
    p.hrv = 0.0;
    p.noise = [0.0; 7];
    p.wander = 0.0;
    p.heart_rate[Activity::Standing.index()] = 60.0;
    let r = synth_record(&p, "S", Activity::Standing, 12.0, 2).unwrap();
    let x = &r.samples;
    for i in 1024..x.len() - 1024 {
        assert!((x[i] - x[i + SAMPLE_RATE as usize]).abs() < 1e-9, "sample {i}");
    }
}

#[test]
fn segmentation_examples() {
    let rec = |n: usize| EcgRecord::new("S", Activity::Sitting, 512.0, vec![0.0; n]).unwrap();
    assert_eq!(segment(&rec(2048), WINDOW, OVERLAP).unwrap().len(), 1);
    let starts: Vec<usize> = segment(&rec(4916), WINDOW, OVERLAP).unwrap().iter().map(|s| s.start).collect();
    assert_eq!(starts, vec![0, 1434, 2868]);
    assert!(segment(&rec(2047), WINDOW, OVERLAP).is_err());
}

#[test]
fn same_subject_r_peaks_agree_after_filtering() {
    let p = synth_subject(21);
    let r = synth_record(&p, "S", Activity::Sitting, 60.0, 3).unwrap();
    let filt = dsp::BiquadCascade::standard();
    let f = dsp::filter_zero_phase(&r.samples, &filt).unwrap();
    let rec = EcgRecord::new("S", Activity::Sitting, 512.0, f).unwrap();
    let segs = segment(&rec, WINDOW, OVERLAP).unwrap();
    // Median R height per segment, skipping the first and last segment,
    // which carry the filter's edge transient.
    let medians: Vec<f64> = segs[1..segs.len() - 1]
        .iter()
        .map(|s| {
            let mut h: Vec<f64> = count_peaks(&s.samples).iter().map(|&i| s.samples[i]).collect();
            h.sort_by(f64::total_cmp);
            h[h.len() / 2]
        })
        .collect();
    let sigma = p.noise[Activity::Sitting.index()];
    for m in &medians {
        assert!((m - medians[0]).abs() <= 3.0 * sigma, "{m} vs {} (3 sigma = {})", medians[0], 3.0 * sigma);
    }
}

#[test]
fn csv_round_trip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f64> = (0..2048).map(|i| (i as f64 * 0.01).sin()).collect();
    let rec = EcgRecord::new("S07", Activity::Bending, 512.0, samples).unwrap();
    let path = dir.path().join("r.csv");
    save_record(&path, &rec, RecordFormat::Csv).unwrap();
    let back = load_record(&path, RecordFormat::Csv).unwrap();
    assert_eq!(back.len(), 2048);
    assert_eq!(back, rec);

    let bad_fs = dir.path().join("fs.csv");
    std::fs::write(&bad_fs, "subject,activity,fs,sample\nS1,sitting,250,0.1\nS1,sitting,250,0.2\n").unwrap();
    assert!(matches!(load_record(&bad_fs, RecordFormat::Csv), Err(CoreError::UnsupportedSampleRate(f)) if f == 250.0));

    let bad_header = dir.path().join("h.csv");
    std::fs::write(&bad_header, "who,what\nS1,sitting\n").unwrap();
    assert!(load_record(&bad_header, RecordFormat::Csv).is_err());

    let nan = dir.path().join("nan.csv");
    std::fs::write(&nan, "subject,activity,fs,sample\nS1,sitting,512,NaN\n").unwrap();
    assert!(load_record(&nan, RecordFormat::Csv).is_err());

    assert!(load_record(&dir.path().join("missing.csv"), RecordFormat::Csv).is_err());
}

#[test]
fn raw_f64_with_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rec.f64");
    let mut bytes = Vec::new();
    for i in 0..4096 {
        bytes.extend_from_slice(&(i as f64).to_le_bytes());
    }
    std::fs::write(&path, bytes).unwrap();
    assert!(load_record(&path, RecordFormat::RawF64).is_err(), "sidecar is required");
    std::fs::write(
        dir.path().join("rec.meta.json"),
        r#"{"subject":"S02","activity":"running","fs":512}"#,
    )
    .unwrap();
    let r = load_record(&path, RecordFormat::RawF64).unwrap();
    assert_eq!(r.len(), 4096);
    assert_eq!(r.activity, Activity::Running);
    assert_eq!(r.samples[4095], 4095.0);
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (m, recs) = synth_dataset(5, 3, 8.0).unwrap();
    assert_eq!(recs.len(), 21);
    write_dataset(dir.path(), &m, &recs).unwrap();
    let (m2, recs2) = read_dataset(dir.path()).unwrap();
    assert_eq!(m, m2);
    assert_eq!(recs, recs2);
}

proptest! {
    #[test]
    fn segments_are_full_windows_at_fixed_hop(len in 2048usize..12000) {
        let x: Vec<f64> = (0..len).map(|i| (i % 97) as f64).collect();
        let rec = EcgRecord::new("S", Activity::Jumping, 512.0, x.clone()).unwrap();
        let segs = segment(&rec, WINDOW, OVERLAP).unwrap();
        prop_assert_eq!(segs.len(), (len - 2048) / 1434 + 1);
        for (k, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.start, k * 1434);
            prop_assert_eq!(s.samples.len(), 2048);
            prop_assert_eq!(&s.samples[..], &x[s.start..s.start + 2048]);
        }
    }
}
