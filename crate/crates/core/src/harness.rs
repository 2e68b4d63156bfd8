//! Datasets, splits, training, evaluation, repeated runs, and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tamperlab_nn::{check_grads_finite, Adam, ForwardCtx, Graph, ParamStore, Tensor};

use crate::data::{self, Activity, EcgRecord, Segment, OVERLAP, WINDOW};
use crate::dsp::{self, BiquadCascade, CwtPlan, FilterMode, N_SCALES};
use crate::models::{Dims, InputKind, Model, ModelConfig, ModelKind, DETECTION_THRESHOLD};
use crate::seed::derive_seed;
use crate::tamper::{self, TamperStrategy, BLEND_WIDTH};
use crate::{invalid, CoreError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Filtered (not normalized) segments grouped for sampling.
#[derive(Debug, Clone)]
pub struct SegmentPool {
    pub segments: Vec<Segment>,
}

impl SegmentPool {
    /// Filters each whole record, then cuts it into windows.
    pub fn from_records(records: &[EcgRecord], mode: FilterMode) -> Result<Self> {
        let filt = BiquadCascade::standard();
        let mut segments = Vec::new();
        for r in records {
            let filtered = dsp::apply_filter(&r.samples, &filt, mode)?;
            let rec = EcgRecord::new(r.subject.clone(), r.activity, r.sample_rate() as f64, filtered)?;
            segments.extend(data::segment(&rec, WINDOW, OVERLAP)?);
        }
        Ok(Self { segments })
    }

    /// Segment indices keyed by (activity, subject).
    fn index(&self) -> BTreeMap<(Activity, String), Vec<usize>> {
        let mut map: BTreeMap<(Activity, String), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            map.entry((s.activity, s.subject.clone())).or_default().push(i);
        }
        map
    }
}

/// Turns 2048-sample windows into model inputs at the model's geometry.
pub struct InputBuilder {
    kind: InputKind,
    time: usize,
    bins: usize,
    cwt: Option<CwtPlan>,
}

impl InputBuilder {
    pub fn new(kind: InputKind, dims: &Dims) -> Result<Self> {
        let cwt = match kind {
            InputKind::Cwt => Some(CwtPlan::new(WINDOW, N_SCALES)?),
            InputKind::Raw1d => None,
        };
        Ok(Self {
            kind,
            time: dims.time,
            bins: dims.cwt_bins(),
            cwt,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        match self.kind {
            InputKind::Raw1d => [self.time, 1],
            InputKind::Cwt => [self.time, self.bins],
        }
    }

    pub fn build(&self, samples: &[f64]) -> Result<Tensor> {
        if samples.len() != WINDOW {
            return invalid(format!("model inputs come from {WINDOW}-sample windows, got {}", samples.len()));
        }
        let values = match &self.cwt {
            None => dsp::box_resample(samples, WINDOW, 1, self.time, 1)?,
            Some(plan) => {
                let s = plan.transform(samples)?;
                dsp::box_resample(&s.values, s.time, s.bins, self.time, self.bins)?
            }
        };
        Ok(Tensor::new(self.shape().to_vec(), values)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub subject: String,
    pub activity: Activity,
    pub start: usize,
    pub donor: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DetectionItem {
    pub input: Tensor,
    /// true = tampered.
    pub label: bool,
    pub meta: ItemMeta,
}

#[derive(Debug, Clone)]
pub struct DetectionDataset {
    pub strategy: TamperStrategy,
    pub input: InputKind,
    pub items: Vec<DetectionItem>,
}

impl DetectionDataset {
    pub fn balance(&self) -> (usize, usize) {
        let t = self.items.iter().filter(|i| i.label).count();
        (self.items.len() - t, t)
    }
}

/// One composition drawn from a pool: the normalized host it came from, the
/// tampered segment, and the sidecar that reproduces it.
#[derive(Debug, Clone)]
pub struct Tampering {
    pub host: Segment,
    pub tampered: tamper::TamperedSegment,
    pub sidecar: tamper::TamperSidecar,
}

/// Tampers up to `max_hosts` randomly chosen host segments (all eligible
/// ones when `None`), in pool order. Each donor is a random segment of
/// another subject doing the same activity; both sources are min-max
/// normalized before composition. Host `n` draws its layout from
/// `derive_seed(seed, "layout", n)`.
pub fn tamper_pool(
    pool: &SegmentPool,
    strategy: TamperStrategy,
    max_hosts: Option<usize>,
    seed: u64,
) -> Result<Vec<Tampering>> {
    let index = pool.index();
    let mut by_activity: BTreeMap<Activity, Vec<&String>> = BTreeMap::new();
    for (a, s) in index.keys() {
        by_activity.entry(*a).or_default().push(s);
    }
    let eligible: Vec<usize> = (0..pool.segments.len())
        .filter(|&i| by_activity[&pool.segments[i].activity].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return invalid("tampering needs at least 2 subjects recorded for some activity");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "detection", 0));
    let mut hosts = eligible;
    hosts.shuffle(&mut rng);
    if let Some(m) = max_hosts {
        hosts.truncate(m);
    }
    hosts.sort_unstable();

    let mut out = Vec::with_capacity(hosts.len());
    for (n, &h) in hosts.iter().enumerate() {
        let host = dsp::normalize_segment(&pool.segments[h])?;
        let others: Vec<&&String> = by_activity[&host.activity]
            .iter()
            .filter(|s| ***s != host.subject)
            .collect();
        let donor_subject = (*others[rng.random_range(0..others.len())]).clone();
        let candidates = &index[&(host.activity, donor_subject)];
        let donor = dsp::normalize_segment(&pool.segments[candidates[rng.random_range(0..candidates.len())]])?;
        let layout_seed = derive_seed(seed, "layout", n as u64);
        let mut lrng = ChaCha8Rng::seed_from_u64(layout_seed);
        let layout = tamper::make_layout(strategy, WINDOW, &mut lrng)?;
        let t = tamper::compose(strategy, &layout, &host, &donor, BLEND_WIDTH)?;
        let sidecar = tamper::TamperSidecar {
            strategy,
            seed: layout_seed,
            host_id: t.host_id.clone(),
            donor_id: t.donor_id.clone(),
            activity: t.activity,
            host_start: host.start,
            donor_start: donor.start,
            blend_width: BLEND_WIDTH,
            spans: layout.spans.clone(),
            mask_rle: tamper::mask_rle(&t.mask),
        };
        out.push(Tampering {
            host,
            tampered: t,
            sidecar,
        });
    }
    Ok(out)
}

/// Every chosen host segment contributes one clean item and one tampered
/// item; see [`tamper_pool`].
pub fn build_detection_dataset(
    pool: &SegmentPool,
    strategy: TamperStrategy,
    inputs: &InputBuilder,
    max_hosts: Option<usize>,
    seed: u64,
) -> Result<DetectionDataset> {
    let tampered = tamper_pool(pool, strategy, max_hosts, seed)?;
    let mut items = Vec::with_capacity(2 * tampered.len());
    for Tampering { host, tampered: t, .. } in tampered {
        let meta = ItemMeta {
            subject: host.subject.clone(),
            activity: host.activity,
            start: host.start,
            donor: None,
        };
        items.push(DetectionItem {
            input: inputs.build(&host.samples)?,
            label: false,
            meta: meta.clone(),
        });
        items.push(DetectionItem {
            input: inputs.build(&t.samples)?,
            label: true,
            meta: ItemMeta {
                donor: Some(t.donor_id),
                ..meta
            },
        });
    }
    Ok(DetectionDataset {
        strategy,
        input: inputs.kind,
        items,
    })
}

#[derive(Debug, Clone)]
pub struct PairItem {
    pub a: Tensor,
    pub b: Tensor,
    /// true = same person.
    pub label: bool,
    pub meta_a: ItemMeta,
    pub meta_b: ItemMeta,
}

#[derive(Debug, Clone)]
pub struct PairDataset {
    pub pairs: Vec<PairItem>,
}

/// Positives pair one subject across two activities; negatives pair two
/// subjects within one activity. Segments are filtered but not normalized.
/// Draws `n_pairs` pairs (rounded down to even), half of each kind, with no
/// unordered segment pair repeated.
pub fn build_pair_dataset(pool: &SegmentPool, inputs: &InputBuilder, n_pairs: usize, seed: u64) -> Result<PairDataset> {
    let index = pool.index();
    let mut by_subject: BTreeMap<&String, Vec<Activity>> = BTreeMap::new();
    let mut by_activity: BTreeMap<Activity, Vec<&String>> = BTreeMap::new();
    for (a, s) in index.keys() {
        by_subject.entry(s).or_default().push(*a);
        by_activity.entry(*a).or_default().push(s);
    }
    let pos_subjects: Vec<&String> = by_subject.iter().filter(|(_, a)| a.len() >= 2).map(|(s, _)| *s).collect();
    let neg_activities: Vec<Activity> = by_activity.iter().filter(|(_, s)| s.len() >= 2).map(|(a, _)| *a).collect();
    if by_subject.len() < 2 || pos_subjects.is_empty() || neg_activities.is_empty() {
        return invalid("pair dataset needs at least 2 subjects with at least 2 activities each");
    }
    let half = n_pairs / 2;
    if half == 0 {
        return invalid("pair dataset needs at least 2 pairs");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairs", 0));
    let pick = |rng: &mut ChaCha8Rng, key: (Activity, String)| {
        let v = &index[&key];
        v[rng.random_range(0..v.len())]
    };
    let mut seen = BTreeSet::new();
    let mut chosen: Vec<(usize, usize, bool)> = Vec::with_capacity(2 * half);
    for positive in [true, false] {
        let mut made = 0;
        let mut attempts = 0;
        while made < half {
            attempts += 1;
            if attempts > 1000 * half + 1000 {
                return invalid(format!("could not draw {half} distinct {} pairs", if positive { "positive" } else { "negative" }));
            }
            let (i, j) = if positive {
                let s = pos_subjects[rng.random_range(0..pos_subjects.len())];
                let acts = &by_subject[s];
                let a1 = acts[rng.random_range(0..acts.len())];
                let a2 = acts[rng.random_range(0..acts.len())];
                if a1 == a2 {
                    continue;
                }
                (pick(&mut rng, (a1, s.clone())), pick(&mut rng, (a2, s.clone())))
            } else {
                let a = neg_activities[rng.random_range(0..neg_activities.len())];
                let subs = &by_activity[&a];
                let s1 = subs[rng.random_range(0..subs.len())];
                let s2 = subs[rng.random_range(0..subs.len())];
                if s1 == s2 {
                    continue;
                }
                (pick(&mut rng, (a, s1.clone())), pick(&mut rng, (a, s2.clone())))
            };
            if seen.insert((i.min(j), i.max(j))) {
                chosen.push((i, j, positive));
                made += 1;
            }
        }
    }
    chosen.shuffle(&mut rng);
    let meta = |s: &Segment| ItemMeta {
        subject: s.subject.clone(),
        activity: s.activity,
        start: s.start,
        donor: None,
    };
    let pairs = chosen
        .into_iter()
        .map(|(i, j, label)| {
            let (sa, sb) = (&pool.segments[i], &pool.segments[j]);
            Ok(PairItem {
                a: inputs.build(&sa.samples)?,
                b: inputs.build(&sb.samples)?,
                label,
                meta_a: meta(sa),
                meta_b: meta(sb),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairDataset { pairs })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions item indices so every stratum is divided by `fractions`
/// (train, val; test takes the rest), each share rounded to the nearest item.
pub fn split_stratified<K: Ord + Clone>(strata: &[K], fractions: (f64, f64), seed: u64) -> Result<Split> {
    if strata.len() < 10 {
        return invalid(format!("need at least 10 items to split, got {}", strata.len()));
    }
    let (ft, fv) = fractions;
    if !(ft > 0.0 && fv >= 0.0 && ft + fv < 1.0) {
        return invalid(format!("bad split fractions {ft} / {fv}"));
    }
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in strata.iter().enumerate() {
        groups.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let nt = (ft * n as f64).round() as usize;
        let nv = ((fv * n as f64).round() as usize).min(n - nt);
        split.train.extend_from_slice(&idx[..nt]);
        split.val.extend_from_slice(&idx[nt..nt + nv]);
        split.test.extend_from_slice(&idx[nt + nv..]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return invalid("prediction and label counts differ");
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn metrics(&self) -> Result<Metrics> {
        if self.total() == 0 {
            return invalid("cannot score an empty test set");
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1,
        })
    }
}

pub fn metrics(pred: &[bool], truth: &[bool]) -> Result<Metrics> {
    Confusion::from_predictions(pred, truth)?.metrics()
}

/// The best of 100 evenly spaced thresholds between the smallest and largest
/// distance, scored by accuracy of `distance < threshold` against `same`.
/// Ties go to the smaller threshold.
pub fn sweep_threshold(distances: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if distances.is_empty() || distances.len() != same.len() {
        return invalid("threshold sweep needs matching, non-empty distances and labels");
    }
    let lo = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut best = (f64::NAN, -1.0);
    for i in 0..100 {
        // Candidates sit just above each grid point so the largest distance
        // can fall on the "same" side.
        let thr = (lo + span * (i as f64 + 0.5) / 99.5).max(f64::MIN_POSITIVE);
        let pred: Vec<bool> = distances.iter().map(|d| *d < thr).collect();
        let acc = metrics(&pred, same)?.accuracy;
        if acc > best.1 {
            best = (thr, acc);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    /// Contrastive margin for Siamese training.
    pub margin: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 32,
            lr: 1e-3,
            patience: 5,
            margin: 1.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.patience == 0 {
            return invalid("epochs, batch, and patience must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.margin > 0.0) {
            return invalid("lr and margin must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Verification only: the validation-tuned distance threshold.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub threshold: Option<f64>,
    pub stopped_early: bool,
}

/// What a training step consumes.
pub enum TrainSet<'a> {
    Detection {
        train: Vec<&'a DetectionItem>,
        val: Vec<&'a DetectionItem>,
    },
    Pairs {
        train: Vec<&'a PairItem>,
        val: Vec<&'a PairItem>,
    },
}

impl TrainSet<'_> {
    fn train_len(&self) -> usize {
        match self {
            TrainSet::Detection { train, .. } => train.len(),
            TrainSet::Pairs { train, .. } => train.len(),
        }
    }
}

fn stack(items: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let v: Vec<Tensor> = items.collect();
    let refs: Vec<&Tensor> = v.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

/// One optimizer step; returns (loss, scores) where scores are probabilities
/// for detectors and distances for pairs.
fn step(
    model: &mut Model,
    opt: &mut Adam,
    set: &TrainSet<'_>,
    batch: &[usize],
    margin: f64,
    ctx_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::train(ctx_seed);
    let (loss, scores) = match set {
        TrainSet::Detection { train, .. } => {
            let x = g.input(stack(batch.iter().map(|&i| train[i].input.clone()))?)?;
            let labels: Vec<f64> = batch.iter().map(|&i| train[i].label as u8 as f64).collect();
            let p = model.forward(&mut g, x, &mut ctx)?;
            let n = batch.len();
            let p = g.reshape(p, &[n])?;
            let scores = g.value(p).data().to_vec();
            (g.bce_loss(p, &labels)?, scores)
        }
        TrainSet::Pairs { train, .. } => {
            let n = batch.len();
            let both = batch
                .iter()
                .map(|&i| train[i].a.clone())
                .chain(batch.iter().map(|&i| train[i].b.clone()));
            let x = g.input(stack(both)?)?;
            let labels: Vec<f64> = batch.iter().map(|&i| train[i].label as u8 as f64).collect();
            let e = model.forward(&mut g, x, &mut ctx)?;
            let ea = g.slice_batch(e, 0, n)?;
            let eb = g.slice_batch(e, n, n)?;
            let d = g.pair_distance(ea, eb)?;
            let scores = g.value(d).data().to_vec();
            (g.contrastive_loss(d, &labels, margin)?, scores)
        }
    };
    let loss_value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    check_grads_finite(&model.store, &grads)?;
    opt.step(&mut model.store, &grads)?;
    ctx.apply_updates(&mut model.store);
    Ok((loss_value, scores))
}

const EVAL_BATCH: usize = 64;

pub fn detector_scores(model: &Model, items: &[&DetectionItem]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        out.extend(model.predict(&stack(chunk.iter().map(|i| i.input.clone()))?)?);
    }
    Ok(out)
}

pub fn pair_distances(model: &Model, pairs: &[&PairItem]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let a = stack(chunk.iter().map(|p| p.a.clone()))?;
        let b = stack(chunk.iter().map(|p| p.b.clone()))?;
        out.extend(model.distances(&a, &b)?);
    }
    Ok(out)
}

fn detection_predictions(scores: &[f64]) -> Vec<bool> {
    scores.iter().map(|p| *p >= DETECTION_THRESHOLD).collect()
}

/// Returns (loss, accuracy, threshold) on the validation set.
fn validate(model: &Model, set: &TrainSet<'_>, margin: f64) -> Result<(f64, f64, Option<f64>)> {
    match set {
        TrainSet::Detection { val, .. } => {
            let p = detector_scores(model, val)?;
            let y: Vec<bool> = val.iter().map(|i| i.label).collect();
            let yf: Vec<f64> = y.iter().map(|b| *b as u8 as f64).collect();
            Ok((tamperlab_nn::bce(&p, &yf), metrics(&detection_predictions(&p), &y)?.accuracy, None))
        }
        TrainSet::Pairs { val, .. } => {
            let d = pair_distances(model, val)?;
            let y: Vec<bool> = val.iter().map(|p| p.label).collect();
            let yf: Vec<f64> = y.iter().map(|b| *b as u8 as f64).collect();
            let (thr, acc) = sweep_threshold(&d, &y)?;
            Ok((tamperlab_nn::contrastive(&d, &yf, margin)?, acc, Some(thr)))
        }
    }
}

/// Mini-batch Adam with early stopping on validation accuracy. On return the
/// model holds the parameters of its best validation epoch.
pub fn train(model: &mut Model, set: &TrainSet<'_>, hyper: &Hyper, seed: u64) -> Result<TrainOutcome> {
    hyper.validate()?;
    let n = set.train_len();
    if n == 0 {
        return invalid("empty training set");
    }
    match set {
        TrainSet::Detection { val, .. } if val.is_empty() => return invalid("empty validation set"),
        TrainSet::Pairs { val, .. } if val.is_empty() => return invalid("empty validation set"),
        _ => {}
    }
    if model.kind.is_siamese() != matches!(set, TrainSet::Pairs { .. }) {
        return invalid(format!("{} cannot train on this dataset type", model.kind.title()));
    }
    let mut opt = Adam::new(hyper.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(ParamStore, usize, f64, Option<f64>)> = None;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step_idx = 0u64;
    for epoch in 0..hyper.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(hyper.batch) {
            let (loss, scores) = step(model, &mut opt, set, batch, hyper.margin, derive_seed(seed, "dropout", step_idx))
                .map_err(|e| CoreError::Invalid(format!("training aborted at epoch {} step {step_idx}: {e}", epoch + 1)))?;
            step_idx += 1;
            loss_sum += loss * batch.len() as f64;
            correct += match set {
                TrainSet::Detection { train, .. } => batch
                    .iter()
                    .zip(&scores)
                    .filter(|(&i, p)| (**p >= DETECTION_THRESHOLD) == train[i].label)
                    .count(),
                TrainSet::Pairs { train, .. } => batch
                    .iter()
                    .zip(&scores)
                    .filter(|(&i, d)| (**d < hyper.margin / 2.0) == train[i].label)
                    .count(),
            };
        }
        let (val_loss, val_acc, threshold) = validate(model, set, hyper.margin)?;
        if !val_loss.is_finite() {
            return invalid(format!("validation loss is not finite at epoch {}", epoch + 1));
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_loss,
            val_acc,
            threshold,
        });
        if best.as_ref().is_none_or(|b| val_acc > b.2) {
            best = Some((model.store.clone(), epoch + 1, val_acc, threshold));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                stopped_early = epoch + 1 < hyper.epochs;
                break;
            }
        }
    }
    let (store, best_epoch, best_val_acc, threshold) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc,
        threshold,
        stopped_early,
    })
}

pub fn evaluate_detector(model: &Model, test: &[&DetectionItem]) -> Result<Metrics> {
    if test.is_empty() {
        return invalid("empty test set");
    }
    let p = detector_scores(model, test)?;
    let y: Vec<bool> = test.iter().map(|i| i.label).collect();
    metrics(&detection_predictions(&p), &y)
}

pub fn evaluate_pairs(model: &Model, test: &[&PairItem], threshold: f64) -> Result<Metrics> {
    if test.is_empty() {
        return invalid("empty test set");
    }
    let y: Vec<bool> = test.iter().map(|p| p.label).collect();
    let pred: Vec<bool> = pair_distances(model, test)?.iter().map(|d| *d < threshold).collect();
    metrics(&pred, &y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    /// Synthetic cohort size; ignored when `dir` is set.
    pub subjects: usize,
    pub duration_s: f64,
    /// Load a generated dataset instead of synthesizing one.
    pub dir: Option<PathBuf>,
    /// Cap on host segments (detection) drawn per run.
    pub max_hosts: Option<usize>,
    /// Pairs per verification dataset.
    pub pairs: usize,
    pub filter: FilterMode,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            subjects: 12,
            duration_s: 60.0,
            dir: None,
            max_hosts: None,
            pairs: 600,
            filter: FilterMode::ZeroPhase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelKind,
    /// Detection strategies; ignored for Siamese models.
    #[serde(alias = "strategy", default = "default_strategies")]
    pub strategies: OneOrMany<TamperStrategy>,
    /// Must agree with the model's input when given.
    #[serde(default)]
    pub preprocessing: Option<InputKind>,
    #[serde(default)]
    pub dataset: DatasetParams,
    /// Defaults to desk scale 0.25 rather than the full-size 1.0.
    #[serde(default = "default_model_config")]
    pub model_config: ModelConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_strategies() -> OneOrMany<TamperStrategy> {
    OneOrMany::Many(TamperStrategy::ALL.to_vec())
}

fn default_model_config() -> ModelConfig {
    ModelConfig::scaled(0.25, 0)
}

fn default_repeats() -> usize {
    25
}

impl ExperimentSpec {
    pub fn new(model: ModelKind, strategies: &[TamperStrategy]) -> Self {
        Self {
            model,
            strategies: OneOrMany::Many(strategies.to_vec()),
            preprocessing: None,
            dataset: DatasetParams::default(),
            model_config: default_model_config(),
            hyper: Hyper::default(),
            repeats: default_repeats(),
            master_seed: 0,
        }
    }

    /// All problems at once, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = self.preprocessing {
            if p != self.model.input_kind() {
                out.push(format!(
                    "preprocessing: {} takes {:?} input, not {:?}",
                    self.model.title(),
                    self.model.input_kind(),
                    p
                ));
            }
        }
        if !self.model.is_siamese() && self.strategies.to_vec().is_empty() {
            out.push("strategies: at least one strategy is required".into());
        }
        if let Err(e) = self.model_config.validate() {
            out.push(format!("model_config: {e}"));
        }
        if let Err(e) = self.hyper.validate() {
            out.push(format!("hyper: {e}"));
        }
        if self.repeats == 0 {
            out.push("repeats: must be at least 1".into());
        }
        let d = &self.dataset;
        if d.dir.is_none() && d.subjects < 2 {
            out.push("dataset.subjects: need at least 2".into());
        }
        if d.dir.is_none() && !(d.duration_s >= WINDOW as f64 / data::SAMPLE_RATE as f64) {
            out.push(format!("dataset.duration_s: {} s is shorter than one 4 s window", d.duration_s));
        }
        if d.max_hosts == Some(0) {
            out.push("dataset.max_hosts: must be positive".into());
        }
        if self.model.is_siamese() && d.pairs < 10 {
            out.push("dataset.pairs: need at least 10".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            invalid(p.join("; "))
        }
    }

    /// Strategy rows in the report; verification has a single row.
    pub fn tasks(&self) -> Vec<Option<TamperStrategy>> {
        if self.model.is_siamese() {
            vec![None]
        } else {
            self.strategies.to_vec().into_iter().map(Some).collect()
        }
    }

    pub fn load_records(&self) -> Result<Vec<EcgRecord>> {
        match &self.dataset.dir {
            Some(dir) => Ok(data::read_dataset(dir)?.1),
            None => Ok(data::synth_dataset(
                derive_seed(self.master_seed, "dataset", 0),
                self.dataset.subjects,
                self.dataset.duration_s,
            )?
            .1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub index: usize,
    pub seed: u64,
    pub ok: bool,
    pub metrics: Option<Metrics>,
    pub confusion: Option<Confusion>,
    pub threshold: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub model: String,
    /// CLI name of the strategy, or "verification".
    pub task: String,
    pub runs: Vec<RunResult>,
    pub succeeded: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

impl ReportEntry {
    pub fn success_rate(&self) -> f64 {
        self.succeeded as f64 / self.runs.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub spec: Option<ExperimentSpec>,
    pub flops_convention: String,
    pub entries: Vec<ReportEntry>,
}

pub const MIN_SUCCESS_RATE: f64 = 0.8;

impl RunReport {
    pub fn meets_success_policy(&self) -> bool {
        self.entries.iter().all(|e| e.success_rate() >= MIN_SUCCESS_RATE)
    }

    /// Concatenates reports, e.g. one per model, into one table.
    pub fn merge(reports: Vec<RunReport>) -> RunReport {
        RunReport {
            schema_version: SCHEMA_VERSION,
            spec: None,
            flops_convention: crate::models::FLOPS_CONVENTION.into(),
            entries: reports.into_iter().flat_map(|r| r.entries).collect(),
        }
    }
}

fn mean_std(ms: &[Metrics]) -> (Metrics, Metrics) {
    let n = ms.len();
    if n == 0 {
        return (Metrics::default(), Metrics::default());
    }
    let get = |f: fn(&Metrics) -> f64| {
        let mean = ms.iter().map(f).sum::<f64>() / n as f64;
        let var = if n > 1 {
            ms.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let a = get(|m| m.accuracy);
    let p = get(|m| m.precision);
    let r = get(|m| m.recall);
    let f = get(|m| m.f1);
    (
        Metrics {
            accuracy: a.0,
            precision: p.0,
            recall: r.0,
            f1: f.0,
        },
        Metrics {
            accuracy: a.1,
            precision: p.1,
            recall: r.1,
            f1: f.1,
        },
    )
}

/// Aggregates per-run results for one (model, task) row.
pub fn summarize(model: &str, task: &str, runs: Vec<RunResult>) -> ReportEntry {
    let ok: Vec<Metrics> = runs.iter().filter_map(|r| r.metrics).collect();
    let (mean, std) = mean_std(&ok);
    ReportEntry {
        model: model.to_string(),
        task: task.to_string(),
        succeeded: ok.len(),
        runs,
        mean,
        std,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for independent repeats.
    pub jobs: usize,
    /// Forces every repeat to use this seed instead of a derived one.
    pub fixed_seed: Option<u64>,
    /// Where to write each run's best checkpoint.
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// Build, split, train, evaluate for one run.
fn single_run(
    spec: &ExperimentSpec,
    pool: &SegmentPool,
    task: Option<TamperStrategy>,
    seed: u64,
    opts: &RunOptions,
    label: &str,
) -> Result<(Metrics, Confusion, Option<f64>, TrainOutcome)> {
    let cfg = ModelConfig {
        seed: derive_seed(seed, "init", 0),
        ..spec.model_config.clone()
    };
    let mut model = Model::build(spec.model, &cfg)?;
    let inputs = InputBuilder::new(spec.model.input_kind(), &model.dims)?;
    let split_seed = derive_seed(seed, "split", 0);
    let train_seed = derive_seed(seed, "train", 0);
    let (metrics_, confusion, threshold, outcome) = match task {
        Some(strategy) => {
            let ds = build_detection_dataset(pool, strategy, &inputs, spec.dataset.max_hosts, derive_seed(seed, "data", 0))?;
            let strata: Vec<bool> = ds.items.iter().map(|i| i.label).collect();
            let sp = split_stratified(&strata, (0.8, 0.1), split_seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.items[i]).collect::<Vec<_>>();
            let set = TrainSet::Detection {
                train: pick(&sp.train),
                val: pick(&sp.val),
            };
            let outcome = train(&mut model, &set, &spec.hyper, train_seed)?;
            let test = pick(&sp.test);
            let p = detector_scores(&model, &test)?;
            let y: Vec<bool> = test.iter().map(|i| i.label).collect();
            let c = Confusion::from_predictions(&detection_predictions(&p), &y)?;
            (c.metrics()?, c, None, outcome)
        }
        None => {
            let ds = build_pair_dataset(pool, &inputs, spec.dataset.pairs, derive_seed(seed, "data", 0))?;
            let strata: Vec<bool> = ds.pairs.iter().map(|p| p.label).collect();
            let sp = split_stratified(&strata, (0.8, 0.1), split_seed)?;
            let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.pairs[i]).collect::<Vec<_>>();
            let set = TrainSet::Pairs {
                train: pick(&sp.train),
                val: pick(&sp.val),
            };
            let outcome = train(&mut model, &set, &spec.hyper, train_seed)?;
            let thr = outcome.threshold.expect("pair training tunes a threshold");
            let test = pick(&sp.test);
            let y: Vec<bool> = test.iter().map(|p| p.label).collect();
            let pred: Vec<bool> = pair_distances(&model, &test)?.iter().map(|d| *d < thr).collect();
            let c = Confusion::from_predictions(&pred, &y)?;
            (c.metrics()?, c, Some(thr), outcome)
        }
    };
    if let Some(dir) = &opts.checkpoint_dir {
        crate::models::save_model(&dir.join(format!("{label}.ckpt")), &model)?;
    }
    Ok((metrics_, confusion, threshold, outcome))
}

/// Runs every (strategy, repeat) of the experiment. Repeat `i` uses
/// `derive_seed(master, "run", i)` for its dataset composition, split,
/// initialization, and training order. Failed runs are recorded and skipped.
pub fn repeat_runs(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunReport> {
    spec.validate()?;
    let records = spec.load_records()?;
    let pool = SegmentPool::from_records(&records, spec.dataset.filter)?;
    let mut entries = Vec::new();
    for task in spec.tasks() {
        let task_name = task.map_or("verification".to_string(), |s| s.cli_name().to_string());
        let jobs: Vec<(usize, u64)> = (0..spec.repeats)
            .map(|i| {
                let base = opts.fixed_seed.unwrap_or_else(|| derive_seed(spec.master_seed, "run", i as u64));
                (i, derive_seed(base, &task_name, 0))
            })
            .collect();
        let run_one = |(i, seed): (usize, u64)| -> RunResult {
            let label = format!("{}_{}_run{:02}", spec.model.cli_name(), task_name, i);
            match single_run(spec, &pool, task, seed, opts, &label) {
                Ok((m, c, thr, outcome)) => {
                    if opts.verbose {
                        eprintln!(
                            "{label}: accuracy {:.4} (best epoch {} of {})",
                            m.accuracy,
                            outcome.best_epoch,
                            outcome.history.len()
                        );
                    }
                    RunResult {
                        index: i,
                        seed,
                        ok: true,
                        metrics: Some(m),
                        confusion: Some(c),
                        threshold: thr,
                        best_epoch: Some(outcome.best_epoch),
                        epochs_run: Some(outcome.history.len()),
                        error: None,
                    }
                }
                Err(e) => {
                    if opts.verbose {
                        eprintln!("{label}: failed: {e}");
                    }
                    RunResult {
                        index: i,
                        seed,
                        ok: false,
                        metrics: None,
                        confusion: None,
                        threshold: None,
                        best_epoch: None,
                        epochs_run: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        };
        let runs = run_parallel(jobs, opts.jobs.max(1), run_one);
        entries.push(summarize(spec.model.title(), &task_name, runs));
    }
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        spec: Some(spec.clone()),
        flops_convention: crate::models::FLOPS_CONVENTION.into(),
        entries,
    })
}

/// Maps `f` over `inputs` on up to `jobs` threads; output order follows input.
fn run_parallel<I, O, F>(inputs: Vec<I>, jobs: usize, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync,
{
    if jobs <= 1 || inputs.len() <= 1 {
        return inputs.into_iter().map(f).collect();
    }
    let n = inputs.len();
    let queue = std::sync::Mutex::new(inputs.into_iter().enumerate().collect::<Vec<_>>());
    let results = std::sync::Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().unwrap().pop();
                let Some((i, x)) = next else { break };
                let out = f(x);
                results.lock().unwrap().push((i, out));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, o)| o).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Formats {
    pub json: bool,
    pub csv: bool,
    pub svg: bool,
}

pub const CSV_HEADER: &str = "model,strategy,runs,succeeded,accuracy_mean,accuracy_std,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std";

pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for e in &report.entries {
        let (m, s) = (e.mean, e.std);
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.model,
            e.task,
            e.runs.len(),
            e.succeeded,
            m.accuracy,
            s.accuracy,
            m.precision,
            s.precision,
            m.recall,
            s.recall,
            m.f1,
            s.f1
        ));
    }
    out
}

/// One example composition per strategy, regenerated from the spec's data.
pub fn example_tampered(spec: &ExperimentSpec, strategy: TamperStrategy) -> Result<tamper::TamperedSegment> {
    let records = spec.load_records()?;
    let pool = SegmentPool::from_records(&records, spec.dataset.filter)?;
    let index = pool.index();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.master_seed, "example", 0));
    let host_idx = rng.random_range(0..pool.segments.len());
    let host = dsp::normalize_segment(&pool.segments[host_idx])?;
    let donor_idx = index
        .iter()
        .find(|((a, s), _)| *a == host.activity && *s != host.subject)
        .map(|(_, v)| v[0])
        .ok_or_else(|| CoreError::Invalid("no donor subject shares the host's activity".into()))?;
    let donor = dsp::normalize_segment(&pool.segments[donor_idx])?;
    let layout = tamper::make_layout(strategy, WINDOW, &mut rng)?;
    tamper::compose(strategy, &layout, &host, &donor, BLEND_WIDTH)
}

/// Writes `<stem>.json`, `<stem>.csv` and, for detection rows,
/// `<stem>_<strategy>.svg` into `dir`. Returns the paths written.
pub fn emit_report(report: &RunReport, dir: &Path, stem: &str, formats: Formats) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if formats.json {
        let p = dir.join(format!("{stem}.json"));
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        crate::write_atomic(&p, text.as_bytes())?;
        written.push(p);
    }
    if formats.csv {
        let p = dir.join(format!("{stem}.csv"));
        crate::write_atomic(&p, report_csv(report).as_bytes())?;
        written.push(p);
    }
    if formats.svg {
        if let Some(spec) = &report.spec {
            for task in spec.tasks().into_iter().flatten() {
                let t = example_tampered(spec, task)?;
                let title = format!("{} host {} donor {}", task.title(), t.host_id, t.donor_id);
                let p = dir.join(format!("{stem}_{}.svg", task.cli_name()));
                crate::write_atomic(&p, tamper::render_svg(&t.samples, &t.mask, &title).as_bytes())?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
