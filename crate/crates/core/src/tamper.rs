//! Host/donor composition with linear blending at every junction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Activity, Segment, WINDOW};
use crate::{invalid, CoreError, Result};

pub const BLEND_WIDTH: usize = 5;
/// round(0.05 * 2048)
pub const FRAGMENT_LEN: usize = 102;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TamperStrategy {
    #[serde(rename = "half5050")]
    Half5050,
    #[serde(rename = "asym7525")]
    Asym7525,
    #[serde(rename = "aba")]
    Aba502525,
    #[serde(rename = "alt50x10")]
    Alternating50x10,
    #[serde(rename = "sporadic20")]
    Sporadic20,
    #[serde(rename = "sporadic50")]
    Sporadic50,
}

impl TamperStrategy {
    pub const ALL: [TamperStrategy; 6] = [
        TamperStrategy::Half5050,
        TamperStrategy::Asym7525,
        TamperStrategy::Aba502525,
        TamperStrategy::Alternating50x10,
        TamperStrategy::Sporadic20,
        TamperStrategy::Sporadic50,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            TamperStrategy::Half5050 => "half5050",
            TamperStrategy::Asym7525 => "asym7525",
            TamperStrategy::Aba502525 => "aba",
            TamperStrategy::Alternating50x10 => "alt50x10",
            TamperStrategy::Sporadic20 => "sporadic20",
            TamperStrategy::Sporadic50 => "sporadic50",
        }
    }

    /// Column title in report tables.
    pub fn title(self) -> &'static str {
        match self {
            TamperStrategy::Half5050 => "50-50",
            TamperStrategy::Asym7525 => "75-25",
            TamperStrategy::Aba502525 => "50-25-25 (ABA)",
            TamperStrategy::Alternating50x10 => "50 + 5x10 alternating",
            TamperStrategy::Sporadic20 => "sporadic 20%",
            TamperStrategy::Sporadic50 => "sporadic 50%",
        }
    }

    pub fn donor_fraction(self) -> f64 {
        match self {
            TamperStrategy::Half5050 | TamperStrategy::Sporadic50 => 0.5,
            TamperStrategy::Asym7525 | TamperStrategy::Aba502525 => 0.25,
            TamperStrategy::Alternating50x10 => 0.3,
            TamperStrategy::Sporadic20 => 0.2,
        }
    }

    /// Donor fragment count for the randomized strategies.
    pub fn sporadic_fragments(self) -> Option<usize> {
        match self {
            TamperStrategy::Sporadic20 => Some(4),
            TamperStrategy::Sporadic50 => Some(10),
            _ => None,
        }
    }
}

impl fmt::Display for TamperStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for TamperStrategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        TamperStrategy::ALL
            .into_iter()
            .find(|t| t.cli_name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                CoreError::Invalid(format!(
                    "unknown strategy '{s}' (expected one of half5050, asym7525, aba, alt50x10, sporadic20, sporadic50)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub source: Source,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperLayout {
    pub length: usize,
    pub spans: Vec<Span>,
}

impl TamperLayout {
    pub fn all_host(length: usize) -> Self {
        Self {
            length,
            spans: vec![Span {
                start: 0,
                end: length,
                source: Source::A,
            }],
        }
    }

    /// Builds contiguous spans from boundary positions; consecutive equal
    /// sources are merged.
    fn from_cuts(length: usize, cuts: &[(usize, Source)]) -> Self {
        let mut spans: Vec<Span> = Vec::new();
        for (i, (start, source)) in cuts.iter().enumerate() {
            let end = cuts.get(i + 1).map_or(length, |c| c.0);
            if end == *start {
                continue;
            }
            match spans.last_mut() {
                Some(last) if last.source == *source => last.end = end,
                _ => spans.push(Span {
                    start: *start,
                    end,
                    source: *source,
                }),
            }
        }
        Self { length, spans }
    }

    pub fn validate(&self) -> Result<()> {
        let mut pos = 0;
        for s in &self.spans {
            if s.start != pos || s.end <= s.start {
                return invalid(format!("span {}..{} breaks the partition at {pos}", s.start, s.end));
            }
            pos = s.end;
        }
        if pos != self.length {
            return invalid(format!("spans cover {pos} of {} samples", self.length));
        }
        if self.spans.windows(2).any(|w| w[0].source == w[1].source) {
            return invalid("adjacent spans share a source");
        }
        Ok(())
    }

    pub fn donor_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.source == Source::B)
    }

    pub fn donor_samples(&self) -> usize {
        self.donor_spans().map(Span::len).sum()
    }

    /// Sample positions where the source switches.
    pub fn junctions(&self) -> Vec<usize> {
        self.spans.iter().skip(1).map(|s| s.start).collect()
    }

    pub fn source_at(&self, i: usize) -> Source {
        self.spans
            .iter()
            .find(|s| s.start <= i && i < s.end)
            .map_or(Source::A, |s| s.source)
    }
}

/// Minimum host samples between sporadic fragments: two half-windows of
/// blending plus a full window of untouched host signal.
pub fn sporadic_gap(blend_width: usize) -> usize {
    2 * blend_width
}

pub fn make_layout<R: Rng>(strategy: TamperStrategy, length: usize, rng: &mut R) -> Result<TamperLayout> {
    make_layout_with_gap(strategy, length, sporadic_gap(BLEND_WIDTH), rng)
}

pub fn make_layout_with_gap<R: Rng>(
    strategy: TamperStrategy,
    length: usize,
    gap: usize,
    rng: &mut R,
) -> Result<TamperLayout> {
    if length != WINDOW {
        return invalid(format!("tamper layouts are defined for {WINDOW} samples, got {length}"));
    }
    let frac = |f: f64| (f * length as f64).round() as usize;
    use Source::{A, B};
    let layout = match strategy {
        TamperStrategy::Half5050 => TamperLayout::from_cuts(length, &[(0, A), (frac(0.5), B)]),
        TamperStrategy::Asym7525 => TamperLayout::from_cuts(length, &[(0, A), (frac(0.75), B)]),
        TamperStrategy::Aba502525 => {
            TamperLayout::from_cuts(length, &[(0, A), (frac(0.5), B), (frac(0.75), A)])
        }
        TamperStrategy::Alternating50x10 => {
            let step = frac(0.1);
            let mut cuts = vec![(0, A)];
            let mut pos = frac(0.5);
            for i in 0..5 {
                cuts.push((pos, if i % 2 == 0 { B } else { A }));
                pos += step;
            }
            TamperLayout::from_cuts(length, &cuts)
        }
        TamperStrategy::Sporadic20 | TamperStrategy::Sporadic50 => {
            let n = strategy.sporadic_fragments().unwrap();
            let f = frac(0.05);
            let need = n * f + (n - 1) * gap;
            if need > length {
                return invalid(format!("{n} fragments of {f} with gap {gap} do not fit in {length}"));
            }
            // Sorted uniform offsets into the slack; adding i*(f+gap) spreads
            // them so every fragment keeps at least `gap` host samples apart.
            let slack = length - need;
            let mut offs: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
            offs.sort_unstable();
            let mut cuts = vec![(0, A)];
            for (i, o) in offs.into_iter().enumerate() {
                let start = o + i * (f + gap);
                cuts.push((start, B));
                cuts.push((start + f, A));
            }
            TamperLayout::from_cuts(length, &cuts)
        }
    };
    layout.validate()?;
    Ok(layout)
}

/// Convex ramp from `prev` to `curr`: `out[i] = (1 - a)·prev[i] + a·curr[i]`
/// with `a = i / (W - 1)`. Equal inputs pass through untouched, and every
/// output lies between its two inputs.
pub fn blend_join(prev: &[f64], curr: &[f64]) -> Result<Vec<f64>> {
    let w = prev.len();
    if curr.len() != w {
        return invalid(format!("blend inputs differ in length: {w} vs {}", curr.len()));
    }
    if w < 2 {
        return invalid(format!("blend width must be at least 2, got {w}"));
    }
    if prev.iter().chain(curr).any(|v| !v.is_finite()) {
        return invalid("blend input is not finite");
    }
    Ok(prev
        .iter()
        .zip(curr)
        .enumerate()
        .map(|(i, (&p, &c))| {
            if p == c {
                return p;
            }
            let a = i as f64 / (w - 1) as f64;
            ((1.0 - a) * p + a * c).clamp(p.min(c), p.max(c))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskLabel {
    A,
    B,
    Blend,
}

/// Start of the blend window for a junction at `j`: `ceil(W/2)` samples
/// before it, shifted inward when it would run off either end.
pub fn blend_window_start(j: usize, width: usize, length: usize) -> usize {
    j.saturating_sub(width.div_ceil(2)).min(length - width)
}

/// Mask and per-sample donor weight implied by a layout and blend width.
pub fn expected_mask(layout: &TamperLayout, width: usize) -> (Vec<MaskLabel>, Vec<f64>) {
    let mut mask = Vec::with_capacity(layout.length);
    let mut weight = Vec::with_capacity(layout.length);
    for s in &layout.spans {
        let (m, w) = match s.source {
            Source::A => (MaskLabel::A, 0.0),
            Source::B => (MaskLabel::B, 1.0),
        };
        mask.extend(std::iter::repeat_n(m, s.len()));
        weight.extend(std::iter::repeat_n(w, s.len()));
    }
    for (k, j) in layout.junctions().into_iter().enumerate() {
        let start = blend_window_start(j, width, layout.length);
        let from_b = layout.spans[k].source == Source::B;
        for i in 0..width {
            let a = i as f64 / (width - 1) as f64;
            mask[start + i] = MaskLabel::Blend;
            weight[start + i] = if from_b { 1.0 - a } else { a };
        }
    }
    (mask, weight)
}

/// Composes host and donor sample-for-sample, then replaces the `width`
/// samples around each junction with a blend from the earlier source to the
/// later one.
pub fn compose_samples(
    layout: &TamperLayout,
    host: &[f64],
    donor: &[f64],
    width: usize,
) -> Result<(Vec<f64>, Vec<MaskLabel>)> {
    layout.validate()?;
    if host.len() != layout.length || donor.len() != layout.length {
        return invalid(format!(
            "sources must have {} samples (host {}, donor {})",
            layout.length,
            host.len(),
            donor.len()
        ));
    }
    if width < 2 || width > layout.length {
        return invalid(format!("blend width {width} out of range"));
    }
    let pick = |src: Source| if src == Source::A { host } else { donor };
    let mut out = vec![0.0; layout.length];
    for s in &layout.spans {
        out[s.start..s.end].copy_from_slice(&pick(s.source)[s.start..s.end]);
    }
    for (k, j) in layout.junctions().into_iter().enumerate() {
        let start = blend_window_start(j, width, layout.length);
        let r = start..start + width;
        let prev = &pick(layout.spans[k].source)[r.clone()];
        let curr = &pick(layout.spans[k + 1].source)[r.clone()];
        out[r].copy_from_slice(&blend_join(prev, curr)?);
    }
    Ok((out, expected_mask(layout, width).0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperedSegment {
    pub samples: Vec<f64>,
    pub mask: Vec<MaskLabel>,
    pub strategy: TamperStrategy,
    pub layout: TamperLayout,
    pub blend_width: usize,
    pub host_id: String,
    pub donor_id: String,
    pub activity: Activity,
}

pub fn compose(
    strategy: TamperStrategy,
    layout: &TamperLayout,
    host: &Segment,
    donor: &Segment,
    width: usize,
) -> Result<TamperedSegment> {
    if host.activity != donor.activity {
        return invalid(format!(
            "host activity {} differs from donor activity {}",
            host.activity, donor.activity
        ));
    }
    if host.subject == donor.subject {
        return invalid(format!("host and donor are both subject {}", host.subject));
    }
    let (samples, mask) = compose_samples(layout, &host.samples, &donor.samples, width)?;
    Ok(TamperedSegment {
        samples,
        mask,
        strategy,
        layout: layout.clone(),
        blend_width: width,
        host_id: host.subject.clone(),
        donor_id: donor.subject.clone(),
        activity: host.activity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionReport {
    pub host: f64,
    pub donor: f64,
    pub blend: f64,
    /// Donor share with blend samples weighted by their ramp coefficient.
    pub donor_weight: f64,
    /// Maximal runs of samples that carry any donor material.
    pub donor_runs: usize,
}

/// Measures a mask after checking that it is the one `layout` implies at
/// blend width `w`.
pub fn mask_fractions(layout: &TamperLayout, mask: &[MaskLabel], w: usize) -> Result<FractionReport> {
    layout.validate()?;
    let n = mask.len();
    if n != layout.length {
        return invalid("mask and layout lengths disagree");
    }
    let (expect, weight) = expected_mask(layout, w);
    if let Some(i) = (0..n).find(|&i| expect[i] != mask[i]) {
        return invalid(format!(
            "mask inconsistent with layout at sample {i}: {:?} vs expected {:?}",
            mask[i], expect[i]
        ));
    }
    let count = |l: MaskLabel| mask.iter().filter(|m| **m == l).count() as f64 / n as f64;
    let mut runs = 0;
    let mut inside = false;
    for (m, w) in mask.iter().zip(&weight) {
        let donor = *m == MaskLabel::B || (*m == MaskLabel::Blend && *w > 0.0);
        if donor && !inside {
            runs += 1;
        }
        inside = donor || (inside && *m == MaskLabel::Blend);
    }
    Ok(FractionReport {
        host: count(MaskLabel::A),
        donor: count(MaskLabel::B),
        blend: count(MaskLabel::Blend),
        donor_weight: weight.iter().sum::<f64>() / n as f64,
        donor_runs: runs,
    })
}

/// [`mask_fractions`] plus a check of the donor share against the
/// strategy's nominal fraction within 1% absolute.
pub fn verify_mask(t: &TamperedSegment) -> Result<FractionReport> {
    if t.samples.len() != t.mask.len() {
        return invalid("mask and samples lengths disagree");
    }
    let report = mask_fractions(&t.layout, &t.mask, t.blend_width)?;
    let nominal = t.strategy.donor_fraction();
    if (report.donor_weight - nominal).abs() > 0.01 {
        return invalid(format!(
            "donor share {:.4} differs from nominal {:.2} by more than 1%",
            report.donor_weight, nominal
        ));
    }
    Ok(report)
}

/// `(label, run length)` pairs.
pub fn mask_rle(mask: &[MaskLabel]) -> Vec<(MaskLabel, usize)> {
    let mut out: Vec<(MaskLabel, usize)> = Vec::new();
    for m in mask {
        match out.last_mut() {
            Some((l, n)) if l == m => *n += 1,
            _ => out.push((*m, 1)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperSidecar {
    pub strategy: TamperStrategy,
    pub seed: u64,
    pub host_id: String,
    pub donor_id: String,
    pub activity: Activity,
    pub host_start: usize,
    pub donor_start: usize,
    pub blend_width: usize,
    pub spans: Vec<Span>,
    pub mask_rle: Vec<(MaskLabel, usize)>,
}

/// Writes `<stem>.f64` (little-endian samples) and `<stem>.json`.
pub fn save_tampered(dir: &Path, stem: &str, t: &TamperedSegment, sidecar: &TamperSidecar) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.samples.len() * 8);
    for v in &t.samples {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    crate::write_atomic(&dir.join(format!("{stem}.f64")), &bytes)?;
    crate::write_atomic(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(sidecar)?.as_bytes(),
    )
}

/// Signal trace over color bands: host green, donor red, blends amber.
pub fn render_svg(samples: &[f64], mask: &[MaskLabel], title: &str) -> String {
    let (w, h, pad) = (1200.0, 300.0, 20.0);
    let n = samples.len().max(2);
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    s.push_str(&format!("<title>{}</title>\n", xml_escape(title)));
    let mut pos = 0;
    for (label, len) in mask_rle(mask) {
        let (fill, opacity) = match label {
            MaskLabel::A => ("#2e8b57", 0.15),
            MaskLabel::B => ("#c0392b", 0.20),
            MaskLabel::Blend => ("#f39c12", 0.55),
        };
        let x0 = x(pos);
        let x1 = x((pos + len).min(n - 1));
        s.push_str(&format!(
            "<rect class=\"{label:?}\" x=\"{x0:.2}\" y=\"{pad}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\" fill-opacity=\"{opacity}\"/>\n",
            (x1 - x0).max(0.5),
            h - 2.0 * pad
        ));
        pos += len;
    }
    s.push_str("<polyline fill=\"none\" stroke=\"#1b1b1b\" stroke-width=\"1\" points=\"");
    for (i, v) in samples.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{:.2},{:.2}", x(i), y(*v)));
    }
    s.push_str("\"/>\n</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
