//! Toy multi-head attention stack over synthetic hidden states.
//!
//! Queries and keys are linear projections of per-position hidden vectors,
//! rotated by a (possibly interpolated) frequency schedule. The stack
//! produces reference and quantized logits and scores candidate weight
//! configurations against a frozen full-precision reference, which is the
//! objective minimized by the band-scale search. Values and the softmax
//! output path are out of scope; the analysis lives entirely in the logits.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{PiScheme, ScaledSchedule};
use crate::mat::{dot, Matrix};
use crate::quant::{quantize_minmax, QuantSpec};
use crate::rope::{FrequencySchedule, Position};

/// Query/key projection weights for all heads, plus the pair layout.
///
/// Both matrices have one row per output coordinate, `n_heads * d_h` rows in
/// total: row `r` feeds head `r / d_h` and RoPE pair `(r % d_h) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    n_heads: usize,
    d_h: usize,
    w_q: Matrix<f64>,
    w_k: Matrix<f64>,
}

impl AttentionWeights {
    pub fn new(n_heads: usize, d_h: usize, w_q: Matrix<f64>, w_k: Matrix<f64>) -> Result<Self> {
        if n_heads == 0 || d_h < 2 || d_h % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "need n_heads >= 1 and even d_h >= 2, got {n_heads} heads, d_h {d_h}"
            )));
        }
        let rows = n_heads * d_h;
        if w_q.rows() != rows || w_k.rows() != rows {
            return Err(Error::Shape(format!(
                "projection rows {} / {} vs {rows} (= {n_heads} heads x {d_h})",
                w_q.rows(),
                w_k.rows()
            )));
        }
        if w_q.cols() != w_k.cols() || w_q.cols() == 0 {
            return Err(Error::Shape(format!(
                "projection widths {} vs {}",
                w_q.cols(),
                w_k.cols()
            )));
        }
        Ok(Self { n_heads, d_h, w_q, w_k })
    }

    /// Synthetic weights: Gaussian entries with standard deviation
    /// `1 / sqrt(d_model)`, an optional geometric amplitude ramp across pair
    /// frequencies (`pair_gain` multiplies the lowest-frequency pair's rows,
    /// ramping from 1 at the highest), and an optional sparse set of
    /// amplified rows standing in for outlier channels.
    pub fn synthetic(
        d_model: usize,
        n_heads: usize,
        d_h: usize,
        seed: u64,
        pair_gain: f64,
        row_outlier_frac: f64,
        row_outlier_gain: f64,
    ) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::InvalidDimension("d_model must be positive".into()));
        }
        if !(pair_gain > 0.0) || !(row_outlier_gain >= 1.0) {
            return Err(Error::Config(format!(
                "need pair_gain > 0 and row_outlier_gain >= 1, got {pair_gain} and {row_outlier_gain}"
            )));
        }
        if !(0.0..1.0).contains(&row_outlier_frac) {
            return Err(Error::Config(format!(
                "row_outlier_frac must be in [0, 1), got {row_outlier_frac}"
            )));
        }
        if n_heads == 0 || d_h < 2 || d_h % 2 != 0 {
            return Err(Error::InvalidDimension(format!(
                "need n_heads >= 1 and even d_h >= 2, got {n_heads} heads, d_h {d_h}"
            )));
        }
        let rows = n_heads * d_h;
        let half = d_h / 2;
        let std = 1.0 / (d_model as f64).sqrt();
        let row_gain = |r: usize| {
            let pair = (r % d_h) / 2;
            if half == 1 {
                1.0
            } else {
                pair_gain.powf(pair as f64 / (half - 1) as f64)
            }
        };

        let mut build = |rng: &mut ChaCha8Rng| -> Matrix<f64> {
            let n_hot = (row_outlier_frac * rows as f64).floor() as usize;
            let hot = rand::seq::index::sample(rng, rows, n_hot).into_vec();
            let mut m = Matrix::from_fn(rows, d_model, |r, _| {
                std * row_gain(r) * rng.sample::<f64, _>(StandardNormal)
            });
            for r in hot {
                m.scale_row(r, row_outlier_gain);
            }
            m
        };
        let mut rng_q = ChaCha8Rng::seed_from_u64(seed ^ 0x71);
        let mut rng_k = ChaCha8Rng::seed_from_u64(seed ^ 0x4b);
        let w_q = build(&mut rng_q);
        let w_k = build(&mut rng_k);
        Self::new(n_heads, d_h, w_q, w_k)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn d_model(&self) -> usize {
        self.w_q.cols()
    }

    pub fn w_q(&self) -> &Matrix<f64> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix<f64> {
        &self.w_k
    }

    /// RoPE pair index fed by output row `r`.
    pub fn pair_of_row(&self, r: usize) -> usize {
        (r % self.d_h) / 2
    }

    /// Clone with replaced projection matrices (shapes must match).
    pub fn with_projections(&self, w_q: Matrix<f64>, w_k: Matrix<f64>) -> Result<Self> {
        Self::new(self.n_heads, self.d_h, w_q, w_k)
    }
}

/// Where a hidden-state sequence came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StatesOrigin {
    Synthetic { seed: u64, outlier_frac: f64, outlier_gain: f64, tail_df: f64 },
    File(String),
}

/// A sequence of hidden vectors, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub data: Matrix<f64>,
    pub origin: StatesOrigin,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn d_model(&self) -> usize {
        self.data.cols()
    }
}

/// Generate synthetic hidden states.
///
/// Base coordinates are standard Gaussian. A fixed random subset of
/// `floor(outlier_frac * d_model)` channels is drawn Student-t with
/// `tail_df` degrees of freedom and scaled by `outlier_gain`, modeling
/// channels that concentrate disproportionate tail mass. Deterministic in
/// `seed`.
pub fn gen_hidden_states(
    len: usize,
    d_model: usize,
    outlier_frac: f64,
    outlier_gain: f64,
    tail_df: f64,
    seed: u64,
) -> Result<HiddenStates> {
    if len == 0 || d_model == 0 {
        return Err(Error::Config(format!(
            "need len >= 1 and d_model >= 1, got {len} x {d_model}"
        )));
    }
    if !(0.0..1.0).contains(&outlier_frac) {
        return Err(Error::Config(format!(
            "outlier_frac must be in [0, 1), got {outlier_frac}"
        )));
    }
    if !(outlier_gain >= 1.0) {
        return Err(Error::Config(format!("outlier_gain must be >= 1, got {outlier_gain}")));
    }
    if !(tail_df > 0.0) || !tail_df.is_finite() {
        return Err(Error::Config(format!("tail_df must be finite and positive, got {tail_df}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_outliers = (outlier_frac * d_model as f64).floor() as usize;
    let outlier_set = rand::seq::index::sample(&mut rng, d_model, n_outliers).into_vec();
    let mut is_outlier = vec![false; d_model];
    for c in outlier_set {
        is_outlier[c] = true;
    }
    let student = StudentT::new(tail_df)
        .map_err(|e| Error::Config(format!("bad tail_df {tail_df}: {e}")))?;

    let data = Matrix::from_fn(len, d_model, |_, c| {
        if is_outlier[c] {
            outlier_gain * rng.sample::<f64, _>(student)
        } else {
            rng.sample::<f64, _>(StandardNormal)
        }
    });
    Ok(HiddenStates {
        data,
        origin: StatesOrigin::Synthetic { seed, outlier_frac, outlier_gain, tail_df },
    })
}

/// A calibration set: one hidden-state sequence per target length, with
/// normalized per-length weights (proportional to length by default).
#[derive(Debug, Clone)]
pub struct DevSet {
    items: Vec<HiddenStates>,
    weights: Vec<f64>,
}

impl DevSet {
    pub fn new(items: Vec<HiddenStates>, weights: Option<Vec<f64>>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("dev set must not be empty".into()));
        }
        let raw = match weights {
            Some(w) => {
                if w.len() != items.len() {
                    return Err(Error::Config(format!(
                        "{} weights for {} items",
                        w.len(),
                        items.len()
                    )));
                }
                if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::Config("length weights must be finite and positive".into()));
                }
                w
            }
            None => items.iter().map(|it| it.len() as f64).collect(),
        };
        let total: f64 = raw.iter().sum();
        let weights = raw.into_iter().map(|w| w / total).collect();
        Ok(Self { items, weights })
    }

    pub fn items(&self) -> &[HiddenStates] {
        &self.items
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.len()).collect()
    }
}

/// Query/key logits for every head: `logits[h][(qi, ki)] = q(h, m_qi) . k(h, n_ki)`.
///
/// With `quant` present, both projections are replaced by their group-wise
/// min-max reconstructions before projecting (weight-only path); the rotation
/// code is shared with the full-precision path.
pub fn forward_logits(
    weights: &AttentionWeights,
    states: &HiddenStates,
    sched: &FrequencySchedule<f64>,
    scheme: &PiScheme<f64>,
    quant: Option<&QuantSpec<f64>>,
    qpos: &[usize],
    kpos: &[usize],
) -> Result<Vec<Matrix<f64>>> {
    if states.d_model() != weights.d_model() {
        return Err(Error::Shape(format!(
            "hidden width {} vs projection width {}",
            states.d_model(),
            weights.d_model()
        )));
    }
    if sched.dim() != weights.d_h() {
        return Err(Error::Shape(format!(
            "schedule dim {} vs head dim {}",
            sched.dim(),
            weights.d_h()
        )));
    }
    if let Some(&p) = qpos.iter().chain(kpos).find(|p| **p >= states.len()) {
        return Err(Error::Shape(format!(
            "position {p} outside sequence of length {}",
            states.len()
        )));
    }

    let scaled = ScaledSchedule::new(sched.clone(), scheme.clone())?;
    let (w_q, w_k) = match quant {
        None => (weights.w_q().clone(), weights.w_k().clone()),
        Some(spec) => (
            quantize_minmax(weights.w_q(), spec)?.reconstructed,
            quantize_minmax(weights.w_k(), spec)?.reconstructed,
        ),
    };

    let project_rotated = |w: &Matrix<f64>, positions: &[usize]| -> Result<Matrix<f64>> {
        let sub = Matrix::from_fn(positions.len(), states.d_model(), |r, c| {
            states.data.get(positions[r], c)
        });
        let mut projected = sub.mul_transpose(w)?;
        for (r, &p) in positions.iter().enumerate() {
            let m = Position::from_index(p);
            let row = projected.row_mut(r);
            for head_slice in row.chunks_exact_mut(weights.d_h()) {
                scaled.rotate_in_place(head_slice, m);
            }
        }
        Ok(projected)
    };

    let q_rot = project_rotated(&w_q, qpos)?;
    let k_rot = project_rotated(&w_k, kpos)?;

    let d_h = weights.d_h();
    let mut out = Vec::with_capacity(weights.n_heads());
    for h in 0..weights.n_heads() {
        let lo = h * d_h;
        let hi = lo + d_h;
        let logits = Matrix::from_fn(qpos.len(), kpos.len(), |qi, ki| {
            dot(&q_rot.row(qi)[lo..hi], &k_rot.row(ki)[lo..hi])
        });
        out.push(logits);
    }
    Ok(out)
}

/// Scoring rule for comparing a candidate pipeline against the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Mean squared logit deviation.
    LogitMse,
    /// Mean KL divergence of attention rows, reference against candidate.
    AttnKl,
    /// Per-length scores supplied from outside (for example true
    /// perplexities computed elsewhere).
    ExternalScore,
}

/// Per-length reference data frozen when the objective is built.
#[derive(Debug, Clone)]
struct ReferenceEntry {
    len: usize,
    qpos: Vec<usize>,
    logits: Vec<Matrix<f64>>,
}

/// A deterministic objective: the scoring rule, the sampled query positions
/// and the full-precision reference logits per dev-set length.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: ObjectiveKind,
    d_h: usize,
    entries: Vec<ReferenceEntry>,
    external: Vec<(usize, f64)>,
}

/// Query positions scored per sequence.
pub const QUERIES_PER_LENGTH: usize = 32;

/// Sample `count` distinct query positions in `[0, len)`, spread
/// log-uniformly and emphasizing positions near the end of the sequence
/// (where relative offsets are largest). Deterministic in `seed`.
pub fn sample_query_positions(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    picked.insert(0usize);
    picked.insert(len - 1);
    while picked.len() < count {
        let u: f64 = rng.gen();
        let x = (u * (len as f64).ln()).exp();
        let p = len.saturating_sub(x.round() as usize).min(len - 1);
        picked.insert(p);
    }
    picked.into_iter().collect()
}

impl Objective {
    /// Freeze a reference snapshot: full-precision logits of `weights` under
    /// `scheme` at seeded query positions, for every dev-set item.
    pub fn build(
        kind: ObjectiveKind,
        weights: &AttentionWeights,
        sched: &FrequencySchedule<f64>,
        scheme: &PiScheme<f64>,
        devset: &DevSet,
        seed: u64,
    ) -> Result<Self> {
        if kind == ObjectiveKind::ExternalScore {
            return Err(Error::Config(
                "external objectives are built with Objective::external".into(),
            ));
        }
        let mut entries = Vec::with_capacity(devset.items().len());
        for states in devset.items() {
            let len = states.len();
            let qpos = sample_query_positions(
                len,
                QUERIES_PER_LENGTH,
                seed.wrapping_add((len as u64).wrapping_mul(0x9e3779b97f4a7c15)),
            );
            let kpos: Vec<usize> = (0..len).collect();
            let logits = forward_logits(weights, states, sched, scheme, None, &qpos, &kpos)?;
            entries.push(ReferenceEntry { len, qpos, logits });
        }
        Ok(Self { kind, d_h: weights.d_h(), entries, external: Vec::new() })
    }

    /// An objective that simply combines externally computed per-length
    /// scores with the dev-set weights.
    pub fn external(scores: Vec<(usize, f64)>) -> Self {
        Self { kind: ObjectiveKind::ExternalScore, d_h: 0, entries: Vec::new(), external: scores }
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    /// Query positions frozen for the item of length `len`.
    pub fn query_positions(&self, len: usize) -> Option<&[usize]> {
        self.entries.iter().find(|e| e.len == len).map(|e| e.qpos.as_slice())
    }
}

/// A weighted score plus its per-length breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub total: f64,
    pub per_length: Vec<(usize, f64)>,
}

/// Row-wise softmax with the conventional `1/sqrt(d_h)` temperature.
fn softmax_row(logits: &[f64], d_h: usize) -> Vec<f64> {
    let scale = 1.0 / (d_h as f64).sqrt();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v * scale));
    let exps: Vec<f64> = logits.iter().map(|v| (v * scale - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Score a candidate pipeline against the objective's reference.
///
/// For the logit objectives this runs the candidate forward pass (optionally
/// quantized) at the frozen query positions and compares with the stored
/// full-precision logits; the total is the weighted sum of per-length scores.
pub fn score(
    objective: &Objective,
    weights: &AttentionWeights,
    sched: &FrequencySchedule<f64>,
    scheme: &PiScheme<f64>,
    quant: Option<&QuantSpec<f64>>,
    devset: &DevSet,
) -> Result<Score> {
    if objective.kind == ObjectiveKind::ExternalScore {
        let lengths = devset.lengths();
        let mut per_length = Vec::with_capacity(lengths.len());
        for &len in &lengths {
            let found = objective
                .external
                .iter()
                .find(|(l, _)| *l == len)
                .ok_or_else(|| {
                    Error::ReferenceMismatch(format!("no external score for length {len}"))
                })?;
            per_length.push(*found);
        }
        let total = per_length
            .iter()
            .zip(devset.weights())
            .map(|((_, s), w)| w * s)
            .sum();
        return Ok(Score { total, per_length });
    }

    if objective.entries.len() != devset.items().len() {
        return Err(Error::ReferenceMismatch(format!(
            "reference has {} lengths, dev set has {}",
            objective.entries.len(),
            devset.items().len()
        )));
    }
    if objective.d_h != weights.d_h() {
        return Err(Error::ReferenceMismatch(format!(
            "reference head dim {} vs weights {}",
            objective.d_h,
            weights.d_h()
        )));
    }

    let mut per_length = Vec::with_capacity(devset.items().len());
    for (states, entry) in devset.items().iter().zip(&objective.entries) {
        if states.len() != entry.len {
            return Err(Error::ReferenceMismatch(format!(
                "dev item of length {} vs reference length {}",
                states.len(),
                entry.len
            )));
        }
        let kpos: Vec<usize> = (0..entry.len).collect();
        let candidate =
            forward_logits(weights, states, sched, scheme, quant, &entry.qpos, &kpos)?;
        let value = match objective.kind {
            ObjectiveKind::LogitMse => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for (cand, reference) in candidate.iter().zip(&entry.logits) {
                    for (c, r) in cand.data().iter().zip(reference.data()) {
                        let e = c - r;
                        sum += e * e;
                        count += 1;
                    }
                }
                sum / count as f64
            }
            ObjectiveKind::AttnKl => {
                let mut sum = 0.0;
                let mut rows = 0usize;
                for (cand, reference) in candidate.iter().zip(&entry.logits) {
                    for qi in 0..cand.rows() {
                        let p = softmax_row(reference.row(qi), objective.d_h);
                        let q = softmax_row(cand.row(qi), objective.d_h);
                        sum += p
                            .iter()
                            .zip(&q)
                            .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi.ln() - qi.ln()) } else { 0.0 })
                            .sum::<f64>();
                        rows += 1;
                    }
                }
                sum / rows as f64
            }
            ObjectiveKind::ExternalScore => unreachable!(),
        };
        per_length.push((entry.len, value));
    }

    let total = per_length
        .iter()
        .zip(devset.weights())
        .map(|((_, s), w)| w * s)
        .sum();
    Ok(Score { total, per_length })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::Grouping;

    fn small_setup() -> (AttentionWeights, FrequencySchedule<f64>, DevSet) {
        let weights = AttentionWeights::synthetic(32, 2, 8, 9, 1.0, 0.0, 1.0).unwrap();
        let sched = FrequencySchedule::new(8, 10000.0).unwrap();
        let items = vec![
            gen_hidden_states(64, 32, 0.0, 1.0, 3.0, 101).unwrap(),
            gen_hidden_states(128, 32, 0.0, 1.0, 3.0, 102).unwrap(),
        ];
        let devset = DevSet::new(items, None).unwrap();
        (weights, sched, devset)
    }

    #[test]
    fn gen_is_deterministic() {
        let a = gen_hidden_states(64, 16, 0.1, 5.0, 3.0, 7).unwrap();
        let b = gen_hidden_states(64, 16, 0.1, 5.0, 3.0, 7).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn gen_base_channels_are_unit_variance() {
        let h = gen_hidden_states(512, 256, 0.0, 1.0, 3.0, 11).unwrap();
        let n = (512 * 256) as f64;
        let var = h.data.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn gen_outlier_channels_have_heavier_tails() {
        let h = gen_hidden_states(2048, 256, 0.05, 5.0, 3.0, 13).unwrap();
        let StatesOrigin::Synthetic { seed, .. } = h.origin else { panic!() };
        // recover the channel subset with the same rng stream
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hot = rand::seq::index::sample(&mut rng, 256, 12).into_vec();
        let mut is_hot = vec![false; 256];
        for c in hot {
            is_hot[c] = true;
        }
        let mut hot_abs = Vec::new();
        let mut base_abs = Vec::new();
        for r in 0..2048 {
            for c in 0..256 {
                let v = h.data.get(r, c).abs();
                if is_hot[c] {
                    hot_abs.push(v);
                } else {
                    base_abs.push(v);
                }
            }
        }
        let q = |mut v: Vec<f64>| {
            v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            v[((v.len() as f64 * 0.999).ceil() as usize).min(v.len()) - 1]
        };
        let (qh, qb) = (q(hot_abs), q(base_abs));
        assert!(qh >= 3.0 * qb, "hot {qh} vs base {qb}");
    }

    #[test]
    fn gen_rejects_bad_config() {
        assert!(gen_hidden_states(0, 16, 0.0, 1.0, 3.0, 1).is_err());
        assert!(gen_hidden_states(8, 16, 1.0, 1.0, 3.0, 1).is_err());
        assert!(gen_hidden_states(8, 16, 0.1, 0.5, 3.0, 1).is_err());
        assert!(gen_hidden_states(8, 16, 0.1, 2.0, 0.0, 1).is_err());
    }

    #[test]
    fn zero_offset_logits_equal_unrotated_products() {
        let (weights, sched, devset) = small_setup();
        let states = &devset.items()[0];
        let scheme = PiScheme::identity();
        let logits =
            forward_logits(&weights, states, &sched, &scheme, None, &[17], &[17]).unwrap();
        let h = states.data.row(17);
        let q = weights.w_q().matvec(h).unwrap();
        let k = weights.w_k().matvec(h).unwrap();
        for (head, l) in logits.iter().enumerate() {
            let lo = head * 8;
            let expect = dot(&q[lo..lo + 8], &k[lo..lo + 8]);
            assert!((l.get(0, 0) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn logits_depend_only_on_offset_for_fixed_content() {
        let (weights, sched, _) = small_setup();
        // identical hidden vector at every position isolates the offset
        let proto = gen_hidden_states(1, 32, 0.0, 1.0, 3.0, 55).unwrap();
        let states = HiddenStates {
            data: Matrix::from_fn(64, 32, |_, c| proto.data.get(0, c)),
            origin: proto.origin.clone(),
        };
        let scheme = PiScheme::identity();
        let l1 =
            forward_logits(&weights, &states, &sched, &scheme, None, &[3], &[10]).unwrap();
        let l2 =
            forward_logits(&weights, &states, &sched, &scheme, None, &[40], &[47]).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert!((a.get(0, 0) - b.get(0, 0)).abs() < 1e-9);
        }
    }

    #[test]
    fn sixteen_bit_weights_track_full_precision() {
        let (weights, sched, devset) = small_setup();
        let states = &devset.items()[1];
        let scheme = PiScheme::linear(64, 128).unwrap();
        let qpos: Vec<usize> = (0..states.len()).step_by(7).collect();
        let kpos: Vec<usize> = (0..states.len()).collect();
        let spec = QuantSpec::minmax(16, Grouping::Size(128));
        let fp =
            forward_logits(&weights, states, &sched, &scheme, None, &qpos, &kpos).unwrap();
        let qt =
            forward_logits(&weights, states, &sched, &scheme, Some(&spec), &qpos, &kpos).unwrap();
        let max_s = fp.iter().map(|m| m.max_abs()).fold(0.0f64, f64::max);
        let max_err = fp
            .iter()
            .zip(&qt)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-2 * max_s, "err {max_err} vs scale {max_s}");
    }

    #[test]
    fn out_of_range_positions_rejected() {
        let (weights, sched, devset) = small_setup();
        let states = &devset.items()[0];
        let scheme = PiScheme::identity();
        assert!(matches!(
            forward_logits(&weights, states, &sched, &scheme, None, &[64], &[0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn unquantized_score_is_zero() {
        let (weights, sched, devset) = small_setup();
        let scheme = PiScheme::linear(64, 128).unwrap();
        for kind in [ObjectiveKind::LogitMse, ObjectiveKind::AttnKl] {
            let obj = Objective::build(kind, &weights, &sched, &scheme, &devset, 1).unwrap();
            let s = score(&obj, &weights, &sched, &scheme, None, &devset).unwrap();
            assert_eq!(s.total, 0.0, "{kind:?}");
        }
    }

    #[test]
    fn single_length_weight_one_returns_raw_score() {
        let weights = AttentionWeights::synthetic(32, 2, 8, 9, 1.0, 0.0, 1.0).unwrap();
        let sched = FrequencySchedule::new(8, 10000.0).unwrap();
        let items = vec![gen_hidden_states(96, 32, 0.0, 1.0, 3.0, 300).unwrap()];
        let devset = DevSet::new(items, None).unwrap();
        let scheme = PiScheme::identity();
        let obj =
            Objective::build(ObjectiveKind::LogitMse, &weights, &sched, &scheme, &devset, 2)
                .unwrap();
        let spec = QuantSpec::minmax(4, Grouping::PerTensor);
        let s = score(&obj, &weights, &sched, &scheme, Some(&spec), &devset).unwrap();
        assert_eq!(s.total, s.per_length[0].1);
        assert!(s.total > 0.0);
    }

    #[test]
    fn weight_scaling_invariance() {
        let (weights, sched, devset) = small_setup();
        let scheme = PiScheme::identity();
        let obj =
            Objective::build(ObjectiveKind::LogitMse, &weights, &sched, &scheme, &devset, 3)
                .unwrap();
        let spec = QuantSpec::minmax(4, Grouping::PerTensor);
        let s1 = score(&obj, &weights, &sched, &scheme, Some(&spec), &devset).unwrap();
        // doubled weights renormalize to the same distribution
        let doubled = DevSet::new(
            devset.items().to_vec(),
            Some(devset.weights().iter().map(|w| 2.0 * w).collect()),
        )
        .unwrap();
        let s2 = score(&obj, &weights, &sched, &scheme, Some(&spec), &doubled).unwrap();
        assert!((s1.total - s2.total).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let row = [1.0, -2.0, 0.5, 7.0, -3.3];
        let p = softmax_row(&row, 64);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reference_mismatch_detected() {
        let (weights, sched, devset) = small_setup();
        let scheme = PiScheme::identity();
        let obj =
            Objective::build(ObjectiveKind::LogitMse, &weights, &sched, &scheme, &devset, 4)
                .unwrap();
        let other = DevSet::new(
            vec![gen_hidden_states(32, 32, 0.0, 1.0, 3.0, 999).unwrap()],
            None,
        )
        .unwrap();
        assert!(matches!(
            score(&obj, &weights, &sched, &scheme, None, &other),
            Err(Error::ReferenceMismatch(_))
        ));
    }

    #[test]
    fn external_scores_combine_with_weights() {
        let items = vec![
            gen_hidden_states(64, 8, 0.0, 1.0, 3.0, 1).unwrap(),
            gen_hidden_states(128, 8, 0.0, 1.0, 3.0, 2).unwrap(),
        ];
        let devset = DevSet::new(items, None).unwrap();
        let obj = Objective::external(vec![(64, 3.0), (128, 6.0)]);
        let weights = AttentionWeights::synthetic(8, 1, 4, 0, 1.0, 0.0, 1.0).unwrap();
        let sched = FrequencySchedule::new(4, 10000.0).unwrap();
        let s =
            score(&obj, &weights, &sched, &PiScheme::identity(), None, &devset).unwrap();
        let w = devset.weights();
        assert!((s.total - (w[0] * 3.0 + w[1] * 6.0)).abs() < 1e-12);
    }

    #[test]
    fn query_positions_are_deterministic_and_sorted() {
        let a = sample_query_positions(4096, 32, 77);
        let b = sample_query_positions(4096, 32, 77);
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a[0], 0);
        assert_eq!(*a.last().unwrap(), 4095);
        let tiny = sample_query_positions(8, 32, 77);
        assert_eq!(tiny, (0..8).collect::<Vec<_>>());
    }
}
