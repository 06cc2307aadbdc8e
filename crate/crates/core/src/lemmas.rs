//! Randomized numerical checks of the guidance identities: additivity of
//! independent condition gradients, the dependent-chain decomposition, and
//! the temperature-vs-scale ordering for softmax and sigmoid heads.

use std::fmt::Write as _;

use dxp_autodiff::{Tape, Tensor};
use rand::Rng;

use crate::error::Result;
use crate::guidance::{
    cond_log_prob, cond_log_prob_grad, cond_log_prob_terms, lemma3_check, sigmoid, softmax, ConditionTarget,
    GuidanceMode, GuidanceSpec, Guided, LinearGaussianCondition,
};
use crate::models::{Network, Segmenter};
use crate::nn::bind;
use crate::rng::{standard_normal, SeedStream};
use crate::sampling::{GaussianOracle, ScoreSource};
use crate::schedule::{NoiseSchedule, T_MIN};

pub const ADDITIVITY_TOL: f64 = 1e-10;
pub const SIGMOID_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideCounts {
    pub trials: usize,
    pub holds: usize,
}

impl SideCounts {
    fn record(&mut self, ok: bool) {
        self.trials += 1;
        self.holds += usize::from(ok);
    }

    pub fn all(&self) -> bool {
        self.holds == self.trials
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lemma3Stats {
    pub trials: usize,
    /// Verdicts with the bisected crossing point.
    pub above: SideCounts,
    pub below: SideCounts,
    /// Verdicts with the exact crossing threshold.
    pub exact_above: SideCounts,
    pub exact_below: SideCounts,
    pub y_m_in_range: usize,
    pub mean_gap: f64,
    /// Largest `|sigmoid(y) - softmax([0, y])_1|`.
    pub sigmoid_err: f64,
    /// Sigmoid heads checked through the two-class softmax.
    pub sigmoid_cases: SideCounts,
    /// `tau = 1` and `s = 1` factors were bit-identical in every trial.
    pub unit_bit_equal: bool,
}

impl Lemma3Stats {
    pub fn passed(&self) -> bool {
        self.above.all() && self.below.all()
    }
}

/// Randomized trials over logit vectors of dimension 2 to 8 with
/// `s = 1/tau` alternating between 2 and 3.
pub fn lemma3_trials(trials: usize, seed: u64) -> Result<Lemma3Stats> {
    let stream = SeedStream::new(seed).substream("lemma3");
    let mut st = Lemma3Stats {
        unit_bit_equal: true,
        ..Default::default()
    };
    let mut gap_sum = 0.0;
    for k in 0..trials {
        let mut rng = stream.rng(k as u64);
        let dim = rng.random_range(2..=8);
        let logits: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let target = rng.random_range(0..dim);
        let s = if k % 2 == 0 { 2.0 } else { 3.0 };
        let out = lemma3_check(&logits, target, 1.0 / s)?;
        let above = logits[target] >= out.y_m;
        if above {
            st.above.record(out.holds);
        } else {
            st.below.record(out.holds);
        }
        if logits[target] >= out.y_m_exact {
            st.exact_above.record(out.holds_exact);
        } else {
            st.exact_below.record(out.holds_exact);
        }
        let (lo, hi) = logits
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        st.y_m_in_range += usize::from((lo..=hi).contains(&out.y_m));
        gap_sum += (out.y_m - out.y_m_exact).abs();

        let unit = lemma3_check(&logits, target, 1.0)?;
        st.unit_bit_equal &= unit.scaled_factor.to_bits() == unit.tempered_factor.to_bits();

        let y0 = logits[0];
        let two = softmax(&[0.0, y0]);
        st.sigmoid_err = st.sigmoid_err.max((sigmoid(y0) - two[1]).abs());
        let sig = lemma3_check(&[0.0, y0], 1, 1.0 / s)?;
        st.sigmoid_cases.record(sig.holds);
        st.trials += 1;
    }
    st.mean_gap = gap_sum / trials.max(1) as f64;
    Ok(st)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceIdentities {
    /// Max deviation of `score(a, b) - score` from the sum of single increments.
    pub additivity_err: f64,
    /// `log p(y1) + log p(y2 | y1)` value equals the combined value bit for bit.
    pub chain_value_exact: bool,
    /// Max deviation between the combined gradient and the sum of term gradients.
    pub chain_grad_err: f64,
    /// `tau = 1` and `s = 1` give bit-identical log-likelihoods and gradients.
    pub unit_bit_equal: bool,
}

impl GuidanceIdentities {
    pub fn passed(&self) -> bool {
        self.additivity_err <= ADDITIVITY_TOL && self.chain_value_exact && self.chain_grad_err <= ADDITIVITY_TOL && self.unit_bit_equal
    }
}

/// Checks the condition-composition identities on analytic conditions and
/// on an untrained segmenter.
pub fn guidance_identities(trials: usize, seed: u64) -> Result<GuidanceIdentities> {
    let stream = SeedStream::new(seed).substream("guidance-identities");
    let schedule = NoiseSchedule::default();
    let d = 6;
    let mut additivity_err: f64 = 0.0;
    for k in 0..trials {
        let mut rng = stream.rng(k as u64);
        let prior = GaussianOracle::new(standard_normal(&mut rng, &[d]), rng.random_range(0.2..2.0))?;
        let cond = |rng: &mut rand_chacha::ChaCha8Rng| LinearGaussianCondition {
            prior: prior.clone(),
            y: standard_normal(rng, &[d]),
            noise_var: rng.random_range(0.1..1.0),
        };
        let (a, b) = (cond(&mut rng), cond(&mut rng));
        let x = standard_normal(&mut rng, &[d]);
        let t = rng.random_range(T_MIN..1.0);
        let base = prior.score(&x, t, &schedule)?;
        let score = |conds: Vec<(&dyn crate::sampling::Condition, f64)>| {
            Guided {
                base: &prior,
                conditions: conds,
            }
            .score(&x, t, &schedule)
        };
        let both = score(vec![(&a, 1.0), (&b, 1.0)])?.sub(&base)?;
        let inc_a = score(vec![(&a, 1.0)])?.sub(&base)?;
        let inc_b = score(vec![(&b, 1.0)])?.sub(&base)?;
        additivity_err = additivity_err.max(both.max_abs_diff(&inc_a.add(&inc_b)?)?);
    }

    let seg = Segmenter::new(4, stream.substream("segmenter"));
    let mut chain_value_exact = true;
    let mut chain_grad_err: f64 = 0.0;
    let mut unit_bit_equal = true;
    for k in 0..trials.min(20) {
        let mut rng = stream.substream("chain").rng(k as u64);
        let x = standard_normal(&mut rng, &[1, 16, 16]);
        let mask = Tensor::from_fn([1, 16, 16], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let t = rng.random_range(T_MIN..1.0);
        let target = ConditionTarget::image(mask);
        let spec = GuidanceSpec::temperature(rng.random_range(0.3..1.0), 16, 16);

        let tape = Tape::new();
        let p = bind(&tape, seg.params(), false);
        let xv = tape.leaf(x.clone());
        let terms = cond_log_prob_terms(&tape, &seg, &p, xv, t, &target, &spec)?;
        let (y1, y2) = (terms.y1.expect("y1 on"), terms.y2.expect("y2 on"));
        let total = cond_log_prob(&tape, &seg, &p, xv, t, &target, &spec)?;
        let sum = tape.value(y1).item()? + tape.value(y2).item()?;
        chain_value_exact &= tape.value(total).item()?.to_bits() == sum.to_bits();

        let (_, g_total) = cond_log_prob_grad(&seg, &x, t, &target, &spec)?;
        let only = |use_y1, use_y2| GuidanceSpec { use_y1, use_y2, ..spec };
        let (_, g1) = cond_log_prob_grad(&seg, &x, t, &target, &only(true, false))?;
        let (_, g2) = cond_log_prob_grad(&seg, &x, t, &target, &only(false, true))?;
        chain_grad_err = chain_grad_err.max(g_total.max_abs_diff(&g1.add(&g2)?)?);

        let unit_t = GuidanceSpec {
            mode: GuidanceMode::Temperature(1.0),
            ..spec
        };
        let unit_s = GuidanceSpec {
            mode: GuidanceMode::Scale(1.0),
            ..spec
        };
        let (vt, gt) = cond_log_prob_grad(&seg, &x, t, &target, &unit_t)?;
        let (vs, gs) = cond_log_prob_grad(&seg, &x, t, &target, &unit_s)?;
        unit_bit_equal &= vt.to_bits() == vs.to_bits() && gt == gs;
    }
    Ok(GuidanceIdentities {
        additivity_err,
        chain_value_exact,
        chain_grad_err,
        unit_bit_equal,
    })
}

pub struct LemmaReport {
    pub identities: GuidanceIdentities,
    pub lemma3: Lemma3Stats,
}

impl LemmaReport {
    pub fn passed(&self) -> bool {
        self.identities.passed() && self.lemma3.passed()
    }

    pub fn to_text(&self) -> String {
        let id = &self.identities;
        let l3 = &self.lemma3;
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[{}] independent conditions add: max err {:.3e}", mark(id.additivity_err <= ADDITIVITY_TOL), id.additivity_err).ok();
        writeln!(
            w,
            "[{}] dependent chain log p(y1) + log p(y2|y1): value exact = {}, grad max err {:.3e}",
            mark(id.chain_value_exact && id.chain_grad_err <= ADDITIVITY_TOL),
            id.chain_value_exact,
            id.chain_grad_err
        )
        .ok();
        writeln!(w, "[{}] tau = 1 and s = 1 bit-identical", mark(id.unit_bit_equal && l3.unit_bit_equal)).ok();
        writeln!(
            w,
            "[{}] softmax ordering with bisected y_m over {} trials: above {}/{}, below {}/{}",
            mark(l3.passed()),
            l3.trials,
            l3.above.holds,
            l3.above.trials,
            l3.below.holds,
            l3.below.trials
        )
        .ok();
        writeln!(
            w,
            "       with exact threshold (LSE(s y) - LSE(y))/(s - 1): above {}/{}, below {}/{}",
            l3.exact_above.holds, l3.exact_above.trials, l3.exact_below.holds, l3.exact_below.trials
        )
        .ok();
        writeln!(
            w,
            "       y_m within [min y, max y] in {}/{} trials; mean |y_m - exact| = {:.4}",
            l3.y_m_in_range, l3.trials, l3.mean_gap
        )
        .ok();
        writeln!(
            w,
            "[{}] sigmoid as two-class softmax: max err {:.3e}; ordering holds {}/{}",
            mark(l3.sigmoid_err <= SIGMOID_TOL && l3.sigmoid_cases.all()),
            l3.sigmoid_err,
            l3.sigmoid_cases.holds,
            l3.sigmoid_cases.trials
        )
        .ok();
        s
    }
}

pub fn verify_lemmas(trials: usize, seed: u64) -> Result<LemmaReport> {
    Ok(LemmaReport {
        identities: guidance_identities(trials.clamp(1, 200), seed)?,
        lemma3: lemma3_trials(trials, seed)?,
    })
}
