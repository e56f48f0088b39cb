use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use dvaegan_core::error::contract;
use dvaegan_core::eval::draw_distractors;
use dvaegan_core::model::StimulusImage;
use dvaegan_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SESSION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub reconstruction: StimulusImage,
    pub a: StimulusImage,
    pub b: StimulusImage,
    /// Side holding the true stimulus. Never leaves the service.
    pub correct: Side,
}

impl Trial {
    pub fn candidate(&self, side: Side) -> &StimulusImage {
        match side {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub trial: usize,
    pub side: Side,
    pub rater: String,
    pub timestamp_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Open,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecordError {
    UnknownTrial(usize),
    UnknownRater(String),
    Duplicate { rater: String, trial: usize },
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordError::UnknownTrial(t) => write!(f, "unknown trial {t}"),
            RecordError::UnknownRater(r) => write!(f, "unknown rater {r:?}"),
            RecordError::Duplicate { rater, trial } => write!(f, "rater {rater:?} already answered trial {trial}"),
        }
    }
}

impl std::error::Error for RecordError {}

/// A set of two-alternative trials plus the choices recorded against them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSession {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    /// Each rater sees the trials in their own seeded order.
    #[serde(default)]
    pub per_rater_order: bool,
    pub trials: Vec<Trial>,
    #[serde(default)]
    pub raters: Vec<String>,
    #[serde(default)]
    pub choices: Vec<Choice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaterScore {
    pub correct: usize,
    pub choices: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumComResult {
    pub per_rater: BTreeMap<String, RaterScore>,
    /// Correct choices over all choices.
    pub pooled: f64,
    pub n_raters: usize,
    pub n_trials: usize,
    pub n_choices: usize,
}

/// One trial per reconstruction: the true stimulus against a seeded
/// same-family distractor, drawn exactly as for Pix-Com, on seeded sides.
pub fn build_session(
    recons: &[StimulusImage],
    stimuli: &[StimulusImage],
    families: &[&str],
    seed: u64,
) -> Result<RatingSession> {
    if recons.is_empty() {
        return contract("no test reconstructions to rate");
    }
    if recons.len() != stimuli.len() || families.len() != stimuli.len() {
        return contract(format!(
            "{} reconstructions, {} stimuli and {} family labels",
            recons.len(),
            stimuli.len(),
            families.len()
        ));
    }
    let distractors = draw_distractors(families, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let trials = recons
        .iter()
        .zip(&distractors)
        .enumerate()
        .map(|(i, (r, &d))| {
            let (truth, other) = (stimuli[i].clone(), stimuli[d].clone());
            let correct = if rng.random::<bool>() { Side::A } else { Side::B };
            let (a, b) = if correct == Side::A { (truth, other) } else { (other, truth) };
            Trial { id: i, reconstruction: r.clone(), a, b, correct }
        })
        .collect();
    Ok(RatingSession {
        version: SESSION_VERSION,
        id: format!("session-{seed:x}"),
        seed,
        per_rater_order: false,
        trials,
        raters: Vec::new(),
        choices: Vec::new(),
    })
}

impl RatingSession {
    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn register(&mut self, rater: &str) {
        if !self.raters.iter().any(|r| r == rater) {
            self.raters.push(rater.to_string());
        }
    }

    /// Trial ids in the order `rater` sees them.
    pub fn order_for(&self, rater: Option<&str>) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.trials.len()).collect();
        if self.per_rater_order {
            if let Some(k) = rater.and_then(|r| self.raters.iter().position(|x| x == r)) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(2 + k as u64);
                order.shuffle(&mut rng);
            }
        }
        order
    }

    pub fn answered(&self, rater: &str) -> BTreeSet<usize> {
        self.choices.iter().filter(|c| c.rater == rater).map(|c| c.trial).collect()
    }

    pub fn status(&self) -> Status {
        let done = |r: &String| self.answered(r).len() == self.trials.len();
        if !self.raters.is_empty() && self.raters.iter().all(done) {
            Status::Complete
        } else {
            Status::Open
        }
    }

    /// Records a choice; the first choice per (rater, trial) stands.
    pub fn record(&mut self, choice: Choice) -> std::result::Result<(), RecordError> {
        if choice.trial >= self.trials.len() {
            return Err(RecordError::UnknownTrial(choice.trial));
        }
        if !self.raters.contains(&choice.rater) {
            return Err(RecordError::UnknownRater(choice.rater));
        }
        if self.choices.iter().any(|c| c.rater == choice.rater && c.trial == choice.trial) {
            return Err(RecordError::Duplicate { rater: choice.rater, trial: choice.trial });
        }
        self.choices.push(choice);
        Ok(())
    }
}

/// Fraction of choices that picked the true stimulus, per rater and pooled.
pub fn score(session: &RatingSession) -> Result<HumComResult> {
    if session.choices.is_empty() {
        return contract("no choices recorded");
    }
    let mut per_rater: BTreeMap<String, RaterScore> = BTreeMap::new();
    for c in &session.choices {
        let Some(t) = session.trials.get(c.trial) else {
            return contract(format!("choice refers to unknown trial {}", c.trial));
        };
        let s = per_rater.entry(c.rater.clone()).or_insert(RaterScore { correct: 0, choices: 0, fraction: 0.0 });
        s.choices += 1;
        s.correct += usize::from(c.side == t.correct);
    }
    for s in per_rater.values_mut() {
        s.fraction = s.correct as f64 / s.choices as f64;
    }
    let correct: usize = per_rater.values().map(|s| s.correct).sum();
    Ok(HumComResult {
        pooled: correct as f64 / session.choices.len() as f64,
        n_raters: per_rater.len(),
        n_trials: session.trials.len(),
        n_choices: session.choices.len(),
        per_rater,
    })
}
