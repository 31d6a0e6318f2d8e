//! Simulated user: prompts the agent, judges its replies with a transparent
//! emotion lexicon and reports simulated multimodal affect and a
//! self-assessment rating.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::affect::{
    combine_rewards, fuse_affect, label_reward, sam_to_unit, AffectPoint, CircumplexTable,
    EmotionLabel,
};
use crate::error::{Error, Result};
use crate::seed::SeedStream;
use crate::text::{tokenize, PROMPT_TEMPLATES, TOPICS};

pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.tsv");

/// Tie-break order used when two labels score the same.
pub const DEFAULT_PRIORITY: [EmotionLabel; 7] = [
    EmotionLabel::Joy,
    EmotionLabel::Surprise,
    EmotionLabel::Anger,
    EmotionLabel::Fear,
    EmotionLabel::Disgust,
    EmotionLabel::Sadness,
    EmotionLabel::Neutral,
];

/// Channel weights for speech, face and gesture estimates.
pub const CHANNEL_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionLexicon {
    entries: BTreeMap<String, (EmotionLabel, f64)>,
    by_label: [Vec<String>; 7],
    priority: [EmotionLabel; 7],
}

impl Default for EmotionLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

impl EmotionLexicon {
    pub fn new(entries: BTreeMap<String, (EmotionLabel, f64)>) -> Result<Self> {
        Self::with_priority(entries, DEFAULT_PRIORITY)
    }

    pub fn with_priority(
        entries: BTreeMap<String, (EmotionLabel, f64)>,
        priority: [EmotionLabel; 7],
    ) -> Result<Self> {
        let mut seen = [false; 7];
        for l in priority {
            seen[l.index()] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(
                "lexicon priority must list all 7 labels".into(),
            ));
        }
        let mut by_label: [Vec<String>; 7] = Default::default();
        for (word, (label, weight)) in &entries {
            if !(*weight > 0.0) || !weight.is_finite() {
                return Err(Error::Config(format!(
                    "lexicon: weight for `{word}` must be > 0"
                )));
            }
            by_label[label.index()].push(word.clone());
        }
        Ok(Self {
            entries,
            by_label,
            priority,
        })
    }

    /// Lines of `word<TAB>label<TAB>weight`; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let row = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let [word, label, weight] = parts[..] else {
                return Err(Error::BadRow {
                    row,
                    detail: "expected word<TAB>label<TAB>weight".into(),
                });
            };
            let label: EmotionLabel = label.parse().map_err(|_| Error::BadLabel {
                row,
                value: label.to_string(),
            })?;
            let weight: f64 = weight.trim().parse().map_err(|_| Error::BadRow {
                row,
                detail: format!("weight `{weight}` is not a number"),
            })?;
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(Error::BadRow {
                    row,
                    detail: format!("weight {weight} must be > 0"),
                });
            }
            let word = word.trim().to_lowercase();
            if tokenize(&word) != [word.clone()] {
                return Err(Error::BadRow {
                    row,
                    detail: format!("`{word}` is not a single token"),
                });
            }
            if entries.insert(word.clone(), (label, weight)).is_some() {
                return Err(Error::BadRow {
                    row,
                    detail: format!("duplicate word `{word}`"),
                });
            }
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, word: &str) -> Option<(EmotionLabel, f64)> {
        self.entries.get(word).copied()
    }

    /// Words of one label, sorted.
    pub fn words_for(&self, label: EmotionLabel) -> &[String] {
        &self.by_label[label.index()]
    }

    pub fn priority(&self) -> &[EmotionLabel; 7] {
        &self.priority
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Label with the largest total lexicon weight; `Neutral` when nothing hits.
pub fn classify_emotion_lexicon(text: &str, lexicon: &EmotionLexicon) -> EmotionLabel {
    let mut hits: [Vec<f64>; 7] = Default::default();
    for tok in tokenize(text) {
        if let Some((label, w)) = lexicon.get(&tok) {
            hits[label.index()].push(w);
        }
    }
    if hits.iter().all(Vec::is_empty) {
        return EmotionLabel::Neutral;
    }
    // Summing sorted weights makes the score independent of word order.
    let score = |l: EmotionLabel| {
        let mut ws = hits[l.index()].clone();
        ws.sort_by(f64::total_cmp);
        ws.iter().sum::<f64>()
    };
    let mut best = lexicon.priority[0];
    let mut best_score = score(best);
    for &l in &lexicon.priority[1..] {
        let s = score(l);
        if s > best_score {
            best = l;
            best_score = s;
        }
    }
    best
}

/// Speech, face and gesture estimates: the label's table point plus
/// independent uniform noise per component, clamped to the unit square.
pub fn simulate_channels(
    label: EmotionLabel,
    table: &CircumplexTable,
    noise: f64,
    seed: u64,
) -> Result<Vec<(AffectPoint, f64)>> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise must be >= 0, got {noise}"
        )));
    }
    let base = table.point(label);
    let mut rng = SeedStream::new(seed).named("channels").rng();
    Ok(CHANNEL_WEIGHTS
        .iter()
        .map(|&w| {
            let p = if noise == 0.0 {
                base
            } else {
                AffectPoint::clamped(
                    base.arousal() + rng.gen_range(-noise..=noise),
                    base.valence() + rng.gen_range(-noise..=noise),
                )
            };
            (p, w)
        })
        .collect())
}

/// Self-assessment rating implied by a label reward.
pub fn simulated_sam_rating(reward: f64) -> u8 {
    let sign = if reward > 0.0 {
        1.0
    } else if reward < 0.0 {
        -1.0
    } else {
        0.0
    };
    let r = (5.0 + 4.0 * sign * (reward.abs() / std::f64::consts::SQRT_2).min(1.0)).round();
    r.clamp(1.0, 9.0) as u8
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserFeedback {
    pub label: EmotionLabel,
    pub fused: AffectPoint,
    pub sam_rating: u8,
    pub reward: f64,
}

/// Judge a reply; see [`SimUser::respond`].
pub fn respond(
    text: &str,
    lexicon: &EmotionLexicon,
    table: &CircumplexTable,
    lambda: f64,
    noise: f64,
    seed: u64,
) -> Result<UserFeedback> {
    let label = classify_emotion_lexicon(text, lexicon);
    let channels = simulate_channels(label, table, noise, seed)?;
    let fused = fuse_affect(&channels)?;
    let extrinsic = label_reward(label, table);
    let sam_rating = simulated_sam_rating(extrinsic);
    let reward = combine_rewards(extrinsic, sam_to_unit(sam_rating)?, lambda)?;
    Ok(UserFeedback {
        label,
        fused,
        sam_rating,
        reward,
    })
}

/// `n` prompts drawn from the opening-question templates and topics.
pub fn prompt_pool(seed: u64, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "prompt pool size must be >= 1".into(),
        ));
    }
    let mut rng = SeedStream::new(seed).named("prompt-pool").rng();
    Ok((0..n)
        .map(|_| {
            let tpl = PROMPT_TEMPLATES.choose(&mut rng).expect("templates");
            let topic = TOPICS.choose(&mut rng).expect("topics");
            tpl.replace("{t}", topic)
        })
        .collect())
}

/// A configured simulated user.
#[derive(Debug, Clone)]
pub struct SimUser {
    pub lexicon: EmotionLexicon,
    pub table: CircumplexTable,
    pub lambda: f64,
    pub noise: f64,
}

impl Default for SimUser {
    fn default() -> Self {
        Self {
            lexicon: EmotionLexicon::default(),
            table: CircumplexTable::default(),
            lambda: 1.0,
            noise: 0.0,
        }
    }
}

impl SimUser {
    pub fn respond(&self, text: &str, seed: u64) -> Result<UserFeedback> {
        respond(
            text,
            &self.lexicon,
            &self.table,
            self.lambda,
            self.noise,
            seed,
        )
    }

    pub fn classify(&self, text: &str) -> EmotionLabel {
        classify_emotion_lexicon(text, &self.lexicon)
    }
}

/// Prompt source plus judge, the environment of the fine-tuning loop.
#[derive(Debug, Clone)]
pub struct LexiconEnv {
    pub user: SimUser,
    pub prompts: Vec<String>,
}

impl LexiconEnv {
    pub fn new(user: SimUser, prompt_seed: u64, n_prompts: usize) -> Result<Self> {
        Ok(Self {
            user,
            prompts: prompt_pool(prompt_seed, n_prompts)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex(entries: &[(&str, EmotionLabel, f64)]) -> EmotionLexicon {
        EmotionLexicon::new(
            entries
                .iter()
                .map(|(w, l, x)| (w.to_string(), (*l, *x)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn classify_examples() {
        let l = lex(&[
            ("wonderful", EmotionLabel::Joy, 1.0),
            ("great", EmotionLabel::Joy, 1.0),
            ("angry", EmotionLabel::Anger, 1.0),
        ]);
        assert_eq!(
            classify_emotion_lexicon("what a wonderful great day", &l),
            EmotionLabel::Joy
        );
        assert_eq!(
            classify_emotion_lexicon("the bus is late", &l),
            EmotionLabel::Neutral
        );
        assert_eq!(
            classify_emotion_lexicon("great but angry", &l),
            EmotionLabel::Joy
        );
        let anger_first = EmotionLexicon::with_priority(
            l.entries.clone(),
            [
                EmotionLabel::Anger,
                EmotionLabel::Joy,
                EmotionLabel::Surprise,
                EmotionLabel::Fear,
                EmotionLabel::Disgust,
                EmotionLabel::Sadness,
                EmotionLabel::Neutral,
            ],
        )
        .unwrap();
        assert_eq!(
            classify_emotion_lexicon("great but angry", &anger_first),
            EmotionLabel::Anger
        );
    }

    #[test]
    fn lexicon_file_validation() {
        assert!(EmotionLexicon::parse("happy\tjoy\t1.0\n").is_ok());
        assert!(matches!(
            EmotionLexicon::parse("happy\telated\t1.0\n"),
            Err(Error::BadLabel { row: 1, .. })
        ));
        assert!(EmotionLexicon::parse("happy\tjoy\t0\n").is_err());
        assert!(EmotionLexicon::parse("happy\tjoy\t-1\n").is_err());
        assert!(EmotionLexicon::parse("happy\tjoy\n").is_err());
        assert!(EmotionLexicon::parse("happy\tjoy\t1\nhappy\tsadness\t1\n").is_err());
        assert_eq!(EmotionLexicon::default().len(), 44);
    }

    #[test]
    fn zero_noise_channels_equal_table_point() {
        let t = CircumplexTable::default();
        for l in EmotionLabel::ALL {
            let ch = simulate_channels(l, &t, 0.0, 9).unwrap();
            assert_eq!(ch.len(), 3);
            assert!(ch.iter().all(|(p, _)| *p == t.point(l)));
            assert_eq!(fuse_affect(&ch).unwrap(), t.point(l));
        }
        assert_eq!(
            simulate_channels(EmotionLabel::Fear, &t, 0.3, 4).unwrap(),
            simulate_channels(EmotionLabel::Fear, &t, 0.3, 4).unwrap()
        );
        assert!(simulate_channels(EmotionLabel::Fear, &t, -0.1, 4).is_err());
    }

    #[test]
    fn noisy_channels_stay_in_bounds() {
        let t = CircumplexTable::default();
        for seed in 0..50 {
            for (p, _) in simulate_channels(EmotionLabel::Fear, &t, 0.9, seed).unwrap() {
                assert!(p.arousal().abs() <= 1.0 && p.valence().abs() <= 1.0);
            }
        }
    }

    #[test]
    fn respond_examples() {
        let user = SimUser::default();
        let n = user.respond("the bus is late", 1).unwrap();
        assert_eq!(n.label, EmotionLabel::Neutral);
        assert_eq!(n.reward, 0.0);
        assert_eq!(n.sam_rating, 5);

        let j = user.respond("what a wonderful day", 1).unwrap();
        assert_eq!(j.label, EmotionLabel::Joy);
        assert!((j.reward - 0.943_40).abs() < 1e-5);

        let intrinsic = SimUser {
            lambda: 0.0,
            ..SimUser::default()
        };
        for text in ["so sad", "wow", "i hate it", "fine"] {
            let fb = intrinsic.respond(text, 3).unwrap();
            assert_eq!(fb.reward, sam_to_unit(fb.sam_rating).unwrap());
        }
    }

    #[test]
    fn sam_rating_from_reward() {
        assert_eq!(simulated_sam_rating(0.0), 5);
        // joy: 5 + 4 * 0.9434 / 1.4142 = 7.67
        assert_eq!(simulated_sam_rating(0.943_398), 8);
        assert_eq!(simulated_sam_rating(-2.0), 1);
        assert_eq!(simulated_sam_rating(2.0), 9);
    }

    #[test]
    fn prompt_pool_is_deterministic() {
        let a = prompt_pool(5, 40).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, prompt_pool(5, 40).unwrap());
        assert!(prompt_pool(5, 0).is_err());
    }

    proptest! {
        #[test]
        fn classification_ignores_word_order(idx in proptest::collection::vec(0usize..60, 0..12), seed in any::<u64>()) {
            let l = EmotionLexicon::default();
            let mut vocab: Vec<String> = l.entries.keys().cloned().collect();
            vocab.extend(["the", "a", "day", "very"].map(String::from));
            let words: Vec<String> = idx.iter().map(|&i| vocab[i % vocab.len()].clone()).collect();
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut SeedStream::new(seed).rng());
            prop_assert_eq!(
                classify_emotion_lexicon(&words.join(" "), &l),
                classify_emotion_lexicon(&shuffled.join(" "), &l)
            );
        }
    }
}
