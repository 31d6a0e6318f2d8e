//! Template-generated emotion-labelled dialogues.
//!
//! Every emotional utterance carries at least one lexicon word of its own
//! label and none of any other, so the lexicon oracle in [`crate::sim_env`]
//! recovers the label exactly. Neutral utterances carry no lexicon words.

use rand::seq::SliceRandom;
use rand::Rng;

use super::Utterance;
use crate::affect::EmotionLabel;
use crate::seed::SeedStream;
use crate::sim_env::EmotionLexicon;

pub const TOPICS: [&str; 12] = [
    "weekend", "job", "movie", "dinner", "trip", "party", "game", "weather", "exam", "concert",
    "family", "project",
];

/// Opening questions; `{t}` is a topic. Also the simulated user's prompts.
pub const PROMPT_TEMPLATES: [&str; 5] = [
    "how was the {t} ?",
    "what do you think about the {t} ?",
    "tell me about the {t} .",
    "how do you feel about the {t} ?",
    "any news about the {t} ?",
];

const EMOTIONAL_TEMPLATES: [&str; 7] = [
    "i feel so {w} about the {t} .",
    "the {t} was {w} !",
    "honestly , the {t} made me {w} .",
    "{w} ! the {t} was really {w} .",
    "i am {w} because of the {t} .",
    "oh , {w} , that {t} .",
    "the whole {t} left me {w} and {w} .",
];

const NEUTRAL_TEMPLATES: [&str; 6] = [
    "we talked about the {t} yesterday .",
    "the {t} starts at noon .",
    "i will check the {t} later .",
    "okay , tell me more about the {t} .",
    "the {t} is on tuesday .",
    "i think the {t} is next week .",
];

/// Chance that a reply repeats the previous utterance's emotion.
const PERSISTENCE: f64 = 0.5;

const SPEAKERS: [&str; 6] = ["alex", "sam", "jordan", "casey", "riley", "morgan"];

/// Deterministic desk-scale corpus using the bundled lexicon.
pub fn synth_corpus(seed: u64, n_dialogues: usize) -> Vec<Utterance> {
    synth_corpus_with(seed, n_dialogues, &EmotionLexicon::default())
}

pub fn synth_corpus_with(
    seed: u64,
    n_dialogues: usize,
    lexicon: &EmotionLexicon,
) -> Vec<Utterance> {
    let stream = SeedStream::new(seed).named("synth-corpus");
    let mut out = Vec::new();
    for d in 0..n_dialogues {
        let mut rng = stream.child(d as u64).rng();
        let topic = *TOPICS.choose(&mut rng).expect("topics");
        let mut pair: Vec<&str> = SPEAKERS.choose_multiple(&mut rng, 2).copied().collect();
        pair.shuffle(&mut rng);
        let len = rng.gen_range(4..=7);
        let mut prev = EmotionLabel::Neutral;
        for u in 0..len {
            let (text, emotion) = if u == 0 {
                let tpl = PROMPT_TEMPLATES.choose(&mut rng).expect("templates");
                (tpl.replace("{t}", topic), EmotionLabel::Neutral)
            } else {
                let label = if u > 1 && rng.gen_bool(PERSISTENCE) {
                    prev
                } else {
                    sample_label(&mut rng)
                };
                (render(label, topic, lexicon, &mut rng), label)
            };
            prev = emotion;
            out.push(Utterance {
                dialogue_id: d as u64,
                utterance_id: u as u64,
                speaker: pair[u % 2].to_string(),
                text,
                emotion,
            });
        }
    }
    out
}

/// Neutral twice as likely as each emotional label.
fn sample_label<R: Rng>(rng: &mut R) -> EmotionLabel {
    let k = rng.gen_range(0..8);
    if k >= 7 {
        EmotionLabel::Neutral
    } else {
        EmotionLabel::ALL[k]
    }
}

fn render<R: Rng>(
    label: EmotionLabel,
    topic: &str,
    lexicon: &EmotionLexicon,
    rng: &mut R,
) -> String {
    let words = lexicon.words_for(label);
    if label == EmotionLabel::Neutral || words.is_empty() {
        return NEUTRAL_TEMPLATES
            .choose(rng)
            .expect("templates")
            .replace("{t}", topic);
    }
    let tpl = EMOTIONAL_TEMPLATES.choose(rng).expect("templates");
    let mut s = String::new();
    let mut rest = tpl.replace("{t}", topic);
    while let Some(pos) = rest.find("{w}") {
        s.push_str(&rest[..pos]);
        s.push_str(words.choose(rng).expect("non-empty"));
        rest = rest[pos + 3..].to_string();
    }
    s.push_str(&rest);
    s
}
