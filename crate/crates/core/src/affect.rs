//! Affect in the valence/arousal circumplex plane and the rewards derived
//! from it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TABLE: &str = include_str!("../data/circumplex.toml");

/// The seven utterance-level emotion categories of MELD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Sadness,
    Joy,
    Neutral,
    Surprise,
    Fear,
}

impl EmotionLabel {
    /// Canonical order; also the order of the reward head's emotion logits.
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Sadness,
        EmotionLabel::Joy,
        EmotionLabel::Neutral,
        EmotionLabel::Surprise,
        EmotionLabel::Fear,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Fear => "fear",
        }
    }

    /// Which side of the valence axis the label belongs to: +1, -1 or 0.
    pub fn valence_sign(self) -> i8 {
        match self {
            EmotionLabel::Joy | EmotionLabel::Surprise => 1,
            EmotionLabel::Neutral => 0,
            _ => -1,
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl fmt::Display for UnknownLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown emotion label `{}`", self.0)
    }
}

impl std::error::Error for UnknownLabel {}

impl FromStr for EmotionLabel {
    type Err = UnknownLabel;

    /// Case-insensitive match against the seven label names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        EmotionLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// A point in the circumplex plane. Both coordinates lie in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffectPoint {
    arousal: f64,
    valence: f64,
}

impl AffectPoint {
    pub const ORIGIN: AffectPoint = AffectPoint {
        arousal: 0.0,
        valence: 0.0,
    };

    pub fn new(arousal: f64, valence: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && (-1.0..=1.0).contains(&v);
        if !ok(arousal) || !ok(valence) {
            return Err(Error::OutOfRange(format!(
                "affect point ({arousal}, {valence}) outside [-1, 1]^2"
            )));
        }
        Ok(Self { arousal, valence })
    }

    /// Clamps each coordinate into `[-1, 1]`; non-finite input maps to 0.
    pub fn clamped(arousal: f64, valence: f64) -> Self {
        let c = |v: f64| {
            if v.is_finite() {
                v.clamp(-1.0, 1.0)
            } else {
                0.0
            }
        };
        Self {
            arousal: c(arousal),
            valence: c(valence),
        }
    }

    pub fn arousal(&self) -> f64 {
        self.arousal
    }

    pub fn valence(&self) -> f64 {
        self.valence
    }

    pub fn norm(&self) -> f64 {
        self.arousal.hypot(self.valence)
    }
}

/// Signed distance from the origin: `sign(V) * sqrt(A^2 + V^2)`, with the
/// sign of zero valence taken as positive.
pub fn circumplex_reward(point: AffectPoint) -> f64 {
    let magnitude = (point.arousal * point.arousal + point.valence * point.valence).sqrt();
    if point.valence < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Same as [`circumplex_reward`] for unchecked coordinates.
pub fn circumplex_reward_checked(arousal: f64, valence: f64) -> Result<f64> {
    AffectPoint::new(arousal, valence).map(circumplex_reward)
}

pub fn label_reward(label: EmotionLabel, table: &CircumplexTable) -> f64 {
    circumplex_reward(table.point(label))
}

/// Total map from the seven labels to circumplex coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CircumplexTable {
    points: [AffectPoint; 7],
}

impl Default for CircumplexTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled circumplex table is valid")
    }
}

impl CircumplexTable {
    pub fn new(points: [AffectPoint; 7]) -> Result<Self> {
        let table = Self { points };
        table.validate()?;
        Ok(table)
    }

    pub fn point(&self, label: EmotionLabel) -> AffectPoint {
        self.points[label.index()]
    }

    fn validate(&self) -> Result<()> {
        for label in EmotionLabel::ALL {
            let p = self.point(label);
            let ok = match label.valence_sign() {
                1 => p.valence > 0.0,
                -1 => p.valence < 0.0,
                _ => p.arousal == 0.0 && p.valence == 0.0,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "circumplex table: {label} at ({}, {}) is on the wrong side of the valence axis",
                    p.arousal, p.valence
                )));
            }
        }
        Ok(())
    }

    /// Parse `label = [arousal, valence]` lines; all seven labels required.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<f64>> =
            toml::from_str(text).map_err(|e| Error::Config(format!("circumplex table: {e}")))?;
        let mut points: [Option<AffectPoint>; 7] = [None; 7];
        for (key, coords) in raw {
            let label: EmotionLabel = key
                .parse()
                .map_err(|e: UnknownLabel| Error::Config(format!("circumplex table: {e}")))?;
            let [a, v] = coords[..] else {
                return Err(Error::Config(format!(
                    "circumplex table: {key} needs [arousal, valence]"
                )));
            };
            if points[label.index()].is_some() {
                return Err(Error::Config(format!(
                    "circumplex table: duplicate {label}"
                )));
            }
            points[label.index()] = Some(
                AffectPoint::new(a, v)
                    .map_err(|e| Error::Config(format!("circumplex table: {key}: {e}")))?,
            );
        }
        let mut out = [AffectPoint::ORIGIN; 7];
        for label in EmotionLabel::ALL {
            out[label.index()] = points[label.index()]
                .ok_or_else(|| Error::Config(format!("circumplex table: missing {label}")))?;
        }
        Self::new(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::from("# label = [arousal, valence]\n");
        for label in EmotionLabel::ALL {
            let p = self.point(label);
            s.push_str(&format!("{label} = [{:?}, {:?}]\n", p.arousal, p.valence));
        }
        s
    }
}

/// Weight-normalized mean of affect estimates, clamped to the unit square.
pub fn fuse_affect(estimates: &[(AffectPoint, f64)]) -> Result<AffectPoint> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no affect estimates to fuse".into()));
    }
    if let Some((_, w)) = estimates
        .iter()
        .find(|(_, w)| !(*w >= 0.0) || !w.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "fusion weight {w} must be finite and >= 0"
        )));
    }
    let total: f64 = estimates.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("total fusion weight is zero".into()));
    }
    let a = estimates.iter().map(|(p, w)| p.arousal * w).sum::<f64>() / total;
    let v = estimates.iter().map(|(p, w)| p.valence * w).sum::<f64>() / total;
    Ok(AffectPoint::clamped(a, v))
}

/// Self-assessment manikin rating 1..=9 onto `[-1, 1]`.
pub fn sam_to_unit(rating: u8) -> Result<f64> {
    if !(1..=9).contains(&rating) {
        return Err(Error::OutOfRange(format!(
            "SAM rating {rating} outside 1..=9"
        )));
    }
    Ok((rating as f64 - 5.0) / 4.0)
}

/// `lambda * extrinsic + (1 - lambda) * intrinsic`.
pub fn combine_rewards(extrinsic: f64, intrinsic: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * extrinsic + (1.0 - lambda) * intrinsic)
}
