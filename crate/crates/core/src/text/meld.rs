//! MELD-format CSV ingestion.

use std::io::Read;
use std::path::Path;

use super::Utterance;
use crate::affect::EmotionLabel;
use crate::error::{Error, Result};

const REQUIRED: [&str; 5] = [
    "Utterance",
    "Emotion",
    "Speaker",
    "Dialogue_ID",
    "Utterance_ID",
];

pub fn load_meld_csv(path: &Path) -> Result<Vec<Utterance>> {
    read_meld_csv(std::fs::File::open(path)?)
}

/// Parse MELD rows in file order. Extra columns are ignored; rows are
/// numbered from 1, not counting the header.
pub fn read_meld_csv(reader: impl Read) -> Result<Vec<Utterance>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let [text_col, emo_col, spk_col, dlg_col, utt_col] = [
        col(REQUIRED[0])?,
        col(REQUIRED[1])?,
        col(REQUIRED[2])?,
        col(REQUIRED[3])?,
        col(REQUIRED[4])?,
    ];

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let emotion: EmotionLabel = field(emo_col).parse().map_err(|_| Error::BadLabel {
            row,
            value: field(emo_col).to_string(),
        })?;
        let text = field(text_col).trim();
        if text.is_empty() {
            return Err(Error::BadRow {
                row,
                detail: "empty utterance text".into(),
            });
        }
        let int = |c: usize, name: &str| {
            field(c).trim().parse::<u64>().map_err(|_| Error::BadRow {
                row,
                detail: format!("{name} `{}` is not a non-negative integer", field(c)),
            })
        };
        out.push(Utterance {
            dialogue_id: int(dlg_col, "Dialogue_ID")?,
            utterance_id: int(utt_col, "Utterance_ID")?,
            speaker: field(spk_col).trim().to_string(),
            text: text.to_string(),
            emotion,
        });
    }
    Ok(out)
}
