use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CORNELL_SEP: &str = " +++$+++ ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    /// Lowercased, trimmed.
    pub speaker_name: String,
    pub text: String,
    pub conversation_id: String,
    /// Index within the conversation.
    pub position: usize,
}

/// Parsed utterances plus the number of input lines that were skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Parsed {
    pub utterances: Vec<Utterance>,
    pub skipped: usize,
}

pub fn normalize_speaker(name: &str) -> String {
    name.trim().to_lowercase()
}

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn parse_line_ids(field: &str) -> Vec<String> {
    field
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().trim_matches(|c| c == '\'' || c == '"').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Reads a Cornell-style movie dialog corpus: a lines file
/// (`id +++$+++ character id +++$+++ movie +++$+++ name +++$+++ text`) and a
/// conversations file whose last field lists line ids. Text may itself
/// contain the delimiter. A conversation referencing a missing line is cut
/// at that point into separate conversations.
pub fn parse_cornell(lines_file: &Path, conversations_file: &Path) -> Result<Parsed> {
    parse_cornell_str(&read_lossy(lines_file)?, &read_lossy(conversations_file)?)
}

pub fn parse_cornell_str(lines: &str, conversations: &str) -> Result<Parsed> {
    let mut skipped = 0;
    let mut by_id: HashMap<&str, (String, String)> = HashMap::new();
    for line in lines.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.splitn(5, CORNELL_SEP).collect();
        let text = fields.get(4).map(|t| t.trim()).unwrap_or("");
        let speaker = fields.get(3).map(|s| normalize_speaker(s)).unwrap_or_default();
        if fields.len() != 5 || text.is_empty() || speaker.is_empty() {
            skipped += 1;
            continue;
        }
        by_id.insert(fields[0].trim(), (speaker, text.to_string()));
    }

    let mut utterances = Vec::new();
    for (k, line) in conversations.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let fields: Vec<&str> = line.splitn(4, CORNELL_SEP).collect();
        if fields.len() != 4 {
            skipped += 1;
            continue;
        }
        let mut segment = 0;
        let mut position = 0;
        for id in parse_line_ids(fields[3]) {
            match by_id.get(id.as_str()) {
                Some((speaker, text)) => {
                    utterances.push(Utterance {
                        speaker_name: speaker.clone(),
                        text: text.clone(),
                        conversation_id: format!("{}:{k}.{segment}", fields[2].trim()),
                        position,
                    });
                    position += 1;
                }
                None => {
                    skipped += 1;
                    if position > 0 {
                        segment += 1;
                        position = 0;
                    }
                }
            }
        }
    }
    finish(utterances, skipped)
}

/// Reads a script of `SPEAKER: text` lines. A blank line starts a new
/// scene; each scene is one conversation. Lines without a speaker prefix
/// (stage directions and the like) are skipped.
pub fn parse_tv_script(script_file: &Path) -> Result<Parsed> {
    let label = script_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_tv_script_str(&read_lossy(script_file)?, &label)
}

fn is_speaker_label(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || " .'-&".contains(c))
}

/// `label` prefixes conversation ids so several scripts can be combined.
pub fn parse_tv_script_str(script: &str, label: &str) -> Result<Parsed> {
    let mut utterances = Vec::new();
    let mut skipped = 0;
    let mut scene = 0;
    let mut position = 0;
    for line in script.lines() {
        if line.trim().is_empty() {
            if position > 0 {
                scene += 1;
                position = 0;
            }
            continue;
        }
        let Some((speaker, text)) = line.split_once(':') else {
            skipped += 1;
            continue;
        };
        let speaker = normalize_speaker(speaker);
        let text = text.trim();
        if !is_speaker_label(&speaker) || text.is_empty() {
            skipped += 1;
            continue;
        }
        utterances.push(Utterance {
            speaker_name: speaker,
            text: text.to_string(),
            conversation_id: format!("{label}:{scene}"),
            position,
        });
        position += 1;
    }
    finish(utterances, skipped)
}

fn finish(utterances: Vec<Utterance>, skipped: usize) -> Result<Parsed> {
    if utterances.is_empty() {
        return Err(Error::Format("no parsable utterances".into()));
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed or dangling input lines");
    }
    Ok(Parsed { utterances, skipped })
}
