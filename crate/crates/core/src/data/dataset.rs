use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MtnError, Result};

use super::tokenize::tokenize;
use super::vocab::{Vocabulary, EOS_TOKEN, SOS_TOKEN};

/// Top-level dialogue file: `{"dialogs": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogFile {
    pub dialogs: Vec<Dialog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialog {
    pub video_id: String,
    pub caption: String,
    pub summary: String,
    pub dialog: Vec<Turn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

/// One (dialogue, turn) training or evaluation unit, as tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogueExample {
    pub dialogue_index: usize,
    pub video_id: String,
    /// 1-based turn number within the dialogue.
    pub turn: usize,
    /// Caption followed by summary.
    pub caption: Vec<String>,
    /// Most recent (question, answer) pairs, oldest first.
    pub history: Vec<(Vec<String>, Vec<String>)>,
    pub query: Vec<String>,
    /// Answer wrapped in `<sos>` ... `<eos>`.
    pub target: Vec<String>,
    pub candidates: Option<Vec<Vec<String>>>,
}

impl DialogueExample {
    /// History flattened as `q <eos> a <eos> ...`.
    pub fn history_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (q, a) in &self.history {
            out.extend(q.iter().cloned());
            out.push(EOS_TOKEN.to_string());
            out.extend(a.iter().cloned());
            out.push(EOS_TOKEN.to_string());
        }
        out
    }

    /// Target without its `<sos>`/`<eos>` wrapping.
    pub fn answer_tokens(&self) -> &[String] {
        let t = &self.target[..];
        let t = t.strip_prefix(&[SOS_TOKEN.to_string()][..]).unwrap_or(t);
        t.strip_suffix(&[EOS_TOKEN.to_string()][..]).unwrap_or(t)
    }
}

/// Wraps answer tokens in `<sos>` / `<eos>`.
pub fn wrap_target(tokens: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(SOS_TOKEN.to_string());
    out.extend(tokens);
    out.push(EOS_TOKEN.to_string());
    out
}

impl DialogFile {
    pub fn parse(text: &str) -> Result<Self> {
        let root: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| MtnError::Data(format!("dialogue file is not valid JSON: {e}")))?;
        let list = root
            .get("dialogs")
            .and_then(|d| d.as_array())
            .ok_or_else(|| MtnError::Data("missing top-level `dialogs` array".into()))?;
        let dialogs = list
            .iter()
            .enumerate()
            .map(|(i, d)| {
                Dialog::deserialize(d).map_err(|e| MtnError::Data(format!("dialogue {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DialogFile { dialogs })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MtnError::io(path, e))?;
        DialogFile::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| MtnError::io(path, e))
    }

    /// One example per turn; turn `t` keeps the most recent
    /// `min(t - 1, max_history)` turns as history.
    pub fn examples(&self, max_history: usize) -> Vec<DialogueExample> {
        let mut out = Vec::new();
        for (di, dialog) in self.dialogs.iter().enumerate() {
            let mut caption = tokenize(&dialog.caption);
            caption.extend(tokenize(&dialog.summary));
            let turns: Vec<(Vec<String>, Vec<String>)> = dialog
                .dialog
                .iter()
                .map(|t| (tokenize(&t.question), tokenize(&t.answer)))
                .collect();
            for (ti, turn) in dialog.dialog.iter().enumerate() {
                let start = ti.saturating_sub(max_history);
                out.push(DialogueExample {
                    dialogue_index: di,
                    video_id: dialog.video_id.clone(),
                    turn: ti + 1,
                    caption: caption.clone(),
                    history: turns[start..ti].to_vec(),
                    query: turns[ti].0.clone(),
                    target: wrap_target(turns[ti].1.clone()),
                    candidates: turn
                        .candidates
                        .as_ref()
                        .map(|c| c.iter().map(|s| tokenize(s)).collect()),
                });
            }
        }
        out
    }
}

/// Reads a dialogue file and expands it into per-turn examples.
pub fn load_dataset(path: &Path, max_history: usize) -> Result<Vec<DialogueExample>> {
    if max_history == 0 {
        return Err(MtnError::config("data.max_history", "must be at least 1"));
    }
    Ok(DialogFile::read(path)?.examples(max_history))
}

/// Token streams of every example, for vocabulary construction.
pub fn corpus_sentences(examples: &[DialogueExample]) -> Vec<Vec<String>> {
    let mut seen_dialogue = std::collections::HashSet::new();
    let mut out = Vec::new();
    for ex in examples {
        // Captions repeat on every turn of a dialogue; count them once.
        if seen_dialogue.insert(ex.dialogue_index) {
            out.push(ex.caption.clone());
        }
        out.push(ex.query.clone());
        out.push(ex.answer_tokens().to_vec());
    }
    out
}

pub fn build_vocab(examples: &[DialogueExample], min_freq: usize) -> Vocabulary {
    let sentences = corpus_sentences(examples);
    Vocabulary::build(sentences.iter().map(Vec::as_slice), min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(turns: usize) -> String {
        let dialog: Vec<String> = (0..turns)
            .map(|i| format!(r#"{{"question": "Q{i}?", "answer": "A{i}."}}"#))
            .collect();
        format!(
            r#"{{"dialogs": [{{"video_id": "v1", "caption": "A man.", "summary": "He sits.", "dialog": [{}]}}]}}"#,
            dialog.join(",")
        )
    }

    #[test]
    fn one_example_per_turn() {
        let f = DialogFile::parse(&sample(10)).unwrap();
        let ex = f.examples(10);
        assert_eq!(ex.len(), 10);
        assert!(ex[0].history.is_empty());
        assert_eq!(ex[9].history.len(), 9);
        assert_eq!(ex[3].caption, vec!["a", "man", ".", "he", "sits", "."]);
        assert_eq!(ex[2].target, vec!["<sos>", "a2", ".", "<eos>"]);
    }

    #[test]
    fn history_truncation() {
        let f = DialogFile::parse(&sample(5)).unwrap();
        for ex in f.examples(1) {
            assert!(ex.history.len() <= 1);
        }
        let ex = f.examples(2);
        assert_eq!(ex[4].history[0].0, vec!["q2", "?"]);
        assert_eq!(
            ex[1].history_tokens(),
            vec!["q0", "?", "<eos>", "a0", ".", "<eos>"]
        );
    }

    #[test]
    fn malformed_dialogue_names_index() {
        let text = r#"{"dialogs": [{"video_id": "v", "caption": "", "summary": "", "dialog": []},
                                   {"video_id": "w", "caption": ""}]}"#;
        let err = DialogFile::parse(text).unwrap_err().to_string();
        assert!(err.contains("dialogue 1"), "{err}");
        assert!(DialogFile::parse("{").is_err());
        assert!(DialogFile::parse("{}").is_err());
    }
}
