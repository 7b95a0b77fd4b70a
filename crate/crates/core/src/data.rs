//! JSON-lines example files.

use std::io::Write;
use std::path::Path;

use crate::encoders::Example;
use crate::error::{Error, Result};

/// One example per non-blank line. Errors carry the 1-based line number.
pub fn parse_examples(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[Example]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        s.push('\n');
    }
    s
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    parse_examples(&std::fs::read_to_string(path)?)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_jsonl(examples).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ex = vec![
            Example { image_features: vec![0.1, -2.5e-7], token_ids: vec![3, 1], label: 2, gold_node: Some("e".into()) },
            Example { image_features: vec![1.0], token_ids: vec![0], label: 0, gold_node: None },
        ];
        let text = to_jsonl(&ex);
        assert_eq!(parse_examples(&text).unwrap(), ex);
        assert!(text.lines().nth(1).unwrap().find("gold_node").is_none());
    }

    #[test]
    fn bad_line_reports_number() {
        let text = "{\"image_features\":[1.0],\"token_ids\":[0],\"label\":0}\n\n{\"oops\":1}\n";
        match parse_examples(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
