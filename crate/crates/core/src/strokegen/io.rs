//! Stroke-JSON ingestion: one JSON record per line,
//! `{"label": "...", "strokes": [{"class": 1..5, "points": [[x, y], ...]}, ...]}`.

use std::path::Path;

use serde::Deserialize;

use super::{CharacterSpec, Stroke, StrokeClass, MAX_STROKES};
use crate::error::{Result, SaeError};

#[derive(Deserialize)]
struct RawStroke {
    class: i64,
    points: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
struct RawRecord {
    label: String,
    strokes: Vec<RawStroke>,
}

/// Parses JSON-lines text; `source` names the input in error messages.
/// Blank lines are skipped. The result is sorted by label.
pub fn parse_stroke_records(text: &str, source: &str) -> Result<Vec<CharacterSpec>> {
    let mut specs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = specs.len();
        let ctx = || format!("{source}:{} (record {record})", lineno + 1);
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| SaeError::Parse {
            context: ctx(),
            message: e.to_string(),
        })?;
        if raw.strokes.len() > MAX_STROKES {
            return Err(SaeError::Parse {
                context: ctx(),
                message: format!("{} strokes exceeds the maximum of {MAX_STROKES}", raw.strokes.len()),
            });
        }
        let strokes = raw
            .strokes
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let class = u8::try_from(s.class)
                    .ok()
                    .and_then(|c| StrokeClass::new(c).ok())
                    .ok_or_else(|| SaeError::Parse {
                        context: ctx(),
                        message: format!("stroke {i} has class {} outside 1..=5", s.class),
                    })?;
                Ok(Stroke { class, points: s.points })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = CharacterSpec { label: raw.label, strokes };
        spec.validate().map_err(|e| SaeError::Parse { context: ctx(), message: e.to_string() })?;
        specs.push(spec);
    }
    specs.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(specs)
}

pub fn load_stroke_file(path: impl AsRef<Path>) -> Result<Vec<CharacterSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SaeError::io(path, e))?;
    parse_stroke_records(&text, &path.display().to_string())
}

/// Writes specs in the same JSON-lines format, in the given order.
pub fn save_stroke_file(path: impl AsRef<Path>, specs: &[CharacterSpec]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in specs {
        text.push_str(&serde_json::to_string(s).expect("specs always serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| SaeError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: &str, n: usize, class: i64) -> String {
        let strokes: Vec<String> = (0..n)
            .map(|i| format!(r#"{{"class": {class}, "points": [[{}, 10], [{}, 500]]}}"#, 10 + i, 20 + i))
            .collect();
        format!(r#"{{"label": "{label}", "strokes": [{}]}}"#, strokes.join(","))
    }

    #[test]
    fn empty_input_gives_empty_list() {
        assert!(parse_stroke_records("", "t").unwrap().is_empty());
        assert!(parse_stroke_records("\n  \n", "t").unwrap().is_empty());
    }

    #[test]
    fn sorted_by_label() {
        let text = [record("b", 2, 1), record("a", 1, 2)].join("\n");
        let specs = parse_stroke_records(&text, "t").unwrap();
        assert_eq!(specs[0].label, "a");
        assert_eq!(specs[1].label, "b");
    }

    #[test]
    fn too_many_strokes_names_the_record() {
        let text = [record("a", 3, 1), record("b", 25, 1)].join("\n");
        match parse_stroke_records(&text, "t") {
            Err(SaeError::Parse { context, message }) => {
                assert!(context.contains("record 1"), "{context}");
                assert!(context.contains(":2"), "{context}");
                assert!(message.contains("25"));
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_stroke_records(&record("c", 24, 1), "t").is_ok());
    }

    #[test]
    fn bad_class_and_schema_rejected() {
        assert!(matches!(parse_stroke_records(&record("a", 1, 6), "t"), Err(SaeError::Parse { .. })));
        assert!(matches!(parse_stroke_records(&record("a", 1, 0), "t"), Err(SaeError::Parse { .. })));
        assert!(parse_stroke_records(r#"{"label": "x"}"#, "t").is_err());
        assert!(parse_stroke_records("not json", "t").is_err());
    }

    #[test]
    fn save_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let specs = parse_stroke_records(&[record("a", 2, 3), record("b", 1, 5)].join("\n"), "t").unwrap();
        save_stroke_file(&p, &specs).unwrap();
        assert_eq!(load_stroke_file(&p).unwrap(), specs);
        assert!(matches!(load_stroke_file(dir.path().join("nope")), Err(SaeError::Io { .. })));
    }
}
