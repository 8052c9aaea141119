use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{
    check_distribution, AttentionFrame, Markers, ThinkingTrace, TokenId, TraceError, VisualContext,
};

/// One reasoning instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub record_id: String,
    pub visual: VisualContext,
    pub prompt: Vec<TokenId>,
    pub trace: ThinkingTrace,
    /// Label distribution per think-span position, when recorded.
    pub z: Option<Vec<Vec<f64>>>,
    /// Attention frame per think-span position, when recorded.
    pub attention: Option<Vec<AttentionFrame>>,
    pub gold_label: String,
}

/// State `s_j`: the prefix before position `j` and the label distribution it
/// induces.
#[derive(Debug, Clone, PartialEq)]
pub struct CognitiveState<'a> {
    pub position: usize,
    pub prefix: &'a [TokenId],
    pub z: &'a [f64],
}

impl TraceRecord {
    /// Recorded cognitive states, aligned with the think span.
    pub fn cognitive_states(&self) -> Option<Vec<CognitiveState<'_>>> {
        let z = self.z.as_ref()?;
        let tokens = self.trace.tokens();
        Some(
            self.trace
                .span_positions()
                .zip(z)
                .map(|(position, row)| CognitiveState {
                    position,
                    prefix: &tokens[..position],
                    z: row,
                })
                .collect(),
        )
    }

    fn validate(&self) -> Result<(), TraceError> {
        if !self.trace.is_terminated() {
            return Err(TraceError::UnterminatedThinkSpan);
        }
        let span = self.trace.span_positions().len();
        if let Some(z) = &self.z {
            if z.len() != span {
                return Err(TraceError::LengthMismatch {
                    what: "z",
                    expected: span,
                    found: z.len(),
                });
            }
            let width = z.first().map_or(0, Vec::len);
            for (k, row) in z.iter().enumerate() {
                if row.len() != width {
                    return Err(TraceError::LengthMismatch {
                        what: "z row width",
                        expected: width,
                        found: row.len(),
                    });
                }
                check_distribution(row, || format!("z row {k}"))?;
            }
        }
        if let Some(frames) = &self.attention {
            if frames.len() != span {
                return Err(TraceError::LengthMismatch {
                    what: "attention",
                    expected: span,
                    found: frames.len(),
                });
            }
            let width = frames.first().map_or(0, AttentionFrame::len);
            for (k, frame) in frames.iter().enumerate() {
                if frame.len() != width {
                    return Err(TraceError::LengthMismatch {
                        what: "attention row width",
                        expected: width,
                        found: frame.len(),
                    });
                }
                check_distribution(&frame.weights, || format!("attention row {k}"))?;
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RecordDoc::from(self)).expect("record serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    record_id: String,
    visual: VisualContext,
    #[serde(default)]
    prompt: Vec<TokenId>,
    tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attention: Option<Vec<Vec<f64>>>,
    gold_label: String,
}

impl From<&TraceRecord> for RecordDoc {
    fn from(r: &TraceRecord) -> Self {
        Self {
            record_id: r.record_id.clone(),
            visual: r.visual.clone(),
            prompt: r.prompt.clone(),
            tokens: r.trace.tokens().to_vec(),
            z: r.z.clone(),
            attention: r
                .attention
                .as_ref()
                .map(|frames| frames.iter().map(|f| f.weights.clone()).collect()),
            gold_label: r.gold_label.clone(),
        }
    }
}

fn record_from_doc(doc: RecordDoc, markers: Markers) -> Result<TraceRecord, TraceError> {
    let trace = ThinkingTrace::new(doc.tokens, markers)?;
    let record = TraceRecord {
        record_id: doc.record_id,
        visual: doc.visual,
        prompt: doc.prompt,
        trace,
        z: doc.z,
        attention: doc
            .attention
            .map(|rows| rows.into_iter().map(AttentionFrame::new).collect()),
        gold_label: doc.gold_label,
    };
    record.validate()?;
    Ok(record)
}

/// Parses a line-delimited record stream. Blank lines are skipped; errors
/// carry 1-based line numbers.
pub fn parse_records(
    source: impl BufRead,
    markers: Markers,
) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TraceError::from(e).at_line(line_no))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RecordDoc =
            serde_json::from_str(&line).map_err(|e| TraceError::from(e).at_line(line_no))?;
        let record = record_from_doc(doc, markers).map_err(|e| e.at_line(line_no))?;
        if !ids.insert(record.record_id.clone()) {
            return Err(TraceError::DuplicateRecord(record.record_id).at_line(line_no));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records one JSON object per line.
pub fn write_records<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record.to_json_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const M: Markers = Markers {
        think_open: 0,
        think_close: 1,
    };

    fn line(z: &str, attention: &str, tokens: &str) -> String {
        format!(
            r#"{{"record_id":"r1","visual":{{"id":"v1","attributes":["a"]}},"prompt":[4],"tokens":{tokens}{z}{attention},"gold_label":"e1"}}"#
        )
    }

    #[test]
    fn parses_256_wide_attention() {
        let row = format!("[{}]", vec!["0.00390625"; 256].join(","));
        let attention = format!(r#","attention":[{row},{row},{row}]"#);
        let records = parse_records(line("", &attention, "[0,2,1]").as_bytes(), M).unwrap();
        let frames = records[0].attention.as_ref().unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.len() == 256));
    }

    #[test]
    fn rejects_unnormalized_z() {
        let z = r#","z":[[0.25,0.25],[0.5,0.5],[0.5,0.5]]"#;
        let err = parse_records(line(z, "", "[0,2,1]").as_bytes(), M).unwrap_err();
        let TraceError::AtLine { line, source } = err else {
            panic!()
        };
        assert_eq!(line, 1);
        assert!(matches!(*source, TraceError::NotNormalized { .. }));
    }

    #[test]
    fn rejects_unterminated_span() {
        let err = parse_records(line("", "", "[0,2,3]").as_bytes(), M).unwrap_err();
        let TraceError::AtLine { source, .. } = err else {
            panic!()
        };
        assert!(matches!(*source, TraceError::UnterminatedThinkSpan));
    }

    #[test]
    fn rejects_misaligned_states() {
        let z = r#","z":[[1.0],[1.0]]"#;
        let err = parse_records(line(z, "", "[0,2,1]").as_bytes(), M).unwrap_err();
        let TraceError::AtLine { source, .. } = err else {
            panic!()
        };
        assert!(matches!(
            *source,
            TraceError::LengthMismatch {
                expected: 3,
                found: 2,
                ..
            }
        ));
    }

    #[test]
    fn error_lines_are_one_based_and_skip_blanks() {
        let good = line("", "", "[0,2,1]");
        let bad = line("", "", "[0,2]");
        let text = format!("{good}\n\n{bad}\n");
        let TraceError::AtLine { line, .. } = parse_records(text.as_bytes(), M).unwrap_err() else {
            panic!()
        };
        assert_eq!(line, 3);
    }

    #[test]
    fn states_view_matches_span() {
        let z = r#","z":[[1.0,0.0],[0.5,0.5],[0.0,1.0]]"#;
        let records = parse_records(line(z, "", "[0,2,1]").as_bytes(), M).unwrap();
        let states = records[0].cognitive_states().unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(states[2].position, 2);
        assert_eq!(states[2].prefix, &[0, 2]);
    }

    #[test]
    fn serialization_round_trip() {
        let z = r#","z":[[0.1,0.9],[0.30000000000000004,0.7],[0.0,1.0]]"#;
        let text = line(z, "", "[0,2,1]");
        let records = parse_records(text.as_bytes(), M).unwrap();
        let again = parse_records(write_records(&records).as_bytes(), M).unwrap();
        assert_eq!(records, again);
        assert_eq!(write_records(&again), write_records(&records));
    }
}
