use crate::error::{Error, Result};

/// Per-stage channel-mean activations, one line per stage:
/// `stage c0 c1 …` with six decimals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Fixture {
    pub stages: Vec<(String, Vec<f64>)>,
}

impl Fixture {
    pub fn get(&self, stage: &str) -> Option<&[f64]> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, v)| v.as_slice())
    }
}

pub fn parse_fixture(text: &str) -> Result<Fixture> {
    let mut stages = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let mut parts = line.split_whitespace();
        if let Some(stage) = parts.next() {
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        offset,
                        reason: format!("bad value `{p}` for {stage}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::Parse {
                    offset,
                    reason: format!("stage `{stage}` has no values"),
                });
            }
            stages.push((stage.to_string(), values));
        }
        offset += line.len();
    }
    Ok(Fixture { stages })
}

pub fn write_fixture(f: &Fixture) -> String {
    let mut out = String::new();
    for (stage, values) in &f.stages {
        out.push_str(stage);
        for v in values {
            out.push_str(&format!(" {v:.6}"));
        }
        out.push('\n');
    }
    out
}
