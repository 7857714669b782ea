use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_reward: Option<f64>,
}

impl Trajectory {
    pub fn new(prompt: Vec<u32>, response: Vec<u32>) -> Self {
        Self {
            prompt,
            response,
            oracle_reward: None,
        }
    }

    /// Prompt followed by response.
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }
}

/// A chosen/rejected pair of responses to one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub chosen_oracle: f64,
    pub rejected_oracle: f64,
}

impl PreferencePair {
    pub fn chosen_tokens(&self) -> Vec<u32> {
        [self.prompt.as_slice(), &self.chosen].concat()
    }

    pub fn rejected_tokens(&self) -> Vec<u32> {
        [self.prompt.as_slice(), &self.rejected].concat()
    }

    pub fn validate(&self) -> Result<()> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::contract("preference pair with an empty response"));
        }
        if !(self.chosen_oracle > self.rejected_oracle) {
            return Err(Error::contract(format!(
                "chosen score {} does not exceed rejected score {}",
                self.chosen_oracle, self.rejected_oracle
            )));
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(w: &mut impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let pairs = vec![PreferencePair {
            prompt: vec![0, 5, 2],
            chosen: vec![5, 1],
            rejected: vec![6, 1],
            chosen_oracle: 1.0,
            rejected_oracle: 0.0,
        }];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &pairs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"prompt\":[0,5,2]"));
        let back: Vec<PreferencePair> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, pairs);
    }

    #[test]
    fn pair_requires_strict_order() {
        let mut p = PreferencePair {
            prompt: vec![],
            chosen: vec![3],
            rejected: vec![4],
            chosen_oracle: 0.5,
            rejected_oracle: 0.5,
        };
        assert!(p.validate().is_err());
        p.chosen_oracle = 0.6;
        assert!(p.validate().is_ok());
    }
}
