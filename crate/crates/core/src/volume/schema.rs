use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
/// Voxels inside the thalamic region that carry no confident annotation.
pub const UNLABELED: u8 = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nucleus {
    pub code: u8,
    pub abbreviation: String,
    pub name: String,
}

/// The nucleus code table. Codes are contiguous from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    nuclei: Vec<Nucleus>,
}

// The inferior pulvinar is spelled "PuI"; some tables write "Pul".
const DEFAULT_NUCLEI: [(&str, &str); 13] = [
    ("AN", "Anterior nucleus"),
    ("CL", "Central lateral"),
    ("CM", "Centromedian"),
    ("LD", "Lateral dorsal"),
    ("LP", "Lateral posterior"),
    ("MD", "Mediodorsal"),
    ("PuA", "Anterior pulvinar"),
    ("PuI", "Inferior pulvinar"),
    ("VA", "Ventral anterior"),
    ("VLA", "Ventral lateral anterior"),
    ("VLP", "Ventral lateral posterior"),
    ("VPL", "Ventral posterior lateral"),
    ("VPM", "Ventral posterior medial"),
];

impl Default for LabelSchema {
    fn default() -> Self {
        let nuclei = DEFAULT_NUCLEI
            .iter()
            .enumerate()
            .map(|(i, (abbr, name))| Nucleus {
                code: i as u8 + 1,
                abbreviation: abbr.to_string(),
                name: name.to_string(),
            })
            .collect();
        LabelSchema { nuclei }
    }
}

impl LabelSchema {
    pub fn new(nuclei: Vec<Nucleus>) -> Result<Self> {
        for (i, n) in nuclei.iter().enumerate() {
            if n.code as usize != i + 1 {
                return Err(Error::Schema(format!(
                    "nucleus codes must be contiguous from 1; entry {i} has code {}",
                    n.code
                )));
            }
            if nuclei[..i].iter().any(|m| m.abbreviation == n.abbreviation) {
                return Err(Error::Schema(format!(
                    "duplicate abbreviation {}",
                    n.abbreviation
                )));
            }
        }
        if nuclei.len() > 13 {
            return Err(Error::Schema("at most 13 nuclei are supported".into()));
        }
        Ok(LabelSchema { nuclei })
    }

    pub fn nuclei(&self) -> &[Nucleus] {
        &self.nuclei
    }

    pub fn codes(&self) -> impl Iterator<Item = u8> + '_ {
        self.nuclei.iter().map(|n| n.code)
    }

    pub fn abbreviation(&self, code: u8) -> Option<&str> {
        self.nuclei
            .iter()
            .find(|n| n.code == code)
            .map(|n| n.abbreviation.as_str())
    }

    pub fn code_of(&self, abbreviation: &str) -> Option<u8> {
        self.nuclei
            .iter()
            .find(|n| n.abbreviation == abbreviation)
            .map(|n| n.code)
    }
}
