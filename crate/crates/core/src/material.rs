use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Material vocabulary, in label-index order.
pub const MATERIALS: [&str; 5] = [
    "silk_chamuse",
    "denim_lightweight",
    "knit_terry",
    "wool_melton",
    "silk_chiffon",
];

/// One-hot material label over a vocabulary of `count` materials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaterialLabel {
    index: usize,
    count: usize,
}

impl MaterialLabel {
    pub fn new(index: usize, count: usize) -> Result<Self> {
        if index >= count {
            return Err(Error::Material(format!(
                "material index {index} outside vocabulary of {count}"
            )));
        }
        Ok(Self { index, count })
    }

    /// Looks a name up in `vocabulary`; accepts spaces or underscores.
    pub fn from_name(name: &str, vocabulary: &[String]) -> Result<Self> {
        let key = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        vocabulary
            .iter()
            .position(|v| v.to_ascii_lowercase().replace([' ', '-'], "_") == key)
            .map(|index| Self { index, count: vocabulary.len() })
            .ok_or_else(|| {
                Error::Material(format!("unknown material `{name}` (vocabulary: {vocabulary:?})"))
            })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn one_hot(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.count];
        v[self.index] = 1.0;
        v
    }
}

/// The default vocabulary as owned strings.
pub fn default_vocabulary() -> Vec<String> {
    MATERIALS.iter().map(|s| s.to_string()).collect()
}
