//! Output classes: 15 sound slots, then background and speech.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SOUNDS: usize = 15;
pub const NUM_CLASSES: usize = 17;
pub const BACKGROUND: usize = 15;
pub const SPEECH: usize = 16;

pub const STANDARD_SOUNDS: [&str; NUM_SOUNDS] = [
    "click", "cluck", "pop", "p", "k", "t", "sh", "s", "eh", "uh", "oo", "mm", "ee", "la", "muh",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    /// The fifteen nonverbal sounds followed by `background` and `speech`.
    pub fn standard() -> Self {
        Self::with_sounds(&STANDARD_SOUNDS).expect("standard class set is valid")
    }

    /// Fills the first slots with `sounds` and names the remainder
    /// `unused_<i>`.
    pub fn with_sounds<S: AsRef<str>>(sounds: &[S]) -> Result<Self> {
        if sounds.len() > NUM_SOUNDS {
            return Err(Error::Config(format!(
                "{} sound classes, at most {NUM_SOUNDS}",
                sounds.len()
            )));
        }
        let mut names: Vec<String> = sounds.iter().map(|s| s.as_ref().to_string()).collect();
        for i in names.len()..NUM_SOUNDS {
            names.push(format!("unused_{i}"));
        }
        names.push("background".into());
        names.push("speech".into());
        Self::from_names(names)
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() != NUM_CLASSES {
            return Err(Error::Config(format!(
                "class set needs {NUM_CLASSES} names, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Sound-class slots that carry a real name (not `unused_<i>`).
    pub fn named_sounds(&self) -> Vec<usize> {
        (0..NUM_SOUNDS)
            .filter(|&i| !self.names[i].starts_with("unused_"))
            .collect()
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        Self::standard()
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = Error;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::from_names(names)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(c: ClassSet) -> Self {
        c.names
    }
}
