//! Class tables: contiguous internal indices mapped to external label IDs.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRole {
    Background,
    Structure,
    HippocampusLeft,
    HippocampusRight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub index: usize,
    pub label_id: i32,
    pub name: String,
    pub role: ClassRole,
}

/// Serialised as a bare JSON array of entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
}

impl TryFrom<Vec<ClassEntry>> for ClassTable {
    type Error = Error;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        ClassTable::new(entries)
    }
}

impl From<ClassTable> for Vec<ClassEntry> {
    fn from(t: ClassTable) -> Self {
        t.entries
    }
}

impl ClassTable {
    /// Entries are sorted by index; indices must be exactly `0..K` with
    /// index 0 the background, and label IDs unique.
    pub fn new(mut entries: Vec<ClassEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        if entries.len() < 2 {
            return Err(Error::config("a class table needs at least two classes"));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::config(format!("class indices must be contiguous from 0; missing {i}")));
            }
        }
        if entries[0].role != ClassRole::Background {
            return Err(Error::config("class 0 must have role background"));
        }
        let mut ids = HashMap::new();
        for e in &entries {
            if let Some(prev) = ids.insert(e.label_id, e.index) {
                return Err(Error::config(format!(
                    "label id {} used by classes {prev} and {}",
                    e.label_id, e.index
                )));
            }
        }
        Ok(ClassTable { entries })
    }

    /// Classes `0..k` with label ID equal to the index.
    pub fn identity(k: usize) -> Self {
        let entries = (0..k)
            .map(|i| ClassEntry {
                index: i,
                label_id: i as i32,
                name: if i == 0 { "background".into() } else { format!("class{i}") },
                role: if i == 0 { ClassRole::Background } else { ClassRole::Structure },
            })
            .collect();
        ClassTable::new(entries).expect("identity table is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn label_id(&self, index: usize) -> Option<i32> {
        self.entries.get(index).map(|e| e.label_id)
    }

    pub fn index_of(&self, label_id: i32) -> Option<usize> {
        self.entries.iter().position(|e| e.label_id == label_id)
    }

    pub fn with_role(&self, role: ClassRole) -> Vec<usize> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.index).collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_validation() {
        let t = ClassTable::identity(4);
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with('['));
        assert!(json.contains("\"role\":\"background\""));
        assert_eq!(serde_json::from_str::<ClassTable>(&json).unwrap(), t);
        let gap = r#"[{"index":0,"label_id":0,"name":"bg","role":"background"},
                      {"index":2,"label_id":5,"name":"x","role":"structure"}]"#;
        assert!(serde_json::from_str::<ClassTable>(gap).is_err());
        let dup = r#"[{"index":0,"label_id":0,"name":"bg","role":"background"},
                      {"index":1,"label_id":0,"name":"x","role":"structure"}]"#;
        assert!(serde_json::from_str::<ClassTable>(dup).is_err());
        assert_eq!(t.index_of(3), Some(3));
        assert_eq!(t.label_id(9), None);
    }
}
