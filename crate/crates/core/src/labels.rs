use crate::error::{Error, Result};

/// Semantic label id. `u16` matches the on-disk prediction and PLY formats.
pub type Label = u16;

/// Marker for "no label" in per-pixel maps.
pub const NO_LABEL: Label = Label::MAX;

/// Ordered label names plus the subset of object classes. Labels outside the
/// object subset are structural (wall, floor, ceiling, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
    object: Vec<bool>,
}

impl LabelSpace {
    pub fn new<S: AsRef<str>>(names: &[S], object_names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid("label space", "need at least two labels"));
        }
        if names.len() >= NO_LABEL as usize {
            return Err(Error::invalid("label space", "too many labels"));
        }
        let names: Vec<String> = names.iter().map(|s| s.as_ref().trim().to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::invalid("label space", "empty label name"));
            }
            if names[..i].contains(n) {
                return Err(Error::invalid("label space", format!("duplicate label {n}")));
            }
        }
        let mut object = vec![false; names.len()];
        for o in object_names {
            let o = o.as_ref().trim();
            let idx = names
                .iter()
                .position(|n| n == o)
                .ok_or_else(|| Error::invalid("label space", format!("unknown object label {o}")))?;
            object[idx] = true;
        }
        let n_obj = object.iter().filter(|&&b| b).count();
        if n_obj == 0 || n_obj == names.len() {
            return Err(Error::invalid(
                "label space",
                "object subset must be non-empty and proper",
            ));
        }
        Ok(LabelSpace { names, object })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: Label) -> Option<&str> {
        self.names.get(label as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<Label> {
        self.names.iter().position(|n| n == name).map(|i| i as Label)
    }

    pub fn is_object(&self, label: Label) -> bool {
        self.object.get(label as usize).copied().unwrap_or(false)
    }

    pub fn object_mask(&self) -> &[bool] {
        &self.object
    }

    pub fn object_names(&self) -> Vec<&str> {
        self.names
            .iter()
            .zip(&self.object)
            .filter(|(_, &o)| o)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}
