use std::fmt;

use serde::{Deserialize, Serialize};

/// An (attribute-set, object) label. Attribute indices are kept sorted and
/// unique so that equal label sets compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Composition {
    pub attrs: Vec<usize>,
    pub obj: usize,
}

impl Composition {
    pub fn new(mut attrs: Vec<usize>, obj: usize) -> Self {
        attrs.sort_unstable();
        attrs.dedup();
        Self { attrs, obj }
    }

    pub fn single(attr: usize, obj: usize) -> Self {
        Self { attrs: vec![attr], obj }
    }

    /// Human-readable label such as `red,round ball`.
    pub fn label(&self, attributes: &[String], objects: &[String]) -> String {
        let attrs: Vec<&str> = self
            .attrs
            .iter()
            .map(|&a| attributes.get(a).map_or("?", String::as_str))
            .collect();
        format!("{} {}", attrs.join(","), objects.get(self.obj).map_or("?", String::as_str))
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let attrs: Vec<String> = self.attrs.iter().map(usize::to_string).collect();
        write!(f, "({}|{})", attrs.join(","), self.obj)
    }
}
