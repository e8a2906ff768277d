//! View declarations and availability masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Temporal,
    Static,
    Categorical,
}

/// One data source. `dims` is `[T, c]` for temporal views, `[c]` for static
/// views and `[cardinality]` for categorical views.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub id: String,
    pub kind: ViewKind,
    pub dims: Vec<usize>,
}

impl ViewSpec {
    pub fn temporal(id: impl Into<String>, steps: usize, channels: usize) -> Self {
        Self {
            id: id.into(),
            kind: ViewKind::Temporal,
            dims: vec![steps, channels],
        }
    }

    pub fn fixed(id: impl Into<String>, channels: usize) -> Self {
        Self {
            id: id.into(),
            kind: ViewKind::Static,
            dims: vec![channels],
        }
    }

    pub fn categorical(id: impl Into<String>, cardinality: usize) -> Self {
        Self {
            id: id.into(),
            kind: ViewKind::Categorical,
            dims: vec![cardinality],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ViewKind::Temporal => self.dims.len() == 2 && self.dims[0] >= 1 && self.dims[1] >= 1,
            ViewKind::Static => self.dims.len() == 1 && self.dims[0] >= 1,
            ViewKind::Categorical => self.dims.len() == 1 && self.dims[0] >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "view `{}` ({:?}) has invalid dims {:?}",
                self.id, self.kind, self.dims
            )))
        }
    }

    /// Time steps; 1 for non-temporal views.
    pub fn steps(&self) -> usize {
        match self.kind {
            ViewKind::Temporal => self.dims[0],
            _ => 1,
        }
    }

    /// Channels per step as seen by an encoder (one-hot width for categorical).
    pub fn channels(&self) -> usize {
        match self.kind {
            ViewKind::Temporal => self.dims[1],
            _ => self.dims[0],
        }
    }

    pub fn cardinality(&self) -> Option<usize> {
        (self.kind == ViewKind::Categorical).then(|| self.dims[0])
    }

    /// Stored values per sample: `T·c`, `c`, or one category index.
    pub fn raw_width(&self) -> usize {
        match self.kind {
            ViewKind::Temporal => self.dims[0] * self.dims[1],
            ViewKind::Static => self.dims[0],
            ViewKind::Categorical => 1,
        }
    }

    /// Values per sample after one-hot expansion.
    pub fn input_width(&self) -> usize {
        self.steps() * self.channels()
    }
}

pub const MAX_VIEWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    views: Vec<ViewSpec>,
}

impl ViewSet {
    pub fn new(views: Vec<ViewSpec>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("at least one view is required".into()));
        }
        if views.len() > MAX_VIEWS {
            return Err(Error::Config(format!("at most {MAX_VIEWS} views are supported")));
        }
        for (i, v) in views.iter().enumerate() {
            v.validate()?;
            if views[..i].iter().any(|w| w.id == v.id) {
                return Err(Error::Config(format!("duplicate view id `{}`", v.id)));
            }
        }
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, index: usize) -> &ViewSpec {
        &self.views[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ViewSpec> {
        self.views.iter()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.views
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::UnknownView(id.to_string()))
    }

    pub fn full_mask(&self) -> MaskSet {
        MaskSet::full(self.len())
    }

    pub fn mask_of(&self, ids: &[&str]) -> Result<MaskSet> {
        let idx = ids.iter().map(|id| self.index_of(id)).collect::<Result<Vec<_>>>()?;
        MaskSet::from_indices(&idx, self.len())
    }

    /// `optical/radar` style label.
    pub fn label(&self, mask: MaskSet) -> String {
        mask.iter()
            .map(|i| self.views[i].id.as_str())
            .collect::<Vec<_>>()
            .join("/")
    }
}

/// Non-empty set of available views, stored as a bitmask over view indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MaskSet {
    bits: u32,
    m: u8,
}

impl MaskSet {
    pub fn full(m: usize) -> Self {
        assert!((1..=MAX_VIEWS).contains(&m));
        Self {
            bits: (1u32 << m) - 1,
            m: m as u8,
        }
    }

    pub fn from_bits(bits: u32, m: usize) -> Result<Self> {
        if m == 0 || m > MAX_VIEWS {
            return Err(Error::InvalidArgument(format!("view count {m} out of range")));
        }
        if bits == 0 {
            return Err(Error::EmptyMask);
        }
        if bits >> m != 0 {
            return Err(Error::InvalidArgument(format!(
                "mask {bits:#b} names views beyond the {m} declared"
            )));
        }
        Ok(Self { bits, m: m as u8 })
    }

    pub fn from_indices(indices: &[usize], m: usize) -> Result<Self> {
        let mut bits = 0u32;
        for &i in indices {
            if i >= m {
                return Err(Error::InvalidArgument(format!("view index {i} >= {m}")));
            }
            bits |= 1 << i;
        }
        Self::from_bits(bits, m)
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn num_views(self) -> usize {
        self.m as usize
    }

    pub fn contains(self, v: usize) -> bool {
        v < self.m as usize && self.bits & (1 << v) != 0
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn is_full(self) -> bool {
        self.bits == (1u32 << self.m) - 1
    }

    /// Available view indices in declaration order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..self.m as usize).filter(move |&v| self.bits & (1 << v) != 0)
    }

    pub fn indices(self) -> Vec<usize> {
        self.iter().collect()
    }

    /// The mask without view `v`; errors when that would leave nothing.
    pub fn without(self, v: usize) -> Result<Self> {
        Self::from_bits(self.bits & !(1 << v), self.m as usize)
    }
}
