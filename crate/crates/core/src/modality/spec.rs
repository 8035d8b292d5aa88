use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialization parameters for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Channels per sequence element after optional patchify (`d_m`).
    pub channel_size: usize,
    /// Number of non-channel axes that get positional features.
    pub extra_axes: usize,
    pub num_freq_bands: usize,
    pub max_freq: f64,
    /// Square patch edge for image-like inputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
}

impl ModalitySpec {
    pub fn new(
        name: impl Into<String>,
        channel_size: usize,
        extra_axes: usize,
        num_freq_bands: usize,
        max_freq: f64,
    ) -> Self {
        Self {
            name: name.into(),
            channel_size,
            extra_axes,
            num_freq_bands,
            max_freq,
            patch_size: None,
        }
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch_size = Some(patch);
        self
    }

    /// `a · (2F + 1)`.
    pub fn positional_width(&self) -> usize {
        self.extra_axes * (2 * self.num_freq_bands + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("modality `{}`: {what}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("modality with empty name".into()));
        }
        if self.channel_size == 0 {
            return bad("channel_size must be positive");
        }
        if self.extra_axes == 0 {
            return bad("extra_axes must be positive");
        }
        if self.num_freq_bands == 0 {
            return bad("num_freq_bands must be at least 1");
        }
        if !(self.max_freq.is_finite() && self.max_freq > 0.0) {
            return bad("max_freq must be positive");
        }
        if self.channel_size > MAX_WIDTH
            || self.extra_axes > MAX_AXES
            || self.num_freq_bands > MAX_WIDTH
        {
            return bad("sizes are implausibly large");
        }
        if let Some(p) = self.patch_size {
            if p == 0 {
                return bad("patch_size must be positive");
            }
            if self.extra_axes != 2 {
                return bad("patched modalities have exactly 2 extra axes");
            }
        }
        Ok(())
    }
}

const MAX_WIDTH: usize = 1 << 20;
const MAX_AXES: usize = 8;

/// The ordered set of distinct modalities; entry index is the one-hot slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRegistry {
    entries: Vec<ModalitySpec>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
}

impl ModalityRegistry {
    pub fn new(entries: Vec<ModalitySpec>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("registry needs at least one modality".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            e.validate()?;
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", e.name)));
            }
        }
        Ok(Self {
            entries,
            aliases: BTreeMap::new(),
        })
    }

    /// Makes `alias` resolve to the existing entry `target`, so both share
    /// one one-hot index.
    pub fn with_alias(mut self, alias: impl Into<String>, target: &str) -> Result<Self> {
        let alias = alias.into();
        if self.entries.iter().any(|e| e.name == alias) || self.aliases.contains_key(&alias) {
            return Err(Error::Config(format!(
                "alias `{alias}` collides with an existing name"
            )));
        }
        let target = self.entry_name(target)?.to_string();
        self.aliases.insert(alias, target);
        Ok(self)
    }

    fn entry_name<'a>(&'a self, name: &'a str) -> Result<&'a str> {
        if self.entries.iter().any(|e| e.name == name) {
            Ok(name)
        } else {
            Err(Error::UnknownModality(name.to_string()))
        }
    }

    /// Entry index for a modality or alias name.
    pub fn resolve(&self, name: &str) -> Result<usize> {
        let target = self.aliases.get(name).map(String::as_str).unwrap_or(name);
        self.entries
            .iter()
            .position(|e| e.name == target)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn resolve_all(&self, names: &[String]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.resolve(n)).collect()
    }

    pub fn spec(&self, index: usize) -> &ModalitySpec {
        &self.entries[index]
    }

    pub fn spec_by_name(&self, name: &str) -> Result<&ModalitySpec> {
        Ok(&self.entries[self.resolve(name)?])
    }

    pub fn entries(&self) -> &[ModalitySpec] {
        &self.entries
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    /// `|M|`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Common standardized width: max over entries of `d_m + d_pm + |M|`.
    pub fn d_all(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.channel_size + e.positional_width() + self.len())
            .max()
            .expect("registry is non-empty")
    }

    pub fn layout(&self, index: usize) -> Layout {
        let spec = &self.entries[index];
        let d_all = self.d_all();
        let m = self.len();
        let pos_start = d_all - m - spec.positional_width();
        Layout {
            raw: 0..spec.channel_size,
            pad: spec.channel_size..pos_start,
            positional: pos_start..d_all - m,
            modality: d_all - m..d_all,
        }
    }
}

/// Segment offsets within a standardized row of width `d_all`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub raw: Range<usize>,
    pub pad: Range<usize>,
    pub positional: Range<usize>,
    pub modality: Range<usize>,
}

impl Layout {
    pub fn width(&self) -> usize {
        self.modality.end
    }
}
