use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{ItemDef, LongDataset};
use crate::error::{Error, Result};
use crate::parameters::Layout;
use crate::timebasis::{DesignSpec, TimeBasis};

/// Declarative model: the scale's items, the time basis and the design terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub items: Vec<ItemDef>,
    pub basis: TimeBasis,
    pub design: DesignSpec,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Spec("model needs at least one item".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.n_levels < 2 {
                return Err(Error::Spec(format!("item {} needs at least 2 levels", item.item_id)));
            }
            if self.items[..i].iter().any(|o| o.item_id == item.item_id) {
                return Err(Error::Spec(format!("duplicate item {}", item.item_id)));
            }
        }
        if !self.design.contrasts.is_empty() && self.items.len() < 2 {
            return Err(Error::Spec("item-specific contrasts need at least two items".into()));
        }
        self.basis.validate()?;
        self.design.validate(&self.basis)
    }

    /// Checks that every item of the model exists in the dataset with the
    /// same number of levels.
    pub fn check_against(&self, ds: &LongDataset) -> Result<()> {
        for item in &self.items {
            let found = ds
                .item(&item.item_id)
                .ok_or_else(|| Error::Spec(format!("item {} is not in the dataset", item.item_id)))?;
            if found.n_levels != item.n_levels {
                return Err(Error::Spec(format!(
                    "item {}: model has {} levels, dataset {}",
                    item.item_id, item.n_levels, found.n_levels
                )));
            }
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_fixed(&self) -> usize {
        self.design.fixed.len()
    }

    /// Number of random effects `p`.
    pub fn n_random(&self) -> usize {
        self.design.random.len()
    }

    pub fn n_contrasts(&self) -> usize {
        self.design.contrasts.len()
    }

    pub fn item_index(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|it| it.item_id == item_id)
    }

    pub fn fixed_labels(&self) -> Vec<String> {
        self.design.fixed.iter().map(|t| t.label(&self.basis)).collect()
    }

    pub fn random_labels(&self) -> Vec<String> {
        self.design.random.iter().map(|t| t.label(&self.basis)).collect()
    }

    pub fn contrast_labels(&self) -> Vec<String> {
        self.design.contrasts.iter().map(|t| t.label(&self.basis)).collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Same model with the item-specific contrasts removed.
    pub fn without_contrasts(&self) -> ModelSpec {
        let mut out = self.clone();
        out.design.contrasts.clear();
        out
    }
}
