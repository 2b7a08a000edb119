use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::FoveationMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Hr,
    Lr,
}

/// Grid position of one sequence entry. `y`/`x` are in the token's own
/// resolution: HR-grid cells for HR tokens, LR-grid (block) cells for LR tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenPos {
    pub class: TokenClass,
    pub frame: usize,
    pub y: usize,
    pub x: usize,
}

/// Bijection between sequence indices and token grid positions.
///
/// Canonical order, per frame: HR tokens in row-major HR-grid order, then LR
/// tokens in row-major LR-grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    mask: Arc<FoveationMask>,
    entries: Vec<TokenPos>,
    hr_index: Vec<Option<usize>>,
    lr_index: Vec<Option<usize>>,
}

impl TokenLayout {
    pub fn new(mask: &FoveationMask) -> Result<Self> {
        mask.validate()?;
        let (f, h, w) = (mask.frames(), mask.height(), mask.width());
        let mut entries = Vec::with_capacity(mask.sequence_length().l);
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(t, y, x) {
                        entries.push(TokenPos { class: TokenClass::Hr, frame: t, y, x });
                    }
                }
            }
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    if !mask.block_is_hr(t, y, x) {
                        entries.push(TokenPos { class: TokenClass::Lr, frame: t, y, x });
                    }
                }
            }
        }
        Self::from_entries(Arc::new(mask.clone()), entries)
    }

    fn from_entries(mask: Arc<FoveationMask>, entries: Vec<TokenPos>) -> Result<Self> {
        let (f, h, w) = (mask.frames(), mask.height(), mask.width());
        let mut hr_index = vec![None; f * h * w];
        let mut lr_index = vec![None; f * (h / 2) * (w / 2)];
        for (i, e) in entries.iter().enumerate() {
            let slot = match e.class {
                TokenClass::Hr => {
                    if !mask.get(e.frame, e.y, e.x) {
                        return Err(Error::invalid("HR entry on an LR cell"));
                    }
                    &mut hr_index[(e.frame * h + e.y) * w + e.x]
                }
                TokenClass::Lr => {
                    if mask.block_is_hr(e.frame, e.y, e.x) {
                        return Err(Error::invalid("LR entry on an HR block"));
                    }
                    &mut lr_index[(e.frame * (h / 2) + e.y) * (w / 2) + e.x]
                }
            };
            if slot.replace(i).is_some() {
                return Err(Error::invalid("duplicate layout entry"));
            }
        }
        if entries.len() != mask.sequence_length().l {
            return Err(Error::invalid("layout does not cover every token"));
        }
        Ok(Self { mask, entries, hr_index, lr_index })
    }

    /// Same tokens, reordered so that new index `i` holds old entry `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.entries.len() {
            return Err(Error::invalid("permutation length differs from layout length"));
        }
        let entries = perm
            .iter()
            .map(|&p| self.entries.get(p).copied().ok_or_else(|| Error::invalid("permutation index out of range")))
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(self.mask.clone(), entries)
    }

    pub fn mask(&self) -> &FoveationMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TokenPos] {
        &self.entries
    }

    pub fn frames(&self) -> usize {
        self.mask.frames()
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    pub fn hr_count(&self) -> usize {
        self.entries.iter().filter(|e| e.class == TokenClass::Hr).count()
    }

    /// Sequence index of the HR token at `(t, y, x)`, if that cell is HR.
    pub fn hr_at(&self, t: usize, y: usize, x: usize) -> Option<usize> {
        self.hr_index[(t * self.height() + y) * self.width() + x]
    }

    /// Sequence index of the LR token covering block `(t, by, bx)`, if any.
    pub fn lr_at(&self, t: usize, by: usize, bx: usize) -> Option<usize> {
        self.lr_index[(t * (self.height() / 2) + by) * (self.width() / 2) + bx]
    }

    /// Indices of HR tokens, in sequence order.
    pub fn hr_indices(&self) -> Vec<usize> {
        self.indices_of(TokenClass::Hr)
    }

    /// Indices of LR tokens, in sequence order.
    pub fn lr_indices(&self) -> Vec<usize> {
        self.indices_of(TokenClass::Lr)
    }

    fn indices_of(&self, class: TokenClass) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.class == class).map(|(i, _)| i).collect()
    }
}
