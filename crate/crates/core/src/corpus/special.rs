//! Reserved token ids. Specials occupy the lowest ids of every vocabulary
//! and survive vocabulary pruning with their ids unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

/// Decoder start tokens, one per denoiser family.
pub const MODE_R: u32 = 3;
pub const MODE_S: u32 = 4;
pub const MODE_X: u32 = 5;

/// Sentinels reserved per family.
pub const FAMILY_SIZE: u32 = 64;

const R_BASE: u32 = 6;
const S_BASE: u32 = R_BASE + FAMILY_SIZE;
const X_BASE: u32 = S_BASE + FAMILY_SIZE;

/// Number of reserved ids; the first regular token has this id.
pub const SPECIAL_COUNT: u32 = X_BASE + FAMILY_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SentinelFamily {
    R,
    S,
    X,
}

impl SentinelFamily {
    fn base(self) -> u32 {
        match self {
            SentinelFamily::R => R_BASE,
            SentinelFamily::S => S_BASE,
            SentinelFamily::X => X_BASE,
        }
    }

    /// The `index`-th sentinel of this family.
    pub fn sentinel(self, index: usize) -> Result<u32> {
        if index >= FAMILY_SIZE as usize {
            bail!(Config, "{index} sentinels requested, family {self:?} has {FAMILY_SIZE}");
        }
        Ok(self.base() + index as u32)
    }

    pub fn mode_token(self) -> u32 {
        match self {
            SentinelFamily::R => MODE_R,
            SentinelFamily::S => MODE_S,
            SentinelFamily::X => MODE_X,
        }
    }

    pub fn contains(self, id: u32) -> bool {
        (self.base()..self.base() + FAMILY_SIZE).contains(&id)
    }
}

pub fn is_special(id: u32) -> bool {
    id < SPECIAL_COUNT
}

pub fn is_sentinel(id: u32) -> bool {
    (R_BASE..SPECIAL_COUNT).contains(&id)
}

/// Printable names of all specials, indexed by id.
pub fn special_names() -> Vec<String> {
    let mut names: Vec<String> = ["<pad>", "<eos>", "<unk>", "[R]", "[S]", "[X]"].iter().map(|s| s.to_string()).collect();
    for fam in ["R", "S", "X"] {
        names.extend((0..FAMILY_SIZE).map(|i| format!("<{fam}_{i}>")));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let names = special_names();
        assert_eq!(names.len(), SPECIAL_COUNT as usize);
        assert_eq!(names[SentinelFamily::X.sentinel(63).unwrap() as usize], "<X_63>");
        assert_eq!(names[SentinelFamily::S.sentinel(0).unwrap() as usize], "<S_0>");
        assert!(SentinelFamily::R.sentinel(64).is_err());
        assert!(is_sentinel(SentinelFamily::R.sentinel(0).unwrap()));
        assert!(!is_sentinel(MODE_X));
    }
}
