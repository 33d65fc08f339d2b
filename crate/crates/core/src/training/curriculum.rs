use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups in the order the curriculum unlocks them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Encoder, slot features and the probability, rotation and
    /// translation heads.
    Transforms,
    Intensity,
    Scales,
    Points,
    Anisotropy,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Transforms,
        ParamGroup::Intensity,
        ParamGroup::Scales,
        ParamGroup::Points,
        ParamGroup::Anisotropy,
    ];

    /// Group of a parameter, from its name.
    pub fn of(name: &str) -> ParamGroup {
        match name {
            "prototypes.intensity" => ParamGroup::Intensity,
            "prototypes.base_scale" => ParamGroup::Scales,
            "prototypes.points" => ParamGroup::Points,
            "prototypes.aniso_scale" => ParamGroup::Anisotropy,
            n if n.starts_with("heads.scale.") => ParamGroup::Scales,
            _ => ParamGroup::Transforms,
        }
    }

    /// Prototype intensities, scales and points are learned without
    /// weight decay.
    pub fn decays(name: &str) -> bool {
        !name.starts_with("prototypes.")
    }

    fn stage(self) -> u8 {
        self as u8 + 1
    }
}

/// One of the five curriculum stages; stage `i` trains every group unlocked
/// at stages `1..=i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CurriculumStage(u8);

impl CurriculumStage {
    pub const FIRST: CurriculumStage = CurriculumStage(1);
    pub const LAST: CurriculumStage = CurriculumStage(5);

    pub fn new(index: u8) -> Result<Self> {
        if (1..=5).contains(&index) {
            Ok(CurriculumStage(index))
        } else {
            Err(Error::Config(format!("curriculum stage {index} outside 1..=5")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn next(self) -> Option<Self> {
        (self.0 < 5).then_some(CurriculumStage(self.0 + 1))
    }

    pub fn all() -> impl Iterator<Item = CurriculumStage> {
        (1..=5).map(CurriculumStage)
    }

    pub fn unlocks(self, group: ParamGroup) -> bool {
        group.stage() <= self.0
    }

    /// The group this stage adds.
    pub fn newly_unlocked(self) -> ParamGroup {
        ParamGroup::ALL[self.0 as usize - 1]
    }

    pub fn unlocked(self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.unlocks(*g)).collect()
    }

    /// Slot scales are fixed to one before the scales stage.
    pub fn scales_active(self) -> bool {
        self.unlocks(ParamGroup::Scales)
    }

    /// The three slot scale channels are tied until the anisotropy stage.
    pub fn anisotropic(self) -> bool {
        self.unlocks(ParamGroup::Anisotropy)
    }
}

impl Default for CurriculumStage {
    fn default() -> Self {
        Self::FIRST
    }
}

impl TryFrom<u8> for CurriculumStage {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        CurriculumStage::new(v)
    }
}

impl From<CurriculumStage> for u8 {
    fn from(s: CurriculumStage) -> u8 {
        s.0
    }
}

impl fmt::Display for CurriculumStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlocking_is_cumulative() {
        let mut seen = 0;
        for stage in CurriculumStage::all() {
            let u = stage.unlocked();
            assert_eq!(u.len(), stage.index() as usize);
            assert!(u.len() > seen);
            seen = u.len();
            assert!(stage.unlocks(stage.newly_unlocked()));
        }
        assert!(CurriculumStage::new(0).is_err() && CurriculumStage::new(6).is_err());
    }

    #[test]
    fn groups_by_name() {
        assert_eq!(ParamGroup::of("heads.scale.2.weight"), ParamGroup::Scales);
        assert_eq!(ParamGroup::of("heads.translate.0.linear.weight"), ParamGroup::Transforms);
        assert_eq!(ParamGroup::of("prototypes.points"), ParamGroup::Points);
        assert!(!ParamGroup::decays("prototypes.points"));
        assert!(ParamGroup::decays("encoder.point.linear.weight"));
    }
}
