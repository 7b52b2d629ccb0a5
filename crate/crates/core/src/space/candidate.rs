use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Kernel pairs of the two CBlock branches.
pub const KERNEL_PAIRS: [(usize, usize); 6] = [(3, 5), (3, 7), (3, 9), (5, 7), (5, 9), (7, 9)];

/// Number of searchable MBlock positions in the macro network.
pub const POSITIONS: usize = 6;

/// One candidate operation: a CBlock with kernels `(k1, k2)` repeated `r` times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandidateSpec {
    pub k1: usize,
    pub k2: usize,
    pub r: usize,
}

impl CandidateSpec {
    pub fn new(k1: usize, k2: usize, r: usize) -> Result<Self> {
        if !KERNEL_PAIRS.contains(&(k1, k2)) {
            return Err(Error::InvalidArgument(format!(
                "kernel pair ({k1},{k2}) is not one of {KERNEL_PAIRS:?}"
            )));
        }
        if !(1..=2).contains(&r) {
            return Err(Error::InvalidArgument(format!("repeat count {r} must be 1 or 2")));
        }
        Ok(Self { k1, k2, r })
    }

    /// Stable identifier used in parameter names, e.g. `k3_5_r1`.
    pub fn label(&self) -> String {
        format!("k{}_{}_r{}", self.k1, self.k2, self.r)
    }
}

impl fmt::Display for CandidateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.k1, self.k2, self.r)
    }
}

/// Search space: pairs only, or pairs crossed with a repeat factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    Cs,
    Cds,
}

impl SpaceKind {
    pub fn candidate_count(self) -> usize {
        match self {
            SpaceKind::Cs => KERNEL_PAIRS.len(),
            SpaceKind::Cds => 2 * KERNEL_PAIRS.len(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Cs => "cs",
            SpaceKind::Cds => "cds",
        }
    }

    pub fn admits(self, spec: &CandidateSpec) -> bool {
        match self {
            SpaceKind::Cs => spec.r == 1,
            SpaceKind::Cds => true,
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(SpaceKind::Cs),
            "cds" => Ok(SpaceKind::Cds),
            other => Err(Error::InvalidArgument(format!("unknown space kind `{other}`"))),
        }
    }
}

/// Candidates of a space, pair-major with `r` ascending.
pub fn candidate_set(kind: SpaceKind) -> Vec<CandidateSpec> {
    let repeats: &[usize] = match kind {
        SpaceKind::Cs => &[1],
        SpaceKind::Cds => &[1, 2],
    };
    KERNEL_PAIRS
        .iter()
        .flat_map(|&(k1, k2)| repeats.iter().map(move |&r| CandidateSpec { k1, k2, r }))
        .collect()
}

/// Number of distinct architectures: `candidates ^ positions`.
pub fn space_size(kind: SpaceKind) -> u64 {
    (kind.candidate_count() as u64).pow(POSITIONS as u32)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn cs_has_six_pairs_starting_at_3_5() {
        let cs = candidate_set(SpaceKind::Cs);
        assert_eq!(cs.len(), 6);
        assert_eq!(cs[0], CandidateSpec { k1: 3, k2: 5, r: 1 });
    }

    #[test]
    fn cds_is_cs_times_repeats() {
        let cds: HashSet<_> = candidate_set(SpaceKind::Cds).into_iter().collect();
        let product: HashSet<_> = candidate_set(SpaceKind::Cs)
            .into_iter()
            .flat_map(|c| [1, 2].map(|r| CandidateSpec { r, ..c }))
            .collect();
        assert_eq!(cds.len(), 12);
        assert_eq!(cds, product);
        let ordered = candidate_set(SpaceKind::Cds);
        assert_eq!(ordered[0], CandidateSpec { k1: 3, k2: 5, r: 1 });
        assert_eq!(ordered[1], CandidateSpec { k1: 3, k2: 5, r: 2 });
    }

    #[test]
    fn cardinalities() {
        assert_eq!(space_size(SpaceKind::Cs), 46656);
        assert_eq!(space_size(SpaceKind::Cds), 2985984);
        assert_eq!(SpaceKind::Cs.candidate_count(), 6);
        assert_eq!(SpaceKind::Cds.candidate_count(), 12);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(CandidateSpec::new(5, 3, 1).is_err());
        assert!(CandidateSpec::new(3, 11, 1).is_err());
        assert!(CandidateSpec::new(3, 5, 3).is_err());
        assert!(CandidateSpec::new(5, 9, 2).is_ok());
    }
}
