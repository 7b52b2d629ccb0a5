use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::candidate::{CandidateSpec, SpaceKind, POSITIONS};

/// Input resolution at `gamma = 1`.
pub const BASE_RESOLUTION: (usize, usize) = (256, 128);

/// Channel widths of the macro network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelPlan {
    pub stem: usize,
    pub stages: [usize; 3],
    /// Width of the 1x1 projection after the last stage.
    pub embedding: usize,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            stem: 64,
            stages: [64, 96, 128],
            embedding: 512,
        }
    }
}

/// Nearest multiple of 4, never below 4.
pub fn round_channels(c: f64) -> usize {
    (((c / 4.0).round() as usize) * 4).max(4)
}

impl ChannelPlan {
    pub fn scaled(&self, beta: f64) -> Self {
        let s = |c: usize| round_channels(c as f64 * beta);
        Self {
            stem: s(self.stem),
            stages: self.stages.map(s),
            embedding: s(self.embedding),
        }
    }
}

/// A fully specified single-path architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureDescriptor {
    pub kind: SpaceKind,
    pub layers: [CandidateSpec; POSITIONS],
    pub beta: f64,
    pub gamma: f64,
    /// Widths at `beta = 1`; [`ArchitectureDescriptor::channel_plan`] applies `beta`.
    pub base_plan: ChannelPlan,
}

impl ArchitectureDescriptor {
    pub fn new(kind: SpaceKind, layers: [CandidateSpec; POSITIONS]) -> Result<Self> {
        let d = Self {
            kind,
            layers,
            beta: 1.0,
            gamma: 1.0,
            base_plan: ChannelPlan::default(),
        };
        d.validate()?;
        Ok(d)
    }

    /// Builds a descriptor from `(k1, k2, r)` triples.
    pub fn from_triples(kind: SpaceKind, triples: [(usize, usize, usize); POSITIONS]) -> Result<Self> {
        let mut layers = [CandidateSpec { k1: 3, k2: 5, r: 1 }; POSITIONS];
        for (slot, (k1, k2, r)) in layers.iter_mut().zip(triples) {
            *slot = CandidateSpec::new(k1, k2, r)?;
        }
        Self::new(kind, layers)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            CandidateSpec::new(l.k1, l.k2, l.r)?;
            if !self.kind.admits(l) {
                return Err(Error::InvalidArgument(format!(
                    "layer {i}: {l} is not in the {} space",
                    self.kind
                )));
            }
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.iter().map(|l| l.r).sum()
    }

    pub fn channel_plan(&self) -> ChannelPlan {
        self.base_plan.scaled(self.beta)
    }

    /// Intended `(height, width)` of the input image.
    pub fn input_resolution(&self) -> (usize, usize) {
        let s = |v: usize| ((v as f64 * self.gamma).round() as usize).max(1);
        (s(BASE_RESOLUTION.0), s(BASE_RESOLUTION.1))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("cds-arch v1 {} beta={} gamma={}\n", self.kind, self.beta, self.gamma);
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!("layer {i} k1={} k2={} r={}\n", l.k1, l.k2, l.r));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, message: String| Error::Parse { line, message };

        let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty descriptor".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "cds-arch" || fields[1] != "v1" {
            return Err(parse_err(hline, format!("bad header `{header}`")));
        }
        let kind: SpaceKind = fields[2].parse().map_err(|e: Error| parse_err(hline, e.to_string()))?;
        let beta = key_value(fields[3], "beta").ok_or_else(|| parse_err(hline, "expected beta=<f>".into()))?;
        let gamma = key_value(fields[4], "gamma").ok_or_else(|| parse_err(hline, "expected gamma=<f>".into()))?;

        let mut layers = Vec::with_capacity(POSITIONS);
        for (lno, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let index: Option<usize> = f.get(1).and_then(|s| s.parse().ok());
            if f.len() != 5 || f[0] != "layer" || index != Some(layers.len()) {
                return Err(parse_err(lno, format!("expected `layer {} k1=.. k2=.. r=..`", layers.len())));
            }
            let k1 = key_value(f[2], "k1");
            let k2 = key_value(f[3], "k2");
            let r = key_value(f[4], "r");
            let (Some(k1), Some(k2), Some(r)) = (k1, k2, r) else {
                return Err(parse_err(lno, format!("malformed layer line `{line}`")));
            };
            layers.push(CandidateSpec::new(k1, k2, r).map_err(|e| parse_err(lno, e.to_string()))?);
        }
        let layers: [CandidateSpec; POSITIONS] = layers
            .try_into()
            .map_err(|v: Vec<_>| parse_err(0, format!("expected {POSITIONS} layers, found {}", v.len())))?;
        let d = Self {
            kind,
            layers,
            beta,
            gamma,
            base_plan: ChannelPlan::default(),
        };
        d.validate()?;
        Ok(d)
    }
}

fn key_value<V: FromStr>(field: &str, key: &str) -> Option<V> {
    field.strip_prefix(key)?.strip_prefix('=')?.parse().ok()
}

impl fmt::Display for ArchitectureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for ArchitectureDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

/// Copy of `d` with width multiplier `beta` and resolution multiplier
/// `gamma`, both relative to the base plan.
pub fn scale_descriptor(d: &ArchitectureDescriptor, beta: f64, gamma: f64) -> Result<ArchitectureDescriptor> {
    let out = ArchitectureDescriptor {
        beta,
        gamma,
        ..d.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Architectures published for the combined spaces, used as fixtures.
pub mod fixtures {
    use super::*;

    pub fn cnet() -> ArchitectureDescriptor {
        ArchitectureDescriptor::from_triples(
            SpaceKind::Cs,
            [(5, 7, 1), (7, 9, 1), (7, 9, 1), (7, 9, 1), (7, 9, 1), (3, 5, 1)],
        )
        .expect("valid fixture")
    }

    pub fn cdnet() -> ArchitectureDescriptor {
        ArchitectureDescriptor::from_triples(
            SpaceKind::Cds,
            [(3, 5, 1), (3, 7, 2), (5, 7, 2), (5, 9, 1), (5, 7, 2), (5, 7, 1)],
        )
        .expect("valid fixture")
    }

    /// The top-1 search result in the depth-augmented space.
    pub fn cdnet_top1() -> ArchitectureDescriptor {
        ArchitectureDescriptor::from_triples(
            SpaceKind::Cds,
            [(3, 7, 2), (3, 9, 1), (5, 9, 2), (3, 7, 1), (3, 9, 2), (7, 9, 2)],
        )
        .expect("valid fixture")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::space::candidate::candidate_set;
    use proptest::prelude::*;

    #[test]
    fn fixture_depths() {
        assert_eq!(cnet().depth(), 6);
        assert_eq!(cdnet().depth(), 9);
        assert_eq!(cdnet_top1().depth(), 10);
    }

    #[test]
    fn text_round_trip_of_fixtures() {
        for d in [cnet(), cdnet(), cdnet_top1()] {
            let text = d.to_text();
            assert_eq!(ArchitectureDescriptor::parse(&text).unwrap(), d);
        }
        let cdnet_text = cdnet().to_text();
        assert!(cdnet_text.starts_with("cds-arch v1 cds beta=1 gamma=1\nlayer 0 k1=3 k2=5 r=1\n"));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let mut text = cdnet().to_text().replace("layer 3 k1=5 k2=9", "layer 3 k1=9 k2=5");
        match ArchitectureDescriptor::parse(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        text = cdnet().to_text().lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(ArchitectureDescriptor::parse(&text).is_err());
        assert!(ArchitectureDescriptor::parse("cds-arch v2 cds beta=1 gamma=1").is_err());
        // repeat 2 is not admitted by the pair-only space
        let cs = cdnet().to_text().replace(" cds ", " cs ");
        assert!(ArchitectureDescriptor::parse(&cs).is_err());
    }

    #[test]
    fn scaling() {
        let d = cdnet();
        assert_eq!(scale_descriptor(&d, 1.0, 1.0).unwrap(), d);
        let half = scale_descriptor(&d, 1.0, 0.5).unwrap();
        assert_eq!(half.input_resolution(), (128, 64));
        assert!(scale_descriptor(&d, 0.0, 1.0).is_err());
        assert!(scale_descriptor(&d, 1.0, -1.0).is_err());
        let q = scale_descriptor(&d, 0.25, 1.0).unwrap().channel_plan();
        assert_eq!(q, ChannelPlan { stem: 16, stages: [16, 24, 32], embedding: 128 });
        assert_eq!(ChannelPlan::default().scaled(0.01).stages, [4, 4, 4]);
    }

    proptest! {
        #[test]
        fn random_descriptors_round_trip(
            idx in prop::collection::vec(0usize..12, 6),
            beta in 0.05f64..4.0,
            gamma in 0.05f64..4.0,
        ) {
            let cands = candidate_set(SpaceKind::Cds);
            let layers: [CandidateSpec; 6] = std::array::from_fn(|i| cands[idx[i]]);
            let d = ArchitectureDescriptor { beta, gamma, ..ArchitectureDescriptor::new(SpaceKind::Cds, layers).unwrap() };
            prop_assert_eq!(ArchitectureDescriptor::parse(&d.to_text()).unwrap(), d.clone());
            prop_assert!((6..=12).contains(&d.depth()));
        }

        #[test]
        fn rounding_is_multiple_of_four(c in 0.0f64..2000.0) {
            let r = round_channels(c);
            prop_assert_eq!(r % 4, 0);
            prop_assert!(r >= 4);
            prop_assert!(r == 4 || (r as f64 - c).abs() <= 2.0);
        }
    }
}
