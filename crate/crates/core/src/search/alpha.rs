use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::space::{candidate_set, scale_descriptor, ArchitectureDescriptor, CandidateSpec, SpaceKind, POSITIONS};
use crate::tensor::Tensor;

/// Checkpoint name prefix of the architecture vectors.
pub const ALPHA_PREFIX: &str = "alpha.";

/// One architecture vector per MBlock.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaParams {
    layers: Vec<Vec<f64>>,
}

impl AlphaParams {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("architecture vectors must be nonempty".into()));
        }
        let alpha = Self { layers };
        alpha.check_finite()?;
        Ok(alpha)
    }

    /// All-zero vectors of the given lengths.
    pub fn zeros(counts: &[usize]) -> Result<Self> {
        Self::new(counts.iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn for_space(kind: SpaceKind) -> Self {
        Self::zeros(&[kind.candidate_count(); POSITIONS]).expect("nonempty")
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.layers[i]
    }

    pub fn positions(&self) -> usize {
        self.layers.len()
    }

    pub fn branch_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.layers.iter().position(|l| l.iter().any(|v| !v.is_finite())) {
            Some(i) => Err(Error::NonFinite(format!("alpha of position {i}"))),
            None => Ok(()),
        }
    }

    /// Index of the largest entry per position, lowest index on ties.
    pub fn argmax(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| {
                l.iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > l[best] { j } else { best })
            })
            .collect()
    }

    pub fn csv_header(&self) -> String {
        let mut cols = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for j in 0..l.len() {
                cols.push(format!("alpha_{i}_{j}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_values(&self) -> String {
        self.layers.iter().flatten().map(f64::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn write_to(&self, ck: &mut Checkpoint) {
        for (i, l) in self.layers.iter().enumerate() {
            let t = Tensor::new(vec![l.len()], l.clone()).expect("nonempty");
            ck.insert(format!("{ALPHA_PREFIX}{i}"), &t);
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(t) = ck.get::<f64>(&format!("{ALPHA_PREFIX}{}", layers.len())) {
            layers.push(t.data().to_vec());
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint("no architecture vectors found".into()));
        }
        Self::new(layers)
    }
}

/// The candidate with the largest weight at each position.
pub fn derive(alpha: &AlphaParams, kind: SpaceKind, beta: f64, gamma: f64) -> Result<ArchitectureDescriptor> {
    let set = candidate_set(kind);
    if alpha.positions() != POSITIONS || alpha.branch_counts().iter().any(|&n| n != set.len()) {
        return Err(Error::InvalidArgument(format!(
            "architecture vectors {:?} do not match {POSITIONS} positions of {} candidates",
            alpha.branch_counts(),
            set.len()
        )));
    }
    alpha.check_finite()?;
    let picks: Vec<CandidateSpec> = alpha.argmax().into_iter().map(|j| set[j]).collect();
    let d = ArchitectureDescriptor::new(kind, picks.try_into().expect("six positions"))?;
    scale_descriptor(&d, beta, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::fixtures;
    use proptest::prelude::*;

    fn encode(d: &ArchitectureDescriptor) -> AlphaParams {
        let set = candidate_set(d.kind);
        let layers = d
            .layers
            .iter()
            .map(|l| {
                let j = set.iter().position(|c| c == l).unwrap();
                (0..set.len()).map(|i| if i == j { 2.5 } else { -0.1 * i as f64 }).collect()
            })
            .collect();
        AlphaParams::new(layers).unwrap()
    }

    #[test]
    fn table_fixtures_derive_back() {
        for d in [fixtures::cnet(), fixtures::cdnet(), fixtures::cdnet_top1()] {
            assert_eq!(derive(&encode(&d), d.kind, 1.0, 1.0).unwrap(), d);
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        let a = AlphaParams::for_space(SpaceKind::Cds);
        assert_eq!(a.argmax(), vec![0; 6]);
        let a = AlphaParams::new(vec![vec![0.0, 1.0, 1.0]]).unwrap();
        assert_eq!(a.argmax(), vec![1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = AlphaParams::new(vec![vec![0.25, -1.0], vec![3.0, 0.0, 1.5]]).unwrap();
        let mut ck = Checkpoint::new();
        a.write_to(&mut ck);
        assert!(ck.get::<f64>("alpha.1").is_some());
        let ck = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(AlphaParams::read_from(&ck).unwrap(), a);
    }

    #[test]
    fn csv_layout() {
        let a = AlphaParams::new(vec![vec![0.5, 1.0], vec![2.0]]).unwrap();
        assert_eq!(a.csv_header(), "alpha_0_0,alpha_0_1,alpha_1_0");
        assert_eq!(a.csv_values(), "0.5,1,2");
    }

    #[test]
    fn shape_and_finiteness_enforced() {
        assert!(AlphaParams::new(vec![vec![0.0, f64::NAN]]).is_err());
        assert!(derive(&AlphaParams::zeros(&[6; 5]).unwrap(), SpaceKind::Cs, 1.0, 1.0).is_err());
        assert!(derive(&AlphaParams::for_space(SpaceKind::Cs), SpaceKind::Cds, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn derive_is_shift_invariant(vals in proptest::collection::vec(-3.0f64..3.0, 72), shifts in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let layers: Vec<Vec<f64>> = vals.chunks(12).map(<[f64]>::to_vec).collect();
            let a = AlphaParams::new(layers.clone()).unwrap();
            let b = AlphaParams::new(layers.iter().zip(&shifts).map(|(l, s)| l.iter().map(|v| v + s).collect()).collect()).unwrap();
            let p = |x: &AlphaParams| x.layers().iter().map(|l| crate::search::branch_probabilities(l).unwrap()).collect::<Vec<_>>();
            let pa = AlphaParams::new(p(&a)).unwrap();
            prop_assert_eq!(derive(&a, SpaceKind::Cds, 1.0, 1.0).unwrap(), derive(&pa, SpaceKind::Cds, 1.0, 1.0).unwrap());
            prop_assert_eq!(a.argmax(), pa.argmax());
            // Shifts can merge near-equal entries through rounding; compare only clear winners.
            for (i, l) in layers.iter().enumerate() {
                let mut s = l.clone();
                s.sort_by(|x, y| y.total_cmp(x));
                if s[0] - s[1] > 1e-9 {
                    prop_assert_eq!(a.argmax()[i], b.argmax()[i]);
                }
            }
        }
    }
}
