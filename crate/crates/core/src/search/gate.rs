//! Top-k straight-through gating of MBlock branches.

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::space::BranchGate;
use crate::tensor::{Element, Tensor};

/// Softmax of one α vector, with max subtraction.
pub fn branch_probabilities(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::InvalidArgument("empty architecture vector".into()));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("architecture parameters".into()));
    }
    let mut p = alpha.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("top-k must lie in 1..={n}, got {k}")));
    }
    Ok(())
}

/// Indices of the `k` largest entries, ascending. Equal values favour the
/// lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(k, p.len())?;
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

/// Binary vector with ones at the top-`k` entries of `p`.
pub fn topk_gate(p: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut h = vec![0.0; p.len()];
    for i in topk_indices(p, k)? {
        h[i] = 1.0;
    }
    Ok(h)
}

/// `(h - p) + p`, equal to `h` in value.
pub fn straight_through(h: &[f64], p: &[f64]) -> Vec<f64> {
    h.iter().zip(p).map(|(&h, &p)| (h - p) + p).collect()
}

/// Values of the gate quantities of one MBlock for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub p: Vec<f64>,
    pub h: Vec<f64>,
    /// The constant bridge `h - p`.
    pub m: Vec<f64>,
    pub hhat: Vec<f64>,
    pub k: usize,
}

impl GateState {
    pub fn new(alpha: &[f64], k: usize) -> Result<Self> {
        let p = branch_probabilities(alpha)?;
        Self::from_probabilities(p, k)
    }

    fn from_probabilities(p: Vec<f64>, k: usize) -> Result<Self> {
        let h = topk_gate(&p, k)?;
        let m: Vec<f64> = h.iter().zip(&p).map(|(h, p)| h - p).collect();
        let hhat = m.iter().zip(&p).map(|(m, p)| m + p).collect();
        Ok(Self { p, h, m, hhat, k })
    }

    pub fn selected(&self) -> Vec<usize> {
        (0..self.h.len()).filter(|&i| self.h[i] == 1.0).collect()
    }

    /// Distance between the k-th and (k+1)-th largest probabilities;
    /// infinite when every branch is selected.
    pub fn threshold_gap(&self) -> f64 {
        let mut sorted = self.p.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match sorted.get(self.k) {
            Some(next) => sorted[self.k - 1] - next,
            None => f64::INFINITY,
        }
    }
}

/// Which branches a gated forward evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    /// Only the selected branches.
    #[default]
    Sparse,
    /// Every branch, weighted by its gate value, zero for the unselected.
    Masked,
}

/// Records `p = softmax(alpha)` and `ĥ = m + p` on the tape, where the
/// bridge `m = h - p` enters as a constant.
pub fn gate_on_tape<T: Element>(tape: &mut Tape<T>, alpha: Var, k: usize, mode: GateMode) -> Result<(BranchGate, GateState)> {
    let p = tape.softmax(alpha)?;
    let pv: Vec<T> = tape.value(p).data().to_vec();
    let pf: Vec<f64> = pv.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let selected = topk_indices(&pf, k)?;
    let h: Vec<T> = (0..pv.len())
        .map(|i| if selected.binary_search(&i).is_ok() { T::one() } else { T::zero() })
        .collect();
    let m: Vec<T> = h.iter().zip(&pv).map(|(&h, &p)| h - p).collect();
    let mvar = tape.constant(Tensor::new(vec![m.len()], m.clone())?);
    let hhat = tape.add(mvar, p)?;
    let f = |v: &[T]| -> Vec<f64> { v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect() };
    let state = GateState {
        p: pf,
        h: f(&h),
        m: f(&m),
        hhat: f(tape.value(hhat).data()),
        k,
    };
    let active = match mode {
        GateMode::Sparse => selected,
        GateMode::Masked => (0..pv.len()).collect(),
    };
    Ok((BranchGate { weights: hhat, active }, state))
}

/// `ĥ = m + softmax(alpha)` with a caller-supplied frozen bridge `m`. Used to
/// probe the gate's derivative at points where `h` would otherwise change.
pub fn gate_with_bridge<T: Element>(tape: &mut Tape<T>, alpha: Var, m: &[T], active: Vec<usize>) -> Result<BranchGate> {
    let p = tape.softmax(alpha)?;
    if tape.shape(p) != [m.len()] {
        return Err(Error::ShapeMismatch {
            op: "gate_with_bridge",
            lhs: tape.shape(p).to_vec(),
            rhs: vec![m.len()],
        });
    }
    let mvar = tape.constant(Tensor::new(vec![m.len()], m.to_vec())?);
    let hhat = tape.add(mvar, p)?;
    Ok(BranchGate { weights: hhat, active })
}
