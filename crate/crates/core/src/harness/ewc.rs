use std::sync::Arc;

use crate::error::{contract, Result};
use crate::objective::{nll_on, Masking, TrainPair};
use crate::seq2seq::Seq2SeqModel;
use crate::tensor::{Tape, Tensor};

/// `weight/2 · Σ F (θ − θ*)²`.
pub fn ewc_penalty(params: &[Arc<Tensor>], anchor: &[Vec<f64>], fisher: &[Vec<f64>], weight: f64) -> Result<f64> {
    check(params, anchor, fisher)?;
    let mut s = 0.0;
    for ((p, a), f) in params.iter().zip(anchor).zip(fisher) {
        for ((x, y), w) in p.data().iter().zip(a).zip(f) {
            s += w * (x - y) * (x - y);
        }
    }
    Ok(0.5 * weight * s)
}

/// Adds the penalty gradient `weight · F (θ − θ*)` to `grads`.
pub fn add_ewc_grad(
    grads: &mut [Vec<f64>],
    params: &[Arc<Tensor>],
    anchor: &[Vec<f64>],
    fisher: &[Vec<f64>],
    weight: f64,
) -> Result<()> {
    check(params, anchor, fisher)?;
    for (((g, p), a), f) in grads.iter_mut().zip(params).zip(anchor).zip(fisher) {
        for (((gi, x), y), w) in g.iter_mut().zip(p.data()).zip(a).zip(f) {
            *gi += weight * w * (x - y);
        }
    }
    Ok(())
}

fn check(params: &[Arc<Tensor>], anchor: &[Vec<f64>], fisher: &[Vec<f64>]) -> Result<()> {
    if params.len() != anchor.len() || params.len() != fisher.len() {
        return contract("EWC anchor or fisher does not match the parameter list");
    }
    for (i, p) in params.iter().enumerate() {
        if anchor[i].len() != p.len() || fisher[i].len() != p.len() {
            return contract(format!("EWC shape mismatch at parameter {i}"));
        }
    }
    Ok(())
}

/// Mean over `pairs` of the squared per-example gradient of the unmasked
/// generation loss.
pub fn fisher_diagonal(model: &Seq2SeqModel, pairs: &[TrainPair]) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return contract("fisher over no examples");
    }
    let mut fisher: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    for pair in pairs {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let loss = nll_on(&mut tape, model, &p, std::slice::from_ref(pair), Masking::Full)?;
        let grads = tape.backward(loss.total)?;
        for (f, g) in fisher.iter_mut().zip(p.collect(&tape, &grads)) {
            for (fi, gi) in f.iter_mut().zip(g) {
                *fi += gi * gi;
            }
        }
    }
    let n = pairs.len() as f64;
    fisher.iter_mut().flatten().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Anchor and accumulated fisher carried between tasks.
#[derive(Debug, Clone)]
pub struct EwcState {
    pub anchor: Vec<Vec<f64>>,
    pub fisher: Vec<Vec<f64>>,
}

impl EwcState {
    /// Adds this task's fisher and moves the anchor to the current weights.
    pub fn absorb(state: Option<Self>, params: &[Arc<Tensor>], fisher: Vec<Vec<f64>>) -> Self {
        let anchor = params.iter().map(|p| p.data().to_vec()).collect();
        let fisher = match state {
            Some(mut s) => {
                for (a, b) in s.fisher.iter_mut().zip(&fisher) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                s.fisher
            }
            None => fisher,
        };
        Self { anchor, fisher }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Vec<Arc<Tensor>> {
        vec![Arc::new(Tensor::vector(vec![x]))]
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(ewc_penalty(&one(4.0), &[vec![4.0]], &[vec![2.0]], 5000.0).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&one(9.0), &[vec![4.0]], &[vec![0.0]], 5000.0).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&one(4.0), &[vec![1.0]], &[vec![2.0]], 1.0).unwrap(), 9.0);
        assert!(ewc_penalty(&one(4.0), &[vec![1.0, 2.0]], &[vec![2.0]], 1.0).is_err());
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let mut g = vec![vec![0.0]];
        add_ewc_grad(&mut g, &one(4.0), &[vec![1.0]], &[vec![2.0]], 3.0).unwrap();
        let h = 1e-6;
        let f = |x| ewc_penalty(&one(x), &[vec![1.0]], &[vec![2.0]], 3.0).unwrap();
        let fd = (f(4.0 + h) - f(4.0 - h)) / (2.0 * h);
        assert!((g[0][0] - fd).abs() < 1e-6);
    }

    #[test]
    fn fisher_accumulates() {
        let s = EwcState::absorb(None, &one(1.0), vec![vec![2.0]]);
        let s = EwcState::absorb(Some(s), &one(3.0), vec![vec![0.5]]);
        assert_eq!(s.fisher, vec![vec![2.5]]);
        assert_eq!(s.anchor, vec![vec![3.0]]);
    }
}
