//! Prosody predictor: estimates the current turn's acoustic utterance
//! embedding from the global context vectors. Used only in training.

use crate::autodiff::{Init, ParamStore, Tape, Var};
use crate::config::Reduction;
use crate::context::{ContextEmbeddings, StyleAssembler};
use crate::error::{Error, Result};
use crate::fusion::Linear;

#[derive(Clone, Debug)]
pub struct Ppm {
    pub hidden: Linear,
    pub output: Linear,
    pub out_dim: usize,
}

impl Ppm {
    pub fn new(store: &mut ParamStore, init: &mut Init, d: usize, out_dim: usize) -> Self {
        Self {
            hidden: Linear::new(store, init, "ppm.hidden", 2 * d, d, true),
            output: Linear::new(store, init, "ppm.output", d, out_dim, true),
            out_dim,
        }
    }

    /// Disabled coarse modules are replaced by the style assembler's null
    /// vectors. Errors when both are absent.
    pub fn forward(&self, tape: &mut Tape, ctx: &ContextEmbeddings, nulls: &StyleAssembler) -> Result<Var> {
        if ctx.text.is_none() && ctx.acoustic.is_none() {
            return Err(Error::InvalidArgument(
                "prosody predictor needs at least one coarse context vector".into(),
            ));
        }
        let x = nulls.joined(tape, ctx)?;
        let h = self.hidden.forward(tape, x)?;
        let h = tape.tanh(h);
        self.output.forward(tape, h)
    }
}

/// Squared error between `pred` (`1 × D`) and `target`, mean or sum reduced.
pub fn prosody_loss_var(tape: &mut Tape, pred: Var, target: &[f64], reduction: Reduction) -> Result<Var> {
    let (r, c) = tape.shape(pred);
    if r != 1 || c != target.len() {
        return Err(Error::Shape(format!(
            "prosody prediction {r}×{c} vs target of {}",
            target.len()
        )));
    }
    let t = tape.row_leaf(target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    Ok(match reduction {
        Reduction::Mean => tape.scale(s, 1.0 / c as f64),
        Reduction::Sum => s,
    })
}

/// Mean of squared differences.
pub fn prosody_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prosody prediction of {} vs target of {}",
            pred.len(),
            target.len()
        )));
    }
    let s: f64 = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        assert_eq!(prosody_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(prosody_loss(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(prosody_loss(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ppm_shape_and_gradient_to_text_context() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2);
        let nulls = StyleAssembler::new(&mut store, &mut init, 4, 3);
        let ppm = Ppm::new(&mut store, &mut init, 4, 768);
        let h = init.normal(1, 4, 1.0);
        let target = vec![0.01; 768];
        let mut tape = Tape::new(&store);
        let hv = tape.leaf(h);
        let ctx = ContextEmbeddings { text: Some(hv), acoustic: None };
        let p = ppm.forward(&mut tape, &ctx, &nulls).unwrap();
        assert_eq!(tape.shape(p), (1, 768));
        let again = ppm.forward(&mut tape, &ctx, &nulls).unwrap();
        assert_eq!(tape.value(p), tape.value(again));
        let loss = prosody_loss_var(&mut tape, p, &target, Reduction::Mean).unwrap();
        let g = tape.backward(loss);
        assert!(g.of(hv).unwrap().iter().any(|x| x.abs() > 0.0));
        assert!(ppm.forward(&mut tape, &ContextEmbeddings::default(), &nulls).is_err());
    }
}
