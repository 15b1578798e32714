//! Finite-difference verification of tape gradients.
//!
//! The numeric side perturbs every parameter entry with a central difference
//! and re-evaluates the caller's loss closure; the result is compared entry
//! by entry against the analytic gradients from a backward sweep.

use std::collections::BTreeMap;

use super::{ModelParams, Tensor};

/// Central-difference gradient of `loss` with respect to every entry of
/// every parameter. `loss` must be a pure function of the parameters.
pub fn numeric_gradient<F>(params: &mut ModelParams, mut loss: F, h: f64) -> BTreeMap<String, Tensor>
where
    F: FnMut(&ModelParams) -> f64,
{
    assert!(h > 0.0);
    let names: Vec<String> = params.names().cloned().collect();
    let mut out = BTreeMap::new();
    for name in names {
        let (rows, cols) = params.get(&name).unwrap().shape();
        let mut g = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss(params);
            params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss(params);
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.insert(name, g);
    }
    out
}

/// Largest relative error between two gradient sets. Pairs where both sides
/// are smaller than 1e-10 in magnitude count as zero error.
pub fn max_rel_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient key sets differ");
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = numeric.get(name).expect("same key set");
        assert_eq!(a.shape(), n.shape());
        for (av, nv) in a.data().iter().zip(n.data()) {
            let scale = av.abs().max(nv.abs());
            if scale < 1e-10 {
                continue;
            }
            worst = worst.max((av - nv).abs() / scale.max(1e-8));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{collect_grads, forward_on_tape, Activation, Architecture, Tape};
    use crate::rng::stream;

    /// Loss: sum of squared outputs plus sum of outputs, which keeps every
    /// parameter's gradient well scaled.
    fn tape_loss(params: &ModelParams, input: &Tensor) -> (f64, BTreeMap<String, Tensor>) {
        let tape = Tape::new();
        let leaves = params.leaves(&tape);
        let (out, _) =
            forward_on_tape(&tape, &params.arch, &leaves, tape.leaf(input), None).unwrap();
        let sq = tape.mul_elem(out, out);
        let loss = tape.add(tape.sum(sq), tape.sum(out));
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        (value, collect_grads(&grads, &leaves))
    }

    #[test]
    fn two_layer_net_gradients_match_finite_differences() {
        let arch = Architecture::mlp(&[4, 6, 3], Activation::Tanh);
        let mut rng = stream(21, "fd-test", 0);
        let mut params = ModelParams::init(arch, &mut rng).unwrap();
        let input = Tensor::vector(&[0.9, -0.3, 0.2, 1.1]);

        let (_, analytic) = tape_loss(&params, &input);
        let numeric = numeric_gradient(&mut params, |p| tape_loss(p, &input).0, 1e-4);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
