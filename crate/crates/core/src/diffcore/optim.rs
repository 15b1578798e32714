//! RMSProp with per-parameter second-moment accumulators.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

use super::{ModelParams, Tensor};

/// Optimizer state bound to one [`ModelParams`] instance: the learning rate,
/// the decay and damping constants, and one accumulator per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    /// Standard settings: decay 0.99, damping 1e-5.
    pub fn new(lr: f64, params: &ModelParams) -> Self {
        Self::with_settings(lr, 0.99, 1e-5, params)
    }

    pub fn with_settings(lr: f64, decay: f64, eps: f64, params: &ModelParams) -> Self {
        assert!(lr > 0.0 && (0.0..1.0).contains(&decay) && eps > 0.0);
        let sq = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.rows(), t.cols())))
            .collect();
        OptimizerState { lr, decay, eps, sq }
    }

    pub fn accumulator(&self, name: &str) -> Option<&Tensor> {
        self.sq.get(name)
    }

    pub(crate) fn accumulators(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.sq.iter()
    }

    pub(crate) fn accumulator_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.sq.get_mut(name)
    }
}

/// One RMSProp update in place. The gradient key set must match the
/// parameters exactly; any non-finite gradient rejects the whole step before
/// anything is mutated.
pub fn rmsprop_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<()> {
    if grads.len() != params.names().count() {
        return Err(CoreError::InvalidArgument(format!(
            "gradient set has {} entries, parameters have {}",
            grads.len(),
            params.names().count()
        )));
    }
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| CoreError::MissingParam { name: name.clone() })?;
        if g.shape() != t.shape() {
            return Err(CoreError::shape(
                format!("gradient `{name}`"),
                format!("{:?}", t.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(CoreError::NonFinite {
                context: format!("gradient `{name}`"),
            });
        }
    }

    let (decay, eps, lr) = (state.decay, state.eps, state.lr);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let acc = state
            .sq
            .get_mut(name)
            .expect("optimizer built from the same parameter set");
        for ((p, s), gv) in t.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *s = decay * *s + (1.0 - decay) * gv * gv;
            *p -= lr * gv / (s.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Activation, Architecture};
    use crate::rng::stream;

    fn tiny_params() -> ModelParams {
        let arch = Architecture::mlp(&[1, 1], Activation::Linear);
        ModelParams::init(arch, &mut stream(3, "optim-test", 0)).unwrap()
    }

    fn grads_of(params: &ModelParams, v: f64) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::filled(t.rows(), t.cols(), v)))
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut state = OptimizerState::new(0.01, &params);
        let grads = grads_of(&params, 0.0);
        rmsprop_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_displacement_approaches_learning_rate() {
        let mut params = tiny_params();
        let mut state = OptimizerState::new(0.01, &params);
        let grads = grads_of(&params, 2.0);
        let mut prev = params.get("layer0.w").unwrap().get(0, 0);
        let mut last_step = 0.0;
        for _ in 0..800 {
            rmsprop_step(&mut params, &grads, &mut state).unwrap();
            let now = params.get("layer0.w").unwrap().get(0, 0);
            last_step = (now - prev).abs();
            prev = now;
        }
        assert!(
            (last_step - state.lr).abs() < 1e-2 * state.lr,
            "step {last_step} vs lr {}",
            state.lr
        );
    }

    #[test]
    fn non_finite_gradient_rejects_step_without_mutation() {
        let mut params = tiny_params();
        let before = params.clone();
        let mut state = OptimizerState::new(0.01, &params);
        let mut grads = grads_of(&params, 1.0);
        grads.get_mut("layer0.b").unwrap().set(0, 0, f64::NAN);
        let err = rmsprop_step(&mut params, &grads, &mut state).unwrap_err();
        assert!(err.to_string().contains("layer0.b"));
        assert_eq!(params, before);
        assert_eq!(
            state.accumulator("layer0.w").unwrap().get(0, 0),
            0.0,
            "accumulator must be untouched on rejection"
        );
    }

    #[test]
    fn update_sequences_are_bitwise_deterministic() {
        let run = || {
            let mut params = tiny_params();
            let mut state = OptimizerState::new(0.005, &params);
            for i in 0..50 {
                let g = grads_of(&params, (i as f64 * 0.1).sin());
                rmsprop_step(&mut params, &g, &mut state).unwrap();
            }
            params.get("layer0.w").unwrap().get(0, 0).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_key_is_an_error() {
        let mut params = tiny_params();
        let mut state = OptimizerState::new(0.01, &params);
        let mut grads = grads_of(&params, 1.0);
        grads.remove("layer0.b");
        assert!(rmsprop_step(&mut params, &grads, &mut state).is_err());
    }
}
