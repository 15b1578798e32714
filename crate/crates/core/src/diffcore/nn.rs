//! Model parameters, architecture descriptors, and the forward passes for
//! dense stacks and the gated recurrent cell.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

use super::{Gradients, Tape, Tensor, Var};

/// Activation applied after a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn id(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "linear" => Some(Activation::Linear),
            "relu" => Some(Activation::Relu),
            "elu" => Some(Activation::Elu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// One layer of an architecture. The recurrent cell is a gated unit with
/// sigmoid gates and a tanh candidate, so hidden entries stay in (-1, 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    GruCell {
        inputs: usize,
        size: usize,
    },
}

impl Layer {
    pub fn inputs(&self) -> usize {
        match self {
            Layer::Dense { inputs, .. } | Layer::GruCell { inputs, .. } => *inputs,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Layer::Dense { outputs, .. } => *outputs,
            Layer::GruCell { size, .. } => *size,
        }
    }
}

/// Layer-by-layer description of a network; chained sizes must agree and at
/// most one recurrent cell is allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<Layer>,
}

impl Architecture {
    /// A plain dense stack: `sizes[0] -> sizes[1] -> ...`, with `hidden` as
    /// the activation everywhere except the final (linear) layer.
    pub fn mlp(sizes: &[usize], hidden: Activation) -> Self {
        assert!(sizes.len() >= 2, "mlp needs input and output size");
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let last = layers.len() == sizes.len() - 2;
            layers.push(Layer::Dense {
                inputs: w[0],
                outputs: w[1],
                activation: if last { Activation::Linear } else { hidden },
            });
        }
        Architecture { layers }
    }

    /// The per-agent utility network shape: dense in, recurrent cell, dense
    /// out.
    pub fn recurrent(inputs: usize, hidden: usize, outputs: usize, pre: Activation) -> Self {
        Architecture {
            layers: vec![
                Layer::Dense {
                    inputs,
                    outputs: hidden,
                    activation: pre,
                },
                Layer::GruCell {
                    inputs: hidden,
                    size: hidden,
                },
                Layer::Dense {
                    inputs: hidden,
                    outputs,
                    activation: Activation::Linear,
                },
            ],
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map(Layer::inputs).unwrap_or(0)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    /// Size of the recurrent state, if the architecture has a cell.
    pub fn hidden_size(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::GruCell { size, .. } => Some(*size),
            _ => None,
        })
    }

    pub fn is_recurrent(&self) -> bool {
        self.hidden_size().is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::InvalidArgument("architecture has no layers".into()));
        }
        let mut grus = 0;
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(CoreError::shape(
                    format!("architecture layer {}", i + 1),
                    format!("inputs {}", pair[0].outputs()),
                    format!("inputs {}", pair[1].inputs()),
                ));
            }
        }
        for l in &self.layers {
            if let Layer::GruCell { inputs, size } = l {
                grus += 1;
                if inputs != size {
                    return Err(CoreError::InvalidArgument(
                        "recurrent cell input width must equal its size".into(),
                    ));
                }
            }
            if l.inputs() == 0 || l.outputs() == 0 {
                return Err(CoreError::InvalidArgument("zero-width layer".into()));
            }
        }
        if grus > 1 {
            return Err(CoreError::InvalidArgument(
                "at most one recurrent cell per architecture".into(),
            ));
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every parameter the descriptor requires, in
    /// deterministic order.
    pub fn param_specs(&self) -> Vec<(String, usize, usize)> {
        let mut specs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { inputs, outputs, .. } => {
                    specs.push((format!("layer{i}.w"), *inputs, *outputs));
                    specs.push((format!("layer{i}.b"), 1, *outputs));
                }
                Layer::GruCell { inputs, size } => {
                    for gate in ["r", "z", "n"] {
                        specs.push((format!("layer{i}.w{gate}"), *inputs, *size));
                        specs.push((format!("layer{i}.u{gate}"), *size, *size));
                        specs.push((format!("layer{i}.b{gate}"), 1, *size));
                    }
                }
            }
        }
        specs
    }
}

/// Named parameter tensors for one architecture. Iteration order is the
/// lexicographic name order of the ordered map, which keeps initialization,
/// updates, and serialization deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    params: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))` per tensor, drawn
    /// from the caller's stream in spec order.
    pub fn init(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        for (name, rows, cols) in arch.param_specs() {
            let k = 1.0 / (rows.max(1) as f64).sqrt();
            let mut t = Tensor::zeros(rows, cols);
            for v in t.data_mut() {
                *v = rng.gen_range(-k..k);
            }
            params.insert(name, t);
        }
        Ok(ModelParams { arch, params })
    }

    /// All-zero parameters (handy for tests and target bootstraps).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, r, c)| (name, Tensor::zeros(r, c)))
            .collect();
        Ok(ModelParams { arch, params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::MissingParam { name: name.into() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| CoreError::MissingParam { name: name.into() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Every tensor the descriptor references exists with the right shape,
    /// and nothing extra is present.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let specs = self.arch.param_specs();
        if specs.len() != self.params.len() {
            return Err(CoreError::InvalidArgument(format!(
                "parameter count {} does not match architecture ({})",
                self.params.len(),
                specs.len()
            )));
        }
        for (name, rows, cols) in specs {
            let t = self.get(&name)?;
            if t.shape() != (rows, cols) {
                return Err(CoreError::shape(
                    format!("param `{name}`"),
                    format!("{rows}x{cols}"),
                    format!("{}x{}", t.rows(), t.cols()),
                ));
            }
        }
        Ok(())
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t)))
            .collect()
    }

    /// Replace parameter values from another instance of the same shape.
    pub fn copy_from(&mut self, other: &ModelParams) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape() != src.shape() {
                return Err(CoreError::shape(
                    format!("param `{name}`"),
                    format!("{:?}", dst.shape()),
                    format!("{:?}", src.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn insert_raw(&mut self, name: String, t: Tensor) {
        self.params.insert(name, t);
    }
}

/// Gather the gradients for every leaf registered via [`ModelParams::leaves`].
pub fn collect_grads(grads: &Gradients, leaves: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
    leaves
        .iter()
        .map(|(name, var)| (name.clone(), grads.get(*var)))
        .collect()
}

fn apply_activation(tape: &Tape, v: Var, act: Activation) -> Var {
    match act {
        Activation::Linear => v,
        Activation::Relu => tape.relu(v),
        Activation::Elu => tape.elu(v),
        Activation::Tanh => tape.tanh(v),
    }
}

/// Run `arch` on the tape. `hidden` must be supplied exactly when the
/// architecture contains a recurrent cell; the returned hidden is `None`
/// for pure dense stacks.
pub fn forward_on_tape(
    tape: &Tape,
    arch: &Architecture,
    leaves: &BTreeMap<String, Var>,
    input: Var,
    hidden: Option<Var>,
) -> Result<(Var, Option<Var>)> {
    if input.cols() != arch.input_size() {
        return Err(CoreError::shape(
            "network input",
            format!("width {}", arch.input_size()),
            format!("width {}", input.cols()),
        ));
    }
    let lv = |name: String| -> Result<Var> {
        leaves
            .get(&name)
            .copied()
            .ok_or(CoreError::MissingParam { name })
    };
    let mut x = input;
    let mut new_hidden = None;
    for (i, layer) in arch.layers.iter().enumerate() {
        match layer {
            Layer::Dense { activation, .. } => {
                let w = lv(format!("layer{i}.w"))?;
                let b = lv(format!("layer{i}.b"))?;
                x = apply_activation(tape, tape.add_row(tape.matmul(x, w), b), *activation);
            }
            Layer::GruCell { size, .. } => {
                let h = hidden.ok_or_else(|| {
                    CoreError::InvalidArgument("recurrent architecture needs a hidden state".into())
                })?;
                if h.cols() != *size || h.rows() != x.rows() {
                    return Err(CoreError::shape(
                        format!("hidden state at layer {i}"),
                        format!("{}x{}", x.rows(), size),
                        format!("{}x{}", h.rows(), h.cols()),
                    ));
                }
                let gate = |w: &str| -> Result<(Var, Var, Var)> {
                    Ok((
                        lv(format!("layer{i}.w{w}"))?,
                        lv(format!("layer{i}.u{w}"))?,
                        lv(format!("layer{i}.b{w}"))?,
                    ))
                };
                let (wr, ur, br) = gate("r")?;
                let (wz, uz, bz) = gate("z")?;
                let (wn, un, bn) = gate("n")?;
                let r = tape.sigmoid(tape.add_row(
                    tape.add(tape.matmul(x, wr), tape.matmul(h, ur)),
                    br,
                ));
                let z = tape.sigmoid(tape.add_row(
                    tape.add(tape.matmul(x, wz), tape.matmul(h, uz)),
                    bz,
                ));
                let cand = tape.tanh(tape.add_row(
                    tape.add(tape.matmul(x, wn), tape.mul_elem(r, tape.matmul(h, un))),
                    bn,
                ));
                // h' = (1 - z) * cand + z * h
                let keep = tape.mul_elem(z, h);
                let one_minus_z = tape.add_scalar(tape.neg(z), 1.0);
                let h_next = tape.add(tape.mul_elem(one_minus_z, cand), keep);
                new_hidden = Some(h_next);
                x = h_next;
            }
        }
    }
    Ok((x, new_hidden))
}

/// Feedforward evaluation of a dense-only architecture.
pub fn mlp_forward(params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    if params.arch.is_recurrent() {
        return Err(CoreError::InvalidArgument(
            "mlp_forward on a recurrent architecture; use recurrent_step".into(),
        ));
    }
    if !input.all_finite() {
        return Err(CoreError::NonFinite {
            context: "mlp_forward input".into(),
        });
    }
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let (out, _) = forward_on_tape(&tape, &params.arch, &leaves, tape.leaf(input), None)?;
    let out = tape.value(out);
    if !out.all_finite() {
        return Err(CoreError::NonFinite {
            context: "mlp_forward output".into(),
        });
    }
    Ok(out)
}

/// One step of a recurrent architecture: `(output, hidden_next)`.
pub fn recurrent_step(
    params: &ModelParams,
    input: &Tensor,
    hidden: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if !params.arch.is_recurrent() {
        return Err(CoreError::InvalidArgument(
            "recurrent_step on a feedforward architecture; use mlp_forward".into(),
        ));
    }
    if !input.all_finite() || !hidden.all_finite() {
        return Err(CoreError::NonFinite {
            context: "recurrent_step input".into(),
        });
    }
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let (out, h) = forward_on_tape(
        &tape,
        &params.arch,
        &leaves,
        tape.leaf(input),
        Some(tape.leaf(hidden)),
    )?;
    let h = h.expect("recurrent architecture produced no hidden state");
    let (out, h) = (tape.value(out), tape.value(h));
    if !out.all_finite() || !h.all_finite() {
        return Err(CoreError::NonFinite {
            context: "recurrent_step output".into(),
        });
    }
    Ok((out, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identity_weights_pass_input_through() {
        let arch = Architecture::mlp(&[2, 2], Activation::Linear);
        let mut params = ModelParams::zeros(arch).unwrap();
        let w = params.get_mut("layer0.w").unwrap();
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let out = mlp_forward(&params, &Tensor::vector(&[3.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let arch = Architecture::mlp(&[3, 2], Activation::Linear);
        let mut params = ModelParams::zeros(arch).unwrap();
        params
            .get_mut("layer0.b")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.25, -0.75]);
        let out = mlp_forward(&params, &Tensor::vector(&[9.0, 8.0, 7.0])).unwrap();
        assert_eq!(out.data(), &[0.25, -0.75]);
    }

    #[test]
    fn three_layer_forward_matches_straight_line_reimplementation() {
        let arch = Architecture::mlp(&[4, 5, 3, 2], Activation::Relu);
        let mut rng = stream(11, "nn-test", 0);
        let params = ModelParams::init(arch, &mut rng).unwrap();
        let input = Tensor::vector(&[0.3, -0.8, 1.4, 0.05]);
        let got = mlp_forward(&params, &input).unwrap();

        // Plain nested loops, no tape.
        let mut x = input.data().to_vec();
        for (i, sizes) in [(0usize, (4usize, 5usize)), (1, (5, 3)), (2, (3, 2))] {
            let w = params.get(&format!("layer{i}.w")).unwrap();
            let b = params.get(&format!("layer{i}.b")).unwrap();
            let (from, to) = sizes;
            let mut y = vec![0.0; to];
            for c in 0..to {
                let mut acc = b.get(0, c);
                for r in 0..from {
                    acc += x[r] * w.get(r, c);
                }
                y[c] = if i < 2 { acc.max(0.0) } else { acc };
            }
            x = y;
        }
        for (a, b) in got.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_width_mismatch_is_a_structured_error() {
        let arch = Architecture::mlp(&[4, 2], Activation::Relu);
        let params = ModelParams::zeros(arch).unwrap();
        let err = mlp_forward(&params, &Tensor::vector(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("network input"), "got: {msg}");
    }

    #[test]
    fn gru_zero_everything_stays_zero() {
        let arch = Architecture::recurrent(3, 4, 2, Activation::Relu);
        let params = ModelParams::zeros(arch).unwrap();
        let (_, h) = recurrent_step(&params, &Tensor::vector(&[0.0; 3]), &Tensor::vector(&[0.0; 4]))
            .unwrap();
        assert_eq!(h.data(), &[0.0; 4]);
    }

    #[test]
    fn gru_hidden_stays_in_open_unit_interval() {
        let arch = Architecture::recurrent(3, 8, 2, Activation::Relu);
        let mut rng = stream(5, "nn-test", 1);
        let params = ModelParams::init(arch, &mut rng).unwrap();
        let mut h = Tensor::zeros(1, 8);
        for step in 0..50 {
            let input = Tensor::vector(&[(step as f64 * 0.37).sin(), 1.0, -2.0]);
            let (_, h2) = recurrent_step(&params, &input, &h).unwrap();
            assert!(h2.data().iter().all(|v| v.abs() < 1.0), "step {step}");
            h = h2;
        }
    }

    #[test]
    fn gru_repeated_input_converges_to_fixed_point() {
        let arch = Architecture::recurrent(2, 6, 2, Activation::Relu);
        let mut rng = stream(17, "nn-test", 2);
        let params = ModelParams::init(arch, &mut rng).unwrap();
        let input = Tensor::vector(&[0.4, -0.9]);
        let mut h = Tensor::zeros(1, 6);
        let mut converged = false;
        for _ in 0..200 {
            let (_, h2) = recurrent_step(&params, &input, &h).unwrap();
            let delta: f64 = h2
                .data()
                .iter()
                .zip(h.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            h = h2;
            if delta < 1e-6 {
                converged = true;
                break;
            }
        }
        assert!(converged, "no fixed point within 200 steps");
    }

    #[test]
    fn non_finite_hidden_is_rejected() {
        let arch = Architecture::recurrent(2, 3, 2, Activation::Relu);
        let params = ModelParams::zeros(arch).unwrap();
        let mut h = Tensor::zeros(1, 3);
        h.set(0, 1, f64::NAN);
        assert!(recurrent_step(&params, &Tensor::vector(&[0.0, 0.0]), &h).is_err());
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let arch = Architecture::mlp(&[3, 3], Activation::Relu);
        let a = ModelParams::init(arch.clone(), &mut stream(9, "init", 0)).unwrap();
        let b = ModelParams::init(arch, &mut stream(9, "init", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_catches_shape_skew() {
        let arch = Architecture::mlp(&[3, 2], Activation::Relu);
        let mut params = ModelParams::zeros(arch).unwrap();
        params.insert_raw("layer0.w".into(), Tensor::zeros(2, 2));
        assert!(params.validate().is_err());
    }
}
