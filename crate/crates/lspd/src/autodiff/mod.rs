//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Sufficient for the three-convolution subnets of the unrolled networks and
//! for differentiating through the measurement operators. A [`Tape`] is
//! single-writer and confined to one thread per forward/backward pass;
//! independent tapes may run concurrently on parameter copies.

mod conv;
pub mod finite_diff;
mod params;
mod tape;
mod tensor;

pub use params::{load_checkpoint, save_checkpoint, ParamEntry, ParamId, ParamSet};
pub use tape::{rotate_chw, Gradients, NodeId, Tape};
pub use tensor::Tensor;

use crate::error::Result;
use rand::Rng;

/// A same-padded stride-1 convolution layer bound to named parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    /// Registers kernel and bias. Weights use fan-in-scaled uniform init;
    /// `zero_init` zeroes everything so the layer starts as a no-op.
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        rng: &mut impl Rng,
        zero_init: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let limit = (6.0 / fan_in as f64).sqrt();
        let weight_data: Vec<f32> = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| {
                if zero_init {
                    0.0
                } else {
                    rng.gen_range(-limit..limit) as f32
                }
            })
            .collect();
        let weight = params.register(
            &format!("{name}.weight"),
            Tensor::new(vec![out_ch, in_ch, kernel, kernel], weight_data),
        );
        let bias = params.register(&format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, w, b)
    }
}

/// Per-channel trainable PReLU slope, initialized at 0.25.
#[derive(Clone, Copy, Debug)]
pub struct PreluLayer {
    pub alpha: ParamId,
}

impl PreluLayer {
    pub fn register(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let alpha = params.register(
            &format!("{name}.alpha"),
            Tensor::new(vec![channels], vec![0.25; channels]),
        );
        Self { alpha }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let a = tape.param(params, self.alpha);
        tape.prelu(x, a)
    }
}

#[cfg(test)]
mod tests {
    use super::finite_diff::{check_gradients, worst_rel_err};
    use super::*;
    use crate::linops::{gaussian_operator, partition, PartitionScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn prelu_alpha_one_is_identity_and_alpha_zero_clamps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_flat(vec![-3.0, 2.0]));
        let a1 = tape.leaf(Tensor::from_flat(vec![1.0]));
        let y1 = tape.prelu(x, a1).unwrap();
        assert_eq!(tape.value(y1).data(), &[-3.0, 2.0]);
        let a0 = tape.leaf(Tensor::from_flat(vec![0.0]));
        let y0 = tape.prelu(x, a0).unwrap();
        assert_eq!(tape.value(y0).data(), &[0.0, 2.0]);
    }

    #[test]
    fn prelu_alpha_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = params.register("alpha", Tensor::from_flat(vec![0.3, -0.2]));
        let x_data: Vec<f32> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let checks = check_gradients(
            &params,
            |p, tape| {
                let x = tape.leaf(Tensor::new(vec![2, 4, 4], x_data.clone()));
                let a = tape.param(p, alpha);
                let y = tape.prelu(x, a)?;
                Ok(tape.sq_norm(y))
            },
            4,
            1e-3,
            7,
        )
        .unwrap();
        assert!(worst_rel_err(&checks) <= 1e-3, "checks: {checks:?}");
    }

    #[test]
    fn concat_single_input_is_identity_and_backward_splits() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single).data(), &[1.0, 2.0, 3.0, 4.0]);

        let b = tape.leaf(Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let both = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(both).dims(), &[2, 2, 2]);
        assert_eq!(&tape.value(both).data()[..4], &[1.0, 2.0, 3.0, 4.0]);

        // d/da <w, concat(a,b)> must be exactly the first channel of w.
        let w = tape.leaf(Tensor::new(
            vec![2, 2, 2],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        ));
        let loss = tape.dot(w, both).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(a).unwrap().data(), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(grads.of(b).unwrap().data(), &[0.5, 0.6, 0.7, 0.8]);
    }

    #[test]
    fn mismatched_concat_spatial_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2, 2], vec![0.0; 4]));
        let b = tape.leaf(Tensor::new(vec![1, 3, 3], vec![0.0; 9]));
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_exact() {
        let mut tape = Tape::new();
        let c_data: Vec<f32> = (0..16).map(|i| (i as f32) * 0.1 - 0.8).collect();
        let c = tape.leaf(Tensor::from_flat(c_data.clone()));
        let x = tape.leaf(Tensor::from_flat(vec![0.5; 16]));
        let loss = tape.dot(c, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), c_data.as_slice());
    }

    #[test]
    fn linop_gradient_of_half_sq_norm_is_normal_equations_residual() {
        let op = Arc::new(gaussian_operator(12, 9, None, 5).unwrap());
        let part = Arc::new(partition(&op, 3, PartitionScheme::Contiguous).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_data: Vec<f32> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_flat(x_data.clone()));
        let ax = tape.linop(x, &op, Some((&part, 1)), false).unwrap();
        let sq = tape.sq_norm(ax);
        let loss = tape.mul_const(sq, 0.5);
        let grads = tape.backward(loss).unwrap();

        let sax = op.apply_subset(&x_data, &part, 1).unwrap();
        let expected = op.adjoint_subset(&sax, &part, 1).unwrap();
        for (g, e) in grads.of(x).unwrap().data().iter().zip(&expected) {
            let rel = (g - e).abs() / e.abs().max(1e-6);
            assert!(rel <= 1e-5, "gradient {g} vs (S_iA)^T S_iA x {e}");
        }
    }

    #[test]
    fn linop_zero_input_has_zero_gradient_through_loss() {
        let op = Arc::new(gaussian_operator(8, 6, None, 2).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_flat(vec![0.0; 6]));
        let ax = tape.linop(x, &op, None, false).unwrap();
        let loss = tape.sq_norm(ax);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.of(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linop_finite_difference_check() {
        let op = Arc::new(gaussian_operator(10, 8, None, 3).unwrap());
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_init: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x_id = params.register("x", Tensor::from_flat(x_init));
        let checks = check_gradients(
            &params,
            |p, tape| {
                let x = tape.param(p, x_id);
                let ax = tape.linop(x, &op, None, false)?;
                Ok(tape.sq_norm(ax))
            },
            8,
            1e-3,
            11,
        )
        .unwrap();
        assert!(worst_rel_err(&checks) <= 1e-3, "{checks:?}");
    }

    #[test]
    fn conv_prelu_reduction_matches_finite_differences_over_50_weights() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let conv1 = ConvLayer::register(&mut params, "c1", 3, 2, 5, &mut rng, false);
        let act = PreluLayer::register(&mut params, "a1", 3);
        let conv2 = ConvLayer::register(&mut params, "c2", 1, 3, 5, &mut rng, false);
        let x_data: Vec<f32> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ones = vec![1.0f32; 64];
        let checks = check_gradients(
            &params,
            |p, tape| {
                let x = tape.leaf(Tensor::new(vec![2, 8, 8], x_data.clone()));
                let h = conv1.forward(tape, p, x)?;
                let h = act.forward(tape, p, h)?;
                let y = conv2.forward(tape, p, h)?;
                let flat = tape.reshape(y, vec![64])?;
                let ones_node = tape.leaf(Tensor::from_flat(ones.clone()));
                tape.dot(flat, ones_node)
            },
            50,
            1e-3,
            13,
        )
        .unwrap();
        assert!(worst_rel_err(&checks) <= 1e-3, "worst: {}", worst_rel_err(&checks));
    }

    #[test]
    fn backward_twice_accumulates_gradients_twice() {
        let mut params = ParamSet::new();
        let w = params.register("w", Tensor::from_flat(vec![2.0, -1.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&params, w);
        let loss = tape.sq_norm(wn);
        let grads = tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&grads, &mut params);
        let once = params.grad(w).data().to_vec();
        tape.accumulate_param_grads(&grads, &mut params);
        let twice = params.grad(w).data().to_vec();
        assert_eq!(twice, once.iter().map(|&v| 2.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_flat(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn tape_replay_produces_identical_losses() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let conv = ConvLayer::register(&mut params, "c", 2, 1, 3, &mut rng, false);
        let x_data: Vec<f32> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |p: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![1, 6, 6], x_data.clone()));
            let y = conv.forward(&mut tape, p, x).unwrap();
            let loss = tape.sq_norm(y);
            tape.scalar_f64(loss)
        };
        assert_eq!(run(&params).to_bits(), run(&params).to_bits());
    }

    #[test]
    fn rotation_composition_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = tape.leaf(Tensor::new(vec![1, 4, 4], data.clone()));
        let mut cur = x;
        for _ in 0..4 {
            cur = tape.rotate90(cur, 1).unwrap();
        }
        assert_eq!(tape.value(cur).data(), data.as_slice());
    }
}
